import numpy as np
import pytest

from mcslam.config import SlamConfig
from mcslam.errors import InitializationFailed
from mcslam.evaluation import Trajectory, align_sim3, associate, compute_ate
from mcslam.sim import FrameRecord
from mcslam.system import SystemState, run_pipeline, step_sequential, write_outputs
from mcslam.tracking import Status

from scenarios import circle_dataset

N = 120
BLACKOUT = 80


@pytest.fixture(scope="module")
def circle():
    return circle_dataset(n_frames=N)


def blank(record) -> FrameRecord:
    empty = (np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros((0, 4), dtype=np.uint64))
    return FrameRecord(record.timestamp, [empty] * len(record.cameras),
                       [np.zeros(0, dtype=np.int64)] * len(record.cameras))


@pytest.fixture(scope="module")
def seq_run(circle):
    state = SystemState(circle.mcs, SlamConfig())
    statuses, batches = [], 0
    for i, rec in enumerate(circle.records):
        audits = state.n_audits
        step_sequential(state, i, rec)
        statuses.append(state.status)
        assert state.mkf_queue.empty() and state.loop_queue.empty()
        batches += state.frames[-1].inserted_mkf is not None
        # every drained batch was audited right away
        assert state.n_audits - audits == (state.frames[-1].inserted_mkf is not None)
    return state, statuses, batches


def test_status_stays_ok_after_initialization(seq_run):
    state, statuses, _ = seq_run
    start = state.initialized_at
    assert start is not None and start < 30
    assert all(s == Status.OK for s in statuses[start:])


def test_audit_after_every_batch(seq_run):
    state, _, batches = seq_run
    assert batches > 0 and state.n_audits == batches
    assert state.audit_violations == []


def test_tracked_frames_close_to_truth(seq_run, circle):
    state, _, _ = seq_run
    ts, poses = state.frame_trajectory()
    gt = Trajectory(np.asarray(circle.trajectory.timestamps), list(circle.trajectory.poses))
    pairs = associate(gt, Trajectory(ts, poses))
    assert len(pairs) == state.stats()["tracked_frames"]
    assert compute_ate(pairs, align_sim3(pairs)) < 1e-3


def test_blackout_frame_is_lost_then_relocalized(circle):
    state = SystemState(circle.mcs, SlamConfig())
    for i, rec in enumerate(circle.records[:BLACKOUT + 3]):
        step_sequential(state, i, blank(rec) if i == BLACKOUT else rec)
        if i == BLACKOUT:
            assert state.status == Status.LOST
        elif i == BLACKOUT + 1:
            assert state.status == Status.OK
    assert state.stats()["lost_frames"] == 1
    assert state.audit_violations == []


def test_pipelined_mode_keeps_invariants(circle, tmp_path):
    state = run_pipeline(circle.mcs, circle.records[:80], SlamConfig(), tmp_path, "pipelined")
    stats = state.stats()
    assert stats["initialized_at"] is not None
    assert stats["mkfs"] >= 2 and stats["audits"] >= stats["mkfs"] - 2
    assert stats["audit_violations"] == 0
    assert not state.map.audit()
    assert (tmp_path / "trajectory.tum").exists()


def test_no_initialization_within_budget(circle):
    cfg = SlamConfig(init_max_frames=20)
    rec = blank(circle.records[0])
    with pytest.raises(InitializationFailed):
        run_pipeline(circle.mcs, [rec] * 25, cfg)


def test_unknown_mode_rejected(circle):
    with pytest.raises(ValueError):
        run_pipeline(circle.mcs, [], SlamConfig(), mode="fast")


def test_output_files(seq_run, tmp_path):
    state, _, _ = seq_run
    write_outputs(state, tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"trajectory.tum", "mkf_trajectory.tum", "stats.json", "map.json",
            "frames.csv"} <= names
    rows = (tmp_path / "frames.csv").read_text().splitlines()
    assert len(rows) == N + 1
    tum = [ln for ln in (tmp_path / "trajectory.tum").read_text().splitlines()
           if not ln.startswith("#")]
    assert len(tum) == state.stats()["tracked_frames"]
