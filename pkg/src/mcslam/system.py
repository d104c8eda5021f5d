"""Shared pipeline state, deterministic stepping and the threaded pipeline."""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import SlamConfig
from .evaluation import write_tum
from .geometry import SE3Pose
from .loopclosing import LoopCloser, LoopEvent
from .mapdb import Map, MultiKeyframe
from .mapping import LocalMapper
from .tracking import Frame, FrameState, Status, Tracker
from .vocabulary import RecognitionDatabase, default_vocabulary

log = logging.getLogger(__name__)

STAGES = ("tracking", "mapping", "loop_closing")


@dataclass
class FrameLog:
    index: int
    timestamp: float
    status: Status
    n_matches: int
    ref_mkf: int | None          # pose is stored relative to this MKF
    rel: SE3Pose | None
    inserted_mkf: int | None = None


class SystemState:
    """Map, recognition database, workers, flags and queues of one SLAM session."""

    def __init__(self, mcs, cfg: SlamConfig | None = None, vocabulary=None,
                 audit: bool = True):
        self.cfg = cfg = cfg or SlamConfig()
        self.mcs = mcs
        self.vocabulary = vocabulary or default_vocabulary()
        self.map = Map(mcs)
        self.db = RecognitionDatabase(self.vocabulary)
        self.tracker = Tracker(self.map, self.db, self.vocabulary, mcs, cfg)
        self.mapper = LocalMapper(self.map, self.db, self.vocabulary, mcs, cfg)
        self.closer = LoopCloser(self.map, self.db, mcs, cfg)
        self.seed = cfg.seed
        self.mapping_idle = threading.Event()
        self.mapping_idle.set()
        self.mkf_queue: queue.Queue = queue.Queue()
        self.loop_queue: queue.Queue = queue.Queue()
        self.loop_events: list[LoopEvent] = []
        self.frames: list[FrameLog] = []
        self.timings: dict[str, list[float]] = {s: [] for s in STAGES}
        self.audit = audit
        self.n_audits = 0
        self.audit_violations: list[tuple[int, str]] = []
        self.initialized_at: int | None = None

    @property
    def status(self) -> Status:
        return self.tracker.status

    # ----------------------------------------------------------- stages

    def _track(self, index: int, record) -> tuple[Frame, FrameState]:
        frame = Frame.from_record(index, record, self.mcs)
        t0 = time.perf_counter()
        st = self.tracker.track(frame)
        self.timings["tracking"].append(time.perf_counter() - t0)
        if self.tracker.init_mkfs is not None:
            self.mapper.add_initial(self.tracker.init_mkfs)
            self.tracker.init_mkfs = None
            self.initialized_at = index
        with self.map.lock:
            ref, rel = None, None
            if st.status == Status.OK and frame.pose is not None:
                ref = self.tracker.ref_mkf
                ref_pose = self.map.mkf_pose(ref) if ref is not None else None
                if ref_pose is None:
                    ref, rel = None, frame.pose
                else:
                    rel = ref_pose.inverse().compose(frame.pose)
        self.frames.append(FrameLog(index, frame.timestamp, st.status, st.n_matches, ref, rel))
        return frame, st

    def _map(self, mkf: MultiKeyframe) -> dict:
        t0 = time.perf_counter()
        stats = self.mapper.process(mkf)
        self.timings["mapping"].append(time.perf_counter() - t0)
        return stats

    def _close(self, mkf: MultiKeyframe) -> LoopEvent | None:
        if not self.cfg.loop_closing:
            return None
        t0 = time.perf_counter()
        ev = self.closer.process(mkf)
        self.timings["loop_closing"].append(time.perf_counter() - t0)
        if ev is not None:
            self.tracker.apply_correction(self.closer.last_correction)
            self.loop_events.append(ev)
        return ev

    def _audit(self, index: int) -> None:
        if not self.audit:
            return
        with self.map.lock:
            bad = self.map.audit()
        self.n_audits += 1
        for msg in bad:
            self.audit_violations.append((index, msg))
        if bad:
            log.error("map audit failed after frame %d: %s", index, bad[:3])

    # ------------------------------------------------------ sequential

    def step(self, index: int, record) -> FrameState:
        """Track one frame, then drain the MKF and loop queues in fixed order."""
        frame, st = self._track(index, record)
        if st.status == Status.OK and self.tracker.want_mkf(frame, self.mapping_idle.is_set()):
            mkf = self.tracker.make_mkf(frame)
            self.frames[-1].inserted_mkf = mkf.id
            self.mkf_queue.put(mkf)
        while not self.mkf_queue.empty():
            mkf = self.mkf_queue.get()
            self._map(mkf)
            self.loop_queue.put(mkf.id)
            while not self.loop_queue.empty():
                mid = self.loop_queue.get()
                if mid in self.map.mkfs:
                    self._close(self.map.mkfs[mid])
            self._audit(index)
        return st

    # ------------------------------------------------------- pipelined

    def run_pipelined(self, records) -> None:
        """Tracking on the calling thread, mapping and loop closing on two workers."""
        errors: list[BaseException] = []

        def mapping_worker():
            try:
                while True:
                    mkf = self.mkf_queue.get()
                    if mkf is None:
                        break
                    self.mapping_idle.clear()
                    self._map(mkf)
                    self._audit(len(self.frames) - 1)
                    self.loop_queue.put(mkf.id)
                    if self.mkf_queue.empty():
                        self.mapping_idle.set()
            except BaseException as exc:     # surfaced on the tracking thread
                errors.append(exc)
            finally:
                self.mapping_idle.set()
                self.loop_queue.put(None)

        def loop_worker():
            try:
                while True:
                    mid = self.loop_queue.get()
                    if mid is None:
                        break
                    with self.map.lock:
                        mkf = self.map.mkfs.get(mid)
                    if mkf is not None and not errors:
                        self._close(mkf)
                        self._audit(len(self.frames) - 1)
            except BaseException as exc:
                errors.append(exc)

        workers = [threading.Thread(target=mapping_worker, name="mapping", daemon=True),
                   threading.Thread(target=loop_worker, name="loop-closing", daemon=True)]
        for w in workers:
            w.start()
        try:
            for index, record in enumerate(records):
                if errors:
                    break
                frame, st = self._track(index, record)
                if st.status == Status.OK and self.tracker.want_mkf(
                        frame, self.mapping_idle.is_set()):
                    mkf = self.tracker.make_mkf(frame)
                    self.frames[-1].inserted_mkf = mkf.id
                    self.mapping_idle.clear()
                    self.mkf_queue.put(mkf)
                # let the workers run between frames
                time.sleep(0)
        finally:
            self.mkf_queue.put(None)
            for w in workers:
                w.join()
        if errors:
            raise errors[0]

    # --------------------------------------------------------- outputs

    def frame_trajectory(self) -> tuple[np.ndarray, list[SE3Pose]]:
        """Tracked frame poses re-anchored on the final pose of their reference MKF."""
        ts, poses = [], []
        with self.map.lock:
            for f in self.frames:
                if f.rel is None:
                    continue
                base = self.map.mkf_pose(f.ref_mkf) if f.ref_mkf is not None else None
                if f.ref_mkf is not None and base is None:
                    continue
                pose = f.rel if base is None else base.compose(f.rel)
                ts.append(f.timestamp)
                poses.append(pose)
        return np.array(ts), poses

    def mkf_trajectory(self) -> tuple[np.ndarray, list[SE3Pose]]:
        with self.map.lock:
            mkfs = sorted(self.map.mkfs.values(), key=lambda m: m.timestamp)
            return np.array([m.timestamp for m in mkfs]), [m.pose for m in mkfs]

    def stats(self) -> dict:
        n = len(self.frames)
        tracked = sum(1 for f in self.frames if f.status == Status.OK)
        lost = sum(1 for f in self.frames if f.status == Status.LOST)
        return {
            "frames": n,
            "tracked_frames": tracked,
            "tracked_fraction": tracked / n if n else 0.0,
            "lost_frames": lost,
            "initialized_at": self.initialized_at,
            "mkfs": len(self.map.mkfs),
            "map_points": len(self.map.points),
            "loop_events": [ev.to_dict() for ev in self.loop_events],
            "median_timings_ms": {s: (float(np.median(v)) * 1e3 if v else None)
                                  for s, v in self.timings.items()},
            "audits": self.n_audits,
            "audit_violations": len(self.audit_violations),
        }


def step_sequential(state: SystemState, index: int, record) -> SystemState:
    """Advance a sequential session by one frame record."""
    state.step(index, record)
    return state


# ----------------------------------------------------------------- driver


def run_pipeline(mcs, records, cfg: SlamConfig | None = None, out_dir=None,
                 mode: str = "seq", vocabulary=None) -> SystemState:
    """Run the full system over ``records`` and optionally write the result files."""
    if mode not in ("seq", "pipelined"):
        raise ValueError(f"unknown mode {mode!r}")
    state = SystemState(mcs, cfg, vocabulary)
    if mode == "seq":
        for index, record in enumerate(records):
            state.step(index, record)
    else:
        state.run_pipelined(records)
    if out_dir is not None:
        write_outputs(state, out_dir, mode)
    return state


def write_outputs(state: SystemState, out_dir, mode: str = "seq") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(out / "trajectory.tum", *state.frame_trajectory())
    write_tum(out / "mkf_trajectory.tum", *state.mkf_trajectory())
    stats = dict(state.stats(), mode=mode, cameras=state.mcs.n_cameras,
                 loop_closing=bool(state.cfg.loop_closing))
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    with state.map.lock:
        snap = state.map.snapshot()
    (out / "map.json").write_text(json.dumps(snap, separators=(",", ":")) + "\n")
    with open(out / "frames.csv", "w") as fh:
        fh.write("index,timestamp,status,n_matches,inserted_mkf,tracking_ms\n")
        times = state.timings["tracking"]
        for k, f in enumerate(state.frames):
            mkf = "" if f.inserted_mkf is None else str(f.inserted_mkf)
            ms = f"{times[k] * 1e3:.3f}" if k < len(times) else ""
            fh.write(f"{f.index},{f.timestamp:.6f},{f.status.value},{f.n_matches},{mkf},{ms}\n")
