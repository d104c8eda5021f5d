"""Command-line entry points: ``sim`` (synthetic data) and ``slam`` (run and evaluate)."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import SlamConfig, load_config
from .errors import (CalibrationError, FormatError, InitializationFailed, NoPairs, SlamError,
                     TrajectoryTooShort, ZeroSpread)
from .evaluation import (align_sim3, associate, ate_errors, compute_ate, compute_rpe, read_tum,
                         rpe_errors, write_tum)
from .rig import load_calibration, rig_r1, save_calibration
from .sim import (NoiseSpec, generate_scene, generate_trajectory, iter_dataset, render_frame,
                  record_to_json, write_landmark_table)

LOG_ENV = "MCSLAM_LOG_LEVEL"

# exit code and category per error family; anything else is 1 / "internal"
EXIT_CODES = (
    ((FormatError, CalibrationError, OSError), 3, "input"),
    ((InitializationFailed,), 4, "initialization"),
    ((NoPairs, TrajectoryTooShort, ZeroSpread), 5, "evaluation"),
)


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _fail(exc: BaseException) -> int:
    code, category = 1, "internal"
    for types, c, cat in EXIT_CODES:
        if isinstance(exc, types):
            code, category = c, cat
            break
    msg = {"error": type(exc).__name__, "category": category, "message": str(exc)}
    print(json.dumps(msg), file=sys.stderr)
    return code


def _load_doc(path) -> dict:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise FormatError(f"cannot open {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise FormatError(f"cannot parse {path}: {exc}") from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a mapping")
    return doc


# ------------------------------------------------------------------- sim


def _generate(args) -> int:
    scene_spec = _load_doc(args.scene_spec)
    traj_spec = _load_doc(args.traj_spec)
    noise = NoiseSpec.from_dict(_load_doc(args.noise_spec))
    mcs = load_calibration(args.calib)
    try:
        scene = generate_scene(scene_spec)
        kind = traj_spec.get("kind")
        if kind is None:
            raise FormatError("trajectory spec needs 'kind'")
        params = traj_spec.get("params",
                               {k: v for k, v in traj_spec.items()
                                if k not in ("kind", "fps", "seed")})
        traj = generate_trajectory(kind, params, float(traj_spec.get("fps", 25.0)),
                                   int(traj_spec.get("seed", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid spec: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_obs = 0
    with open(out / "dataset.jsonl", "w") as data, open(out / "landmark_ids.jsonl", "w") as ids:
        for i, (t, pose) in enumerate(zip(traj.timestamps, traj.poses)):
            rec = render_frame(scene, pose, mcs, noise, np.random.default_rng([noise.seed, i]), t)
            data.write(record_to_json(rec) + "\n")
            ids.write(json.dumps([c.tolist() for c in rec.landmark_ids],
                                 separators=(",", ":")) + "\n")
            n_obs += rec.n_keypoints()
    write_tum(out / "groundtruth.tum", traj.timestamps, traj.poses)
    write_landmark_table(scene, out / "landmarks.txt")
    save_calibration(mcs, out / "calibration.yaml")
    summary = {"frames": len(traj), "landmarks": int(scene.landmarks.shape[0]),
               "observations": n_obs, "out": str(out)}
    print(json.dumps(summary))
    return 0


def _calib(args) -> int:
    mcs = rig_r1().subset(args.cameras)
    save_calibration(mcs, args.out)
    print(json.dumps({"cameras": mcs.n_cameras, "out": args.out}))
    return 0


def sim_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sim", description="Synthetic multi-camera observations")
    sub = ap.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", help="render a dataset from scene/trajectory/noise specs")
    g.add_argument("--scene-spec", required=True)
    g.add_argument("--traj-spec", required=True)
    g.add_argument("--calib", required=True)
    g.add_argument("--noise-spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_generate)
    c = sub.add_parser("calib", help="write the built-in three-camera rig calibration")
    c.add_argument("--cameras", type=int, default=3, choices=(1, 2, 3))
    c.add_argument("--out", required=True)
    c.set_defaults(func=_calib)
    return ap


def sim_main(argv=None) -> int:
    _setup_logging()
    args = sim_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SlamError, OSError) as exc:
        return _fail(exc)


# ------------------------------------------------------------------ slam


def _run(args) -> int:
    from .system import run_pipeline   # heavy import only for runs

    mcs = load_calibration(args.calib)
    if args.cameras is not None:
        if not 1 <= args.cameras <= mcs.n_cameras:
            raise CalibrationError(f"--cameras must be in 1..{mcs.n_cameras}")
        mcs = mcs.subset(args.cameras)
    cfg = load_config(args.config) if args.config else SlamConfig()
    if args.no_loop_closing:
        cfg.loop_closing = False
    if args.seed is not None:
        cfg.seed = args.seed
    if not Path(args.dataset).is_file():
        raise FormatError(f"dataset {args.dataset} not found")

    def records():
        try:
            yield from iter_dataset(args.dataset)
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise FormatError(f"malformed dataset record: {exc}") from None

    state = run_pipeline(mcs, records(), cfg, args.out_dir, args.mode)
    s = state.stats()
    print(json.dumps({"frames": s["frames"], "tracked_fraction": s["tracked_fraction"],
                      "mkfs": s["mkfs"], "map_points": s["map_points"],
                      "loop_events": len(s["loop_events"]), "out_dir": args.out_dir}))
    return 0


def _write_csv(path, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")


def _eval_ate(args) -> int:
    pairs = associate(read_tum(args.gt), read_tum(args.est), args.max_dt)
    S = None if args.no_align else align_sim3(pairs)
    ate = compute_ate(pairs, S)
    out = {"pairs": len(pairs), "ate": ate, "aligned": S is not None}
    if S is not None:
        out["scale"] = S.scale
    if args.csv:
        e = ate_errors(pairs, S)
        _write_csv(args.csv, "timestamp,error",
                   ((f"{t:.6f}", f"{v:.9f}") for t, v in zip(pairs.timestamps, e)))
    print(json.dumps(out))
    return 0


def _eval_rpe(args) -> int:
    pairs = associate(read_tum(args.gt), read_tum(args.est), args.max_dt)
    rpe = compute_rpe(pairs, args.delta, args.mode)
    if args.csv:
        e = rpe_errors(pairs, args.delta, args.mode)
        _write_csv(args.csv, "timestamp,error",
                   ((f"{t:.6f}", f"{v:.9f}") for t, v in zip(pairs.timestamps, e)))
    print(json.dumps({"pairs": len(pairs), "delta": args.delta, "mode": args.mode,
                      "rpe": rpe, "unit": "m" if args.mode == "trans" else "deg"}))
    return 0


def slam_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slam", description="Multi-camera SLAM on recorded data")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run tracking, mapping and loop closing")
    r.add_argument("--calib", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--config")
    r.add_argument("--out-dir", required=True)
    r.add_argument("--mode", choices=("seq", "pipelined"), default="seq")
    r.add_argument("--cameras", type=int)
    r.add_argument("--no-loop-closing", action="store_true")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=_run)
    ev = sub.add_parser("eval", help="trajectory metrics")
    esub = ev.add_subparsers(dest="metric", required=True)
    a = esub.add_parser("ate", help="absolute trajectory error")
    a.add_argument("--gt", required=True)
    a.add_argument("--est", required=True)
    a.add_argument("--no-align", action="store_true")
    a.add_argument("--max-dt", type=float, default=0.02)
    a.add_argument("--csv")
    a.set_defaults(func=_eval_ate)
    p = esub.add_parser("rpe", help="relative pose error")
    p.add_argument("--gt", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--delta", type=int, default=1)
    p.add_argument("--mode", choices=("trans", "rot"), default="trans")
    p.add_argument("--max-dt", type=float, default=0.02)
    p.add_argument("--csv")
    p.set_defaults(func=_eval_rpe)
    return ap


def slam_main(argv=None) -> int:
    _setup_logging()
    args = slam_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SlamError, OSError) as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(slam_main())
