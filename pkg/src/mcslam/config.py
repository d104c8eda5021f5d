"""Flat key-value configuration carrying every pipeline threshold."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import yaml

from .errors import FormatError


@dataclass
class SlamConfig:
    fps: float = 25.0
    seed: int = 0
    # features and matching
    features_per_camera: int = 400
    scale_factor: float = 1.2
    n_levels: int = 8
    match_threshold: int = 50
    match_ratio: float = 0.8
    grid_cell_px: float = 32.0
    # robust optimization
    huber_sigma: float = 2.0
    huber_factor: float = 1.345
    pose_iterations: int = 10
    pose_rounds: int = 4
    ba_iterations: int = 20
    essential_graph_iterations: int = 50
    # initialization
    init_max_frames: int = 100
    init_min_inliers: int = 50
    init_min_parallax_deg: float = 1.0
    init_min_translation: float = 0.01
    init_frame_gap: int = 10
    essential_max_iterations: int = 1000
    essential_threshold_deg: float = 0.3
    ransac_confidence: float = 0.99
    # tracking
    search_radius_px: float = 15.0
    search_widen: float = 2.0
    local_search_radius_px: float = 5.0
    lost_min_matches: int = 20
    reloc_min_points: int = 15
    reloc_max_candidates: int = 5
    gp3p_max_iterations: int = 300
    gp3p_threshold_px: float = 4.0
    view_angle_deg: float = 50.0
    covis_min_weight: int = 15
    local_map_neighbors: int = 20
    # MKF decision
    mkf_min_frames_factor: float = 0.5
    mkf_reloc_frames_factor: float = 1.0
    mkf_min_tracked: int = 50
    mkf_max_overlap: float = 0.9
    # mapping
    cull_found_ratio: float = 0.25
    cull_min_mkfs: int = 3
    triangulation_neighbors: int = 5
    min_baseline_ratio: float = 0.01
    epipolar_threshold_deg: float = 0.3
    min_parallax_deg: float = 1.0
    reproj_threshold_px: float = 2.0
    fuse_radius_px: float = 3.0
    mkf_cull_redundancy: float = 0.9
    mkf_cull_observers: int = 3
    # loop closing
    loop_closing: bool = True
    loop_consistency: int = 3
    loop_min_inliers: int = 20
    sim3_threshold_px: float = 4.0
    sim3_iterations: int = 100
    essential_graph_min_weight: int = 100
    loop_min_mkf_gap: int = 10

    @property
    def huber_e(self) -> float:
        return self.huber_factor * self.huber_sigma

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict | None) -> "SlamConfig":
        d = dict(d or {})
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - set(names))
        if unknown:
            raise FormatError(f"unknown config keys: {', '.join(unknown)}")
        kw = {}
        for k, v in d.items():
            default = getattr(cls, k) if not isinstance(getattr(cls, k, None), property) else None
            try:
                if isinstance(default, bool):
                    kw[k] = _to_bool(v)
                else:
                    kw[k] = type(default)(v) if default is not None else v
            except (TypeError, ValueError):
                raise FormatError(f"config key {k}: cannot convert {v!r}") from None
        return cls(**kw)


def _to_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.strip().lower() in ("true", "yes", "on", "1", "false", "no", "off", "0"):
        return v.strip().lower() in ("true", "yes", "on", "1")
    if isinstance(v, int) and v in (0, 1):
        return bool(v)
    raise ValueError(v)


def load_config(path) -> SlamConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise FormatError(f"cannot open config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise FormatError(f"cannot parse config {path}: {exc}") from None
    if doc is not None and not isinstance(doc, dict):
        raise FormatError("config must be a flat mapping")
    return SlamConfig.from_dict(doc)


def save_config(cfg: SlamConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
