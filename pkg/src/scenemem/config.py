"""Engine configuration: association thresholds, geometry and spatial
parameters, plus the plain ``key = value`` config-file format the CLI
accepts. Every tunable the engine consults lives here."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

DEFAULT_ROOM_CLASSES = (
    "kitchen", "bathroom", "bedroom", "living room",
    "hallway", "office", "dining room", "unknown",
)


@dataclass
class AssociationConfig:
    """Thresholds for the three-way detection-to-track vote.

    A detection casts one vote per indicator: visual cosine above
    ``visual_sim_threshold``, caption cosine above ``caption_sim_threshold``
    and point overlap fraction above ``overlap_threshold`` (all strict).
    ``min_votes`` accepted votes merge the detection into the track.
    """

    visual_sim_threshold: float = 0.7
    caption_sim_threshold: float = 0.8
    overlap_threshold: float = 0.4
    overlap_radius_m: float = 0.05
    min_votes: int = 2
    ema_weight: float = 0.5

    def __post_init__(self):
        for name in ("visual_sim_threshold", "caption_sim_threshold", "overlap_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if not 0.0 < self.ema_weight <= 1.0:
            raise ValueError("ema_weight must be in (0, 1]")
        if self.min_votes not in (1, 2, 3):
            raise ValueError("min_votes must be 1, 2 or 3")
        if self.overlap_radius_m <= 0:
            raise ValueError("overlap_radius_m must be positive")


@dataclass
class GeometryConfig:
    voxel_size_m: float = 0.02
    cluster_eps_m: float = 0.5
    cluster_min_points: int = 5


@dataclass
class SpatialConfig:
    height_bin_m: float = 0.1
    floor_separation_m: float = 1.5
    room_peak_separation_m: float = 1.0
    room_seed_min_dist_m: float = 0.45
    min_room_area_m2: float = 1.0
    fill_unknown_iterations: int = 3
    grid_cell_m: float = 0.1
    wall_height_m: float = 1.5
    yaw_threshold_deg: float = 10.0
    forward_threshold_m: float = 0.1
    vertical_threshold_m: float = 0.3
    room_classes: tuple[str, ...] = DEFAULT_ROOM_CLASSES


@dataclass
class EngineConfig:
    """Top-level knob collection passed through the construction pipeline,
    the patch APIs and the reasoning loop."""

    association: AssociationConfig = field(default_factory=AssociationConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    spatial: SpatialConfig = field(default_factory=SpatialConfig)
    caption_consolidation_threshold: int = 5
    edge_discovery_period: int = 3
    initial_frames: int = 5          # n_img
    max_api_calls: int = 20          # m
    frame_stride: int = 5            # k
    api_mode: str = "frame"          # frame | node | image
    embedding_dim: int = 64
    structure_pixel_stride: int = 3
    structure_voxel_m: float = 0.05
    frame_failure_abort_fraction: float = 0.5

    def __post_init__(self):
        if self.api_mode not in ("frame", "node", "image"):
            raise ValueError("api_mode must be frame, node or image")
        if self.initial_frames < 1:
            raise ValueError("initial_frames must be >= 1")
        if self.max_api_calls < 0:
            raise ValueError("max_api_calls must be >= 0")
        if self.frame_stride < 1:
            raise ValueError("frame_stride must be >= 1")


_SECTIONS = {
    "association": AssociationConfig,
    "geometry": GeometryConfig,
    "spatial": SpatialConfig,
}


def _coerce(value: str, typ):
    if typ is float:
        return float(value)
    if typ is int:
        return int(value)
    if typ is str:
        return value
    # tuple of strings (room_classes): comma separated
    return tuple(part.strip() for part in value.split(",") if part.strip())


def load_config(path: str | Path) -> EngineConfig:
    """Parse a plain ``key = value`` config file.

    Blank lines and ``#`` comments are ignored. Keys are either top-level
    EngineConfig fields or ``section.field`` for the association, geometry
    and spatial sub-configs. Unknown keys raise ValueError.
    """
    cfg = EngineConfig()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." in key:
            section, fname = key.split(".", 1)
            if section not in _SECTIONS:
                raise ValueError(f"{path}:{lineno}: unknown section '{section}'")
            target = getattr(cfg, section)
        else:
            section, fname, target = None, key, cfg
        fields = {f.name: f for f in dataclasses.fields(target)}
        if fname not in fields:
            raise ValueError(f"{path}:{lineno}: unknown key '{key}'")
        current = getattr(target, fname)
        typ = type(current) if not isinstance(current, tuple) else tuple
        setattr(target, fname, _coerce(value, typ))
    # re-run validation
    AssociationConfig.__post_init__(cfg.association)
    EngineConfig.__post_init__(cfg)
    return cfg


def dump_config(cfg: EngineConfig) -> str:
    """Render a config back to the key-value format (round-trips load_config)."""
    lines: list[str] = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                v = getattr(value, sub.name)
                if isinstance(v, tuple):
                    v = ", ".join(v)
                lines.append(f"{f.name}.{sub.name} = {v}")
        else:
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
