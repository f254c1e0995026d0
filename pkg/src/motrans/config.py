"""Training configuration and the skeleton / parsing conventions shared across modules.

Config files are flat ``key = value`` text. Every key has a default below; unknown
keys and type mismatches are rejected so stale configs fail loudly.
"""

from __future__ import annotations

import colorsys
import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

CONFIG_VERSION = 1

# 25-keypoint skeleton, BODY_25 ordering.
JOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "mid_hip",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
    "l_big_toe", "l_small_toe", "l_heel",
    "r_big_toe", "r_small_toe", "r_heel",
)

DEFAULT_SKELETON_EDGES = (
    (1, 0), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10), (10, 11), (8, 12), (12, 13), (13, 14),
    (0, 15), (15, 17), (0, 16), (16, 18),
    (14, 19), (19, 20), (14, 21),
    (11, 22), (22, 23), (11, 24),
)

# Merged body-part classes, channel order fixed across the whole pipeline.
PART_NAMES = ("head", "top", "bottom", "shoes", "limbs", "background")
BACKGROUND_PART = 5
NUM_PARTS = 6
NUM_REGIONS = 5  # foreground parts only

# 18-label parsing vocabulary the synthetic renderer emits.
PARSING_LABEL_NAMES = (
    "background", "hat", "hair", "sunglasses", "upper_clothes", "skirt",
    "pants", "dress", "belt", "left_shoe", "right_shoe", "face",
    "left_leg", "right_leg", "left_arm", "right_arm", "bag", "scarf",
)
NUM_PARSING_LABELS = 18

# label index -> part index; belt and bag carry no garment region, they fall to background
DEFAULT_PARSING_MERGE = (5, 0, 0, 0, 1, 2, 2, 1, 5, 3, 3, 0, 4, 4, 4, 4, 5, 1)

POSE_REFERENCE_SIZE = (256, 192)  # (H, W) the stroke width is calibrated at


def edge_colors(n_edges: int) -> list[tuple[float, float, float]]:
    """Deterministic distinct RGB colors (in [0,1]) for skeleton edges."""
    out = []
    for i in range(n_edges):
        h = (i / max(n_edges, 1)) % 1.0
        out.append(colorsys.hsv_to_rgb(h, 0.9, 1.0))
    return out


def pose_stroke_width(height: int, width: int, base: float = 3.0) -> int:
    scale = min(height / POSE_REFERENCE_SIZE[0], width / POSE_REFERENCE_SIZE[1])
    return max(1, round(base * scale))


@dataclass
class TrainConfig:
    config_version: int = CONFIG_VERSION
    height: int = 64
    width: int = 48
    epochs_stage1: int = 10
    epochs_stage2: int = 10
    batch_size: int = 4
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_rec: float = 10.0
    lambda_per: float = 10.0
    lambda_flow: float = 10.0
    seed: int = 0
    train_dir: str = "data/train"
    test_dir: str = "data/test"
    base_width: int = 32
    disc_width: int = 32
    n_downsample: int = 2
    n_resblocks: int = 2
    disc_scales: int = 2
    disc_layers: int = 3
    face_size: int = 32
    face_min_area: int = 16
    perceptual_seed: int = 1234
    pose_stroke: float = 3.0
    layout_adversarial: bool = True
    wcn_flow_fusion: bool = True
    no_gam: bool = False
    no_tam: bool = False
    no_wcn: bool = False
    ablate_seeds: tuple[int, ...] = (0, 1, 2)
    skeleton_edges: tuple[tuple[int, int], ...] = DEFAULT_SKELETON_EDGES
    parsing_merge: tuple[int, ...] = DEFAULT_PARSING_MERGE

    def validate(self) -> None:
        if self.config_version != CONFIG_VERSION:
            raise ValueError(
                f"config_version {self.config_version} unsupported (expected {CONFIG_VERSION})")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("resolution must be positive")
        down = 2 ** self.n_downsample
        if self.height % down or self.width % down:
            raise ValueError(f"resolution must be divisible by {down}")
        disc_down = 2 ** self.disc_layers * 2 ** (self.disc_scales - 1)
        if self.height % disc_down or self.width % disc_down:
            raise ValueError(f"resolution must be divisible by {disc_down} for the discriminators")
        for name in ("epochs_stage1", "epochs_stage2", "batch_size", "base_width",
                     "disc_width", "n_resblocks", "disc_scales", "disc_layers", "face_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_downsample < 1:
            raise ValueError("n_downsample must be >= 1")
        for name in ("learning_rate", "lambda_rec", "lambda_per", "lambda_flow"):
            if getattr(self, name) < 0 or not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite and non-negative")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")
        if len(self.parsing_merge) != NUM_PARSING_LABELS:
            raise ValueError(f"parsing_merge needs {NUM_PARSING_LABELS} entries")
        if any(not (0 <= p < NUM_PARTS) for p in self.parsing_merge):
            raise ValueError("parsing_merge entries must be valid part indices")
        for a, b in self.skeleton_edges:
            if not (0 <= a < len(JOINT_NAMES) and 0 <= b < len(JOINT_NAMES)):
                raise ValueError(f"skeleton edge ({a},{b}) out of joint range")
        if not self.ablate_seeds:
            raise ValueError("ablate_seeds must not be empty")


def _encode(name: str, value) -> str:
    if name == "skeleton_edges":
        return ",".join(f"{a}-{b}" for a, b in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _decode(name: str, text: str, py_type):
    text = text.strip()
    if name == "skeleton_edges":
        edges = []
        for item in text.split(","):
            a, _, b = item.partition("-")
            edges.append((int(a), int(b)))
        return tuple(edges)
    if name in ("parsing_merge", "ablate_seeds"):
        return tuple(int(v) for v in text.split(",") if v.strip() != "")
    if py_type is bool:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean for {name}: {text!r}")
    if py_type is int:
        return int(text)
    if py_type is float:
        return float(text)
    return text


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_PY_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def parse_config(text: str) -> TrainConfig:
    """Parse flat key=value config text; '#' starts a comment, blank lines ignored."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate config key {key!r}")
        py_type = _PY_TYPES.get(str(_FIELD_TYPES[key]).split("[")[0].strip(), str)
        values[key] = _decode(key, val, py_type)
    cfg = TrainConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: TrainConfig) -> str:
    lines = [f"{f.name} = {_encode(f.name, getattr(cfg, f.name))}"
             for f in dataclasses.fields(TrainConfig)]
    return "\n".join(lines) + "\n"


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    cfg.validate()
    Path(path).write_text(format_config(cfg))
