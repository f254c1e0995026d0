"""Synthetic articulated-figure dataset with exact pose, parsing, and flow annotations.

A figure is a stack of textured 2-D primitives (capsules and disks) driven by a
25-joint skeleton. Because every primitive moves by a similarity transform between
frames, ground-truth optical flow is available in closed form, and the topmost-
primitive buffer gives exact parsing labels and occlusion tests.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import config as C
from .geometry import FlowField, PoseSample, segment_distance


class DegenerateFrameError(RuntimeError):
    """Raised when the figure is entirely outside the frame."""


# parts that receive a texture descriptor
TEXTURED_PARTS = ("top", "bottom", "shoes", "limbs")

_ANGLE_KEYS = (
    "torso", "head",
    "r_upper_arm", "r_forearm", "l_upper_arm", "l_forearm",
    "r_thigh", "r_calf", "l_thigh", "l_calf",
    "r_foot", "l_foot",
)


@dataclass
class GenConfig:
    """Sampling bounds for actors and motions. Lengths are fractions of frame height."""

    torso_len: tuple[float, float] = (0.20, 0.25)
    neck_len: tuple[float, float] = (0.040, 0.055)
    head_radius: tuple[float, float] = (0.068, 0.085)
    shoulder_halfw: tuple[float, float] = (0.075, 0.095)
    hip_halfw: tuple[float, float] = (0.048, 0.062)
    upper_arm_len: tuple[float, float] = (0.11, 0.14)
    forearm_len: tuple[float, float] = (0.10, 0.13)
    thigh_len: tuple[float, float] = (0.145, 0.175)
    calf_len: tuple[float, float] = (0.13, 0.16)
    foot_len: tuple[float, float] = (0.055, 0.075)
    torso_halfw: tuple[float, float] = (0.068, 0.090)
    limb_width: tuple[float, float] = (0.028, 0.040)
    thigh_width: tuple[float, float] = (0.034, 0.048)
    foot_width: tuple[float, float] = (0.024, 0.034)
    texture_period: tuple[float, float] = (6.0, 11.0)   # in actor units (px at unit scale)
    solid_prob: float = 0.55
    stripe_prob: float = 0.25
    # motion bounds (radians / fractions of height per frame where noted)
    arm_amp: tuple[float, float] = (0.25, 0.70)
    forearm_amp: tuple[float, float] = (0.20, 0.55)
    thigh_amp: tuple[float, float] = (0.15, 0.40)
    calf_amp: tuple[float, float] = (0.10, 0.30)
    torso_amp: tuple[float, float] = (0.04, 0.12)
    head_amp: tuple[float, float] = (0.08, 0.25)
    foot_amp: tuple[float, float] = (0.05, 0.20)
    translation_amp: tuple[float, float] = (0.02, 0.08)  # fraction of height
    translation_amp_y: tuple[float, float] = (0.005, 0.04)
    scale_amp: tuple[float, float] = (0.03, 0.10)
    max_angle_step: float = 0.35


@dataclass
class TextureSpec:
    kind: str                 # "solid" | "stripe" | "checker"
    color_a: np.ndarray       # (3,) in [0, 1]
    color_b: np.ndarray
    period: float

    def __post_init__(self):
        self.color_a = np.asarray(self.color_a, dtype=np.float64)
        self.color_b = np.asarray(self.color_b, dtype=np.float64)
        if self.kind not in ("solid", "stripe", "checker"):
            raise ValueError(f"unknown texture kind {self.kind!r}")
        if self.period <= 0:
            raise ValueError("texture period must be positive")


@dataclass
class ActorSpec:
    """Body proportions (pixels at unit scale) and per-part appearance."""

    seed: int
    torso_len: float
    neck_len: float
    head_radius: float
    shoulder_halfw: float
    hip_halfw: float
    upper_arm_len: float
    forearm_len: float
    thigh_len: float
    calf_len: float
    foot_len: float
    torso_halfw: float
    limb_width: float
    thigh_width: float
    foot_width: float
    textures: dict[str, TextureSpec]
    hair_color: np.ndarray
    face_color: np.ndarray
    eye_color: np.ndarray
    mouth_color: np.ndarray

    def __post_init__(self):
        for name in ("torso_len", "neck_len", "head_radius", "shoulder_halfw", "hip_halfw",
                     "upper_arm_len", "forearm_len", "thigh_len", "calf_len", "foot_len",
                     "torso_halfw", "limb_width", "thigh_width", "foot_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("hair_color", "face_color", "eye_color", "mouth_color"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    def fingerprint(self) -> str:
        blob = json.dumps(_spec_to_jsonable(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()


@dataclass
class MotionSpec:
    """Joint-angle, translation, and scale trajectories over a sequence."""

    joint_angles: dict[str, np.ndarray]   # each (N,)
    translation: np.ndarray               # (N, 2) pixels
    scale: np.ndarray                     # (N,)
    n_frames: int

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if set(self.joint_angles) != set(_ANGLE_KEYS):
            raise ValueError(f"joint_angles must have keys {_ANGLE_KEYS}")
        for k, v in self.joint_angles.items():
            self.joint_angles[k] = np.asarray(v, dtype=np.float64)
            if self.joint_angles[k].shape != (self.n_frames,):
                raise ValueError(f"angle track {k!r} must be ({self.n_frames},)")
        if self.translation.shape != (self.n_frames, 2):
            raise ValueError("translation must be (N, 2)")
        if self.scale.shape != (self.n_frames,):
            raise ValueError("scale must be (N,)")
        if np.any(self.scale <= 0):
            raise ValueError("scale must stay positive")

    def max_step(self) -> float:
        if self.n_frames < 2:
            return 0.0
        return max(float(np.abs(np.diff(v)).max()) for v in self.joint_angles.values())

    def angles_at(self, t: int) -> dict[str, float]:
        return {k: float(v[t]) for k, v in self.joint_angles.items()}


def _spec_to_jsonable(actor: ActorSpec) -> dict:
    d = asdict(actor)
    for k, v in list(d.items()):
        if isinstance(v, np.ndarray):
            d[k] = [round(float(x), 9) for x in v]
    for name, tex in d["textures"].items():
        tex["color_a"] = [round(float(x), 9) for x in tex["color_a"]]
        tex["color_b"] = [round(float(x), 9) for x in tex["color_b"]]
        tex["period"] = round(float(tex["period"]), 9)
    return d


# ---------------------------------------------------------------------------
# sampling

def _uniform(rng: np.random.Generator, bound: tuple[float, float]) -> float:
    return float(rng.uniform(bound[0], bound[1]))


def _sample_color(rng: np.random.Generator, lo=0.1, hi=0.95) -> np.ndarray:
    return rng.uniform(lo, hi, size=3)


def _sample_texture(rng: np.random.Generator, cfg: GenConfig, solid_bias: float = 0.0) -> TextureSpec:
    p_solid = min(1.0, cfg.solid_prob + solid_bias)
    r = rng.uniform()
    if r < p_solid:
        kind = "solid"
    elif r < p_solid + cfg.stripe_prob:
        kind = "stripe"
    else:
        kind = "checker"
    ca = _sample_color(rng)
    cb = _sample_color(rng)
    # keep the two texture colors distinguishable
    for _ in range(8):
        if np.abs(ca - cb).sum() >= 0.6:
            break
        cb = _sample_color(rng)
    return TextureSpec(kind=kind, color_a=ca, color_b=cb,
                       period=_uniform(rng, cfg.texture_period))


def make_actor(seed: int, config: GenConfig | None = None, height: int = 64) -> ActorSpec:
    """Sample body proportions and textures; distinct seeds vary both."""
    cfg = config or GenConfig()
    rng = np.random.default_rng(seed)
    h = float(height)

    def px(bound):
        return _uniform(rng, bound) * h

    lengths = dict(
        torso_len=px(cfg.torso_len), neck_len=px(cfg.neck_len),
        head_radius=px(cfg.head_radius), shoulder_halfw=px(cfg.shoulder_halfw),
        hip_halfw=px(cfg.hip_halfw), upper_arm_len=px(cfg.upper_arm_len),
        forearm_len=px(cfg.forearm_len), thigh_len=px(cfg.thigh_len),
        calf_len=px(cfg.calf_len), foot_len=px(cfg.foot_len),
        torso_halfw=px(cfg.torso_halfw), limb_width=px(cfg.limb_width),
        thigh_width=px(cfg.thigh_width), foot_width=px(cfg.foot_width),
    )
    textures = {
        "top": _sample_texture(rng, cfg),
        "bottom": _sample_texture(rng, cfg),
        "shoes": _sample_texture(rng, cfg, solid_bias=0.25),
        "limbs": _sample_texture(rng, cfg, solid_bias=0.25),
    }
    return ActorSpec(
        seed=seed, textures=textures,
        hair_color=_sample_color(rng, 0.05, 0.9),
        face_color=rng.uniform([0.72, 0.55, 0.45], [0.92, 0.78, 0.68]),
        eye_color=rng.uniform(0.0, 0.25, size=3),
        mouth_color=rng.uniform([0.6, 0.05, 0.05], [0.95, 0.35, 0.35]),
        **lengths,
    )


def make_motion(seed: int, n_frames: int, config: GenConfig | None = None,
                height: int = 64) -> MotionSpec:
    """Sample smooth sinusoidal trajectories with a bounded per-frame angle step."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    cfg = config or GenConfig()
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames, dtype=np.float64)
    span = max(n_frames - 1, 1)

    def track(amp_bound, bias=0.0):
        a1 = _uniform(rng, amp_bound)
        f1 = rng.uniform(0.5, 1.6)
        f2 = rng.uniform(1.6, 2.8)
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
        v = bias + a1 * np.sin(2 * np.pi * f1 * t / span + p1) \
            + 0.3 * a1 * np.sin(2 * np.pi * f2 * t / span + p2)
        if n_frames > 1:
            step = np.abs(np.diff(v)).max()
            if step > cfg.max_angle_step:
                v = bias + (v - bias) * (cfg.max_angle_step / step) * 0.98
        return v

    angles = {
        "torso": track(cfg.torso_amp),
        "head": track(cfg.head_amp),
        "r_upper_arm": track(cfg.arm_amp, bias=-0.30),
        "r_forearm": track(cfg.forearm_amp, bias=-0.18),
        "l_upper_arm": track(cfg.arm_amp, bias=0.30),
        "l_forearm": track(cfg.forearm_amp, bias=0.18),
        "r_thigh": track(cfg.thigh_amp, bias=-0.08),
        "r_calf": track(cfg.calf_amp, bias=0.05),
        "l_thigh": track(cfg.thigh_amp, bias=0.08),
        "l_calf": track(cfg.calf_amp, bias=0.05),
        "r_foot": track(cfg.foot_amp),
        "l_foot": track(cfg.foot_amp),
    }
    h = float(height)
    ax = _uniform(rng, cfg.translation_amp) * h
    ay = _uniform(rng, cfg.translation_amp_y) * h
    fx, fy = rng.uniform(0.4, 1.5, size=2)
    px_, py_ = rng.uniform(0, 2 * np.pi, size=2)
    translation = np.stack([
        ax * np.sin(2 * np.pi * fx * t / span + px_),
        ay * np.sin(2 * np.pi * fy * t / span + py_),
    ], axis=1)
    a_s = _uniform(rng, cfg.scale_amp)
    fs = rng.uniform(0.4, 1.2)
    ps = rng.uniform(0, 2 * np.pi)
    scale = 1.0 + a_s * np.sin(2 * np.pi * fs * t / span + ps)
    return MotionSpec(joint_angles=angles, translation=translation,
                      scale=scale, n_frames=n_frames)


def static_motion(n_frames: int) -> MotionSpec:
    """All-zero trajectories; every rendered frame is identical."""
    angles = {k: np.zeros(n_frames) for k in _ANGLE_KEYS}
    return MotionSpec(joint_angles=angles, translation=np.zeros((n_frames, 2)),
                      scale=np.ones(n_frames), n_frames=n_frames)


# ---------------------------------------------------------------------------
# kinematics

def _down(theta: float) -> np.ndarray:
    return np.array([np.sin(theta), np.cos(theta)])


def _up(theta: float) -> np.ndarray:
    return np.array([np.sin(theta), -np.cos(theta)])


def _perp(u: np.ndarray) -> np.ndarray:
    return np.array([-u[1], u[0]])


@dataclass
class _Primitive:
    prim_id: int
    label: int
    kind: str              # "capsule" | "disk"
    a: np.ndarray          # endpoint / center (world px)
    b: np.ndarray          # other endpoint / orientation point
    radius: float          # world px
    scale: float           # world px per actor unit
    texture: TextureSpec
    cut: float | None = None  # disks: keep only local-t >= cut * radius

    def frame_axes(self) -> tuple[np.ndarray, np.ndarray]:
        axis = self.b - self.a
        norm = float(np.hypot(*axis))
        u = axis / norm if norm > 1e-9 else np.array([0.0, -1.0])
        return u, _perp(u)


def forward_kinematics(actor: ActorSpec, joint_pose: dict[str, float],
                       global_xform: tuple[np.ndarray, float],
                       size: tuple[int, int]) -> tuple[np.ndarray, list[_Primitive]]:
    """Joint positions (25, 2) and world-space primitives for one frame."""
    missing = set(_ANGLE_KEYS) - set(joint_pose)
    if missing:
        raise ValueError(f"joint_pose missing keys {sorted(missing)}")
    h, w = size
    translation, scale = np.asarray(global_xform[0], dtype=np.float64), float(global_xform[1])
    if scale <= 0:
        raise ValueError("global scale must be positive")
    ang = joint_pose

    j = np.zeros((len(C.JOINT_NAMES), 2))
    root = np.zeros(2)
    torso_u = _up(ang["torso"])
    torso_n = _perp(torso_u)
    neck = root + torso_u * actor.torso_len
    head_u = _up(ang["torso"] + ang["head"])
    head_c = neck + head_u * (actor.neck_len + actor.head_radius)
    head_n = _perp(head_u)
    r = actor.head_radius

    j[8] = root
    j[1] = neck
    j[0] = head_c - head_u * 0.15 * r                      # nose
    j[15] = head_c + head_u * 0.25 * r - head_n * 0.35 * r  # r_eye
    j[16] = head_c + head_u * 0.25 * r + head_n * 0.35 * r  # l_eye
    j[17] = head_c - head_n * 0.9 * r                       # r_ear
    j[18] = head_c + head_n * 0.9 * r                       # l_ear
    j[2] = neck - torso_n * actor.shoulder_halfw
    j[5] = neck + torso_n * actor.shoulder_halfw
    j[9] = root - torso_n * actor.hip_halfw
    j[12] = root + torso_n * actor.hip_halfw

    base = ang["torso"]
    j[3] = j[2] + _down(base + ang["r_upper_arm"]) * actor.upper_arm_len
    j[4] = j[3] + _down(base + ang["r_upper_arm"] + ang["r_forearm"]) * actor.forearm_len
    j[6] = j[5] + _down(base + ang["l_upper_arm"]) * actor.upper_arm_len
    j[7] = j[6] + _down(base + ang["l_upper_arm"] + ang["l_forearm"]) * actor.forearm_len

    r_calf_w = ang["r_thigh"] + ang["r_calf"]
    l_calf_w = ang["l_thigh"] + ang["l_calf"]
    j[10] = j[9] + _down(ang["r_thigh"]) * actor.thigh_len
    j[11] = j[10] + _down(r_calf_w) * actor.calf_len
    j[13] = j[12] + _down(ang["l_thigh"]) * actor.thigh_len
    j[14] = j[13] + _down(l_calf_w) * actor.calf_len

    r_foot_dir = _down(r_calf_w - 0.92 * np.pi / 2 + ang["r_foot"])
    l_foot_dir = _down(l_calf_w + 0.92 * np.pi / 2 + ang["l_foot"])
    j[22] = j[11] + r_foot_dir * actor.foot_len             # r_big_toe
    j[24] = j[11] - r_foot_dir * 0.25 * actor.foot_len      # r_heel
    j[23] = j[22] - r_foot_dir * 0.18 * actor.foot_len + _perp(r_foot_dir) * 0.1 * actor.foot_len
    j[19] = j[14] + l_foot_dir * actor.foot_len             # l_big_toe
    j[21] = j[14] - l_foot_dir * 0.25 * actor.foot_len      # l_heel
    j[20] = j[19] - l_foot_dir * 0.18 * actor.foot_len - _perp(l_foot_dir) * 0.1 * actor.foot_len

    origin = np.array([w / 2.0, 0.58 * h])
    world = j * scale + origin + translation

    def wp(p):
        return p * scale + origin + translation

    tex = actor.textures
    solid = lambda color: TextureSpec("solid", color, color, 1.0)
    prims: list[_Primitive] = []
    pid = 0

    def add(label, kind, a, b, radius, texture, cut=None):
        nonlocal pid
        prims.append(_Primitive(pid, label, kind, np.asarray(a, dtype=np.float64),
                                np.asarray(b, dtype=np.float64), radius * scale,
                                scale, texture, cut))
        pid += 1

    # draw order: limbs, bottom, top, shoes, head
    add(15, "capsule", world[2], world[3], actor.limb_width, tex["limbs"])
    add(15, "capsule", world[3], world[4], actor.limb_width * 0.9, tex["limbs"])
    add(14, "capsule", world[5], world[6], actor.limb_width, tex["limbs"])
    add(14, "capsule", world[6], world[7], actor.limb_width * 0.9, tex["limbs"])
    add(13, "capsule", world[10], world[11], actor.limb_width, tex["limbs"])
    add(12, "capsule", world[13], world[14], actor.limb_width, tex["limbs"])
    add(5, "capsule", world[9], world[12], actor.thigh_width * 1.15, tex["bottom"])
    add(6, "capsule", world[9], world[10], actor.thigh_width, tex["bottom"])
    add(6, "capsule", world[12], world[13], actor.thigh_width, tex["bottom"])
    add(4, "capsule", world[1], world[8], actor.torso_halfw, tex["top"])
    add(10, "capsule", world[11], world[22], actor.foot_width, tex["shoes"])
    add(9, "capsule", world[14], world[19], actor.foot_width, tex["shoes"])

    head_c_w = wp(head_c)
    head_b_w = head_c_w + head_u * r * scale
    add(11, "disk", head_c_w, head_b_w, r, solid(actor.face_color))
    add(2, "disk", head_c_w, head_b_w, r, solid(actor.hair_color), cut=0.45)
    add(11, "disk", world[15], world[15] + head_u * 0.1, 0.16 * r, solid(actor.eye_color))
    add(11, "disk", world[16], world[16] + head_u * 0.1, 0.16 * r, solid(actor.eye_color))
    mouth_c = wp(head_c - head_u * 0.5 * r)
    add(11, "disk", mouth_c, mouth_c + head_u * 0.1, 0.2 * r, solid(actor.mouth_color))

    return world, prims


# ---------------------------------------------------------------------------
# rasterization

def _coverage(prim: _Primitive, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    if prim.kind == "capsule":
        return segment_distance(gx, gy, prim.a, prim.b) <= prim.radius
    dx = gx - prim.a[0]
    dy = gy - prim.a[1]
    hit = np.hypot(dx, dy) <= prim.radius
    if prim.cut is not None:
        u, _ = prim.frame_axes()
        hit &= (dx * u[0] + dy * u[1]) >= prim.cut * prim.radius
    return hit


def _texture_values(prim: _Primitive, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Colors (n, 3) in [0, 1]; coordinates are actor-local so textures move rigidly."""
    tex = prim.texture
    if tex.kind == "solid":
        return np.tile(tex.color_a, (xs.shape[0], 1))
    u, n = prim.frame_axes()
    dx = xs - prim.a[0]
    dy = ys - prim.a[1]
    t = (dx * u[0] + dy * u[1]) / prim.scale
    v = (dx * n[0] + dy * n[1]) / prim.scale
    if tex.kind == "stripe":
        m = 0.5 + 0.5 * np.sin(2 * np.pi * t / tex.period)
    else:
        m = 0.5 + 0.5 * np.sin(2 * np.pi * t / tex.period) * np.sin(2 * np.pi * v / tex.period)
    return tex.color_a[None, :] * (1.0 - m[:, None]) + tex.color_b[None, :] * m[:, None]


@dataclass
class RenderGeometry:
    """Per-frame correspondence data kept off the serialized path."""

    prims: list[_Primitive]
    prim_ids: np.ndarray     # (H, W) int32, -1 for background
    fingerprint: str
    size: tuple[int, int]


@dataclass
class PairedFrame:
    """One rendered frame with its exact annotations."""

    frame: torch.Tensor                 # (3, H, W) in [-1, 1]
    pose: PoseSample
    parsing: torch.Tensor               # (18, H, W) one-hot
    fg_mask: torch.Tensor               # (H, W) 0/1
    background: torch.Tensor            # (3, H, W)
    flow_to_next: FlowField | None = None
    flow_to_prev: FlowField | None = None
    geometry: RenderGeometry | None = field(default=None, repr=False, compare=False)


def make_background(seed: int, size: tuple[int, int]) -> torch.Tensor:
    """Deterministic muted plate: vertical gradient plus two soft blobs."""
    h, w = size
    rng = np.random.default_rng(((seed & 0xFFFFFFFF) * 2654435761 + 17) % (2 ** 63))
    top = rng.uniform(0.15, 0.65, size=3)
    bot = rng.uniform(0.15, 0.65, size=3)
    yy = np.linspace(0.0, 1.0, h).reshape(1, h, 1)
    img = np.broadcast_to(top.reshape(3, 1, 1) * (1 - yy) + bot.reshape(3, 1, 1) * yy,
                          (3, h, w)).copy()
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(2):
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        sig = rng.uniform(0.15, 0.4) * h
        amp = rng.uniform(-0.08, 0.08, size=3)
        blob = np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * sig * sig))
        img = img + amp[:, None, None] * blob[None]
    img = np.clip(img, 0.0, 1.0) * 2.0 - 1.0
    return torch.from_numpy(img.astype(np.float32))


def render_frame(actor: ActorSpec, joint_pose: dict[str, float],
                 global_xform: tuple[np.ndarray, float], size: tuple[int, int],
                 background: torch.Tensor | None = None) -> PairedFrame:
    """Rasterize one frame; raises DegenerateFrameError if no primitive is visible."""
    h, w = size
    if h <= 0 or w <= 0:
        raise ValueError("size must be positive")
    joints, prims = forward_kinematics(actor, joint_pose, global_xform, size)
    bg = background if background is not None else make_background(actor.seed, size)
    if bg.shape != (3, h, w):
        raise ValueError("background size mismatch")

    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    color = bg.numpy().astype(np.float64).copy()
    labels = np.zeros((h, w), dtype=np.int64)
    prim_ids = np.full((h, w), -1, dtype=np.int32)
    for prim in prims:
        hit = _coverage(prim, gx, gy)
        if not hit.any():
            continue
        vals = _texture_values(prim, gx[hit], gy[hit]) * 2.0 - 1.0
        for c in range(3):
            color[c][hit] = vals[:, c]
        labels[hit] = prim.label
        prim_ids[hit] = prim.prim_id
    if not (prim_ids >= 0).any():
        raise DegenerateFrameError("figure is entirely outside the frame")

    visible = (joints[:, 0] >= 0) & (joints[:, 0] <= w - 1) \
        & (joints[:, 1] >= 0) & (joints[:, 1] <= h - 1)
    pose = PoseSample(keypoints=joints, visible=visible, image_size=(h, w))
    parsing = torch.from_numpy(
        np.eye(C.NUM_PARSING_LABELS, dtype=np.float32)[labels].transpose(2, 0, 1).copy())
    return PairedFrame(
        frame=torch.from_numpy(color.astype(np.float32)),
        pose=pose,
        parsing=parsing,
        fg_mask=torch.from_numpy((prim_ids >= 0).astype(np.float32)),
        background=bg,
        geometry=RenderGeometry(prims=prims, prim_ids=prim_ids,
                                fingerprint=actor.fingerprint(), size=(h, w)),
    )


# ---------------------------------------------------------------------------
# exact flow

def exact_flow(frame_a: PairedFrame, frame_b: PairedFrame) -> FlowField:
    """Backward flow from frame_a's grid into frame_b via primitive correspondences.

    A pixel gets weight 1 only when its corresponded point lies in bounds and all
    four bilinear neighbor pixels in frame_b are covered by the same primitive;
    occluded and silhouette pixels get zero flow and zero weight.
    """
    ga, gb = frame_a.geometry, frame_b.geometry
    if ga is None or gb is None:
        raise ValueError("frames lack render geometry; flow needs rendered frames")
    if ga.fingerprint != gb.fingerprint:
        raise ValueError("frames come from different actors")
    if ga.size != gb.size:
        raise ValueError("frames have different sizes")
    h, w = ga.size
    disp = np.zeros((2, h, w), dtype=np.float32)
    weight = np.zeros((h, w), dtype=np.float32)
    prims_b = {p.prim_id: p for p in gb.prims}
    ids_b = gb.prim_ids

    for prim in ga.prims:
        sel = ga.prim_ids == prim.prim_id
        if not sel.any():
            continue
        ys, xs = np.nonzero(sel)
        u, n = prim.frame_axes()
        dx = xs - prim.a[0]
        dy = ys - prim.a[1]
        t = (dx * u[0] + dy * u[1]) / prim.scale
        v = (dx * n[0] + dy * n[1]) / prim.scale
        pb = prims_b[prim.prim_id]
        ub, nb = pb.frame_axes()
        px = pb.a[0] + (ub[0] * t + nb[0] * v) * pb.scale
        py = pb.a[1] + (ub[1] * t + nb[1] * v) * pb.scale
        disp[0][sel] = (px - xs).astype(np.float32)
        disp[1][sel] = (py - ys).astype(np.float32)

        inb = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
        ok = inb.copy()
        if inb.any():
            x0 = np.floor(px[inb]).astype(np.int64)
            y0 = np.floor(py[inb]).astype(np.int64)
            x1 = np.minimum(x0 + 1, w - 1)
            y1 = np.minimum(y0 + 1, h - 1)
            same = np.ones(x0.shape, dtype=bool)
            for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
                same &= ids_b[yy, xx] == prim.prim_id
            ok[inb] = same
        weight[ys[ok], xs[ok]] = 1.0
        bad = ~ok
        disp[0][ys[bad], xs[bad]] = 0.0
        disp[1][ys[bad], xs[bad]] = 0.0

    return FlowField(displacement=torch.from_numpy(disp), weight=torch.from_numpy(weight))


def make_sequence(actor: ActorSpec, motion: MotionSpec,
                  size: tuple[int, int]) -> list[PairedFrame]:
    """Render a motion clip and attach exact forward/backward flow annotations."""
    if motion.n_frames < 3:
        raise ValueError("sequences need at least 3 frames")
    bg = make_background(actor.seed, size)
    frames = [
        render_frame(actor, motion.angles_at(t),
                     (motion.translation[t], float(motion.scale[t])), size, background=bg)
        for t in range(motion.n_frames)
    ]
    for t in range(motion.n_frames - 1):
        frames[t].flow_to_next = exact_flow(frames[t], frames[t + 1])
    for t in range(1, motion.n_frames):
        frames[t].flow_to_prev = exact_flow(frames[t], frames[t - 1])
    return frames
