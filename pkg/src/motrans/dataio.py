"""On-disk dataset layout and the binary flow format.

A sequence directory holds:
    frame_%04d.png      rendered frames (8-bit RGB)
    pose_%04d.json      25 keypoints as [x, y, visible]
    parsing_%04d.png    18-class label map (8-bit, one label per pixel)
    flow_%04d.bin       backward flow t -> t+1 (indices 0 .. N-2)
    flow_prev_%04d.bin  backward flow t -> t-1 (indices 1 .. N-1)
    background.png      clean plate
    meta.json           seed, size, frame count, actor fingerprint

Flow files: magic "RMTF", u32 height, u32 width, then float32 little-endian
displacement (2, H, W) followed by the weight map (H, W).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .geometry import FlowField, PoseSample
from .synthdata import (GenConfig, PairedFrame, make_actor, make_motion,
                        make_sequence)

FLOW_MAGIC = b"RMTF"


class DatasetError(RuntimeError):
    """Raised for missing or malformed dataset files."""


# ---------------------------------------------------------------------------
# flow binary format

def save_flow(flow: FlowField, path: str | Path) -> None:
    disp = flow.displacement.detach().cpu().numpy().astype("<f4")
    _, h, w = disp.shape
    weight = flow.weight.detach().cpu().numpy().astype("<f4") if flow.weight is not None \
        else np.ones((h, w), dtype="<f4")
    with open(path, "wb") as f:
        f.write(FLOW_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(disp.tobytes())
        f.write(weight.tobytes())


def load_flow(path: str | Path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FLOW_MAGIC:
        raise DatasetError(f"{path}: not a flow file")
    h, w = struct.unpack("<II", data[4:12])
    expected = 12 + 3 * h * w * 4
    if len(data) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", offset=12)
    disp = flat[:2 * h * w].reshape(2, h, w).copy()
    weight = flat[2 * h * w:].reshape(h, w).copy()
    return FlowField(displacement=torch.from_numpy(disp), weight=torch.from_numpy(weight))


# ---------------------------------------------------------------------------
# image / pose round trips

def save_image(image: torch.Tensor, path: str | Path) -> None:
    """Write a (3, H, W) [-1, 1] tensor as 8-bit RGB."""
    arr = ((image.detach().cpu().numpy() + 1.0) * 127.5)
    arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1) / 127.5 - 1.0)


def save_label_map(labels: torch.Tensor, path: str | Path) -> None:
    Image.fromarray(labels.detach().cpu().numpy().astype(np.uint8), mode="L").save(path)


def load_parsing(path: str | Path, num_labels: int = 18) -> torch.Tensor:
    with Image.open(path) as im:
        labels = np.asarray(im.convert("L"), dtype=np.int64)
    if labels.max() >= num_labels:
        raise DatasetError(f"{path}: label {labels.max()} out of range")
    return torch.from_numpy(
        np.eye(num_labels, dtype=np.float32)[labels].transpose(2, 0, 1).copy())


def save_pose(pose: PoseSample, path: str | Path) -> None:
    rows = [[float(x), float(y), int(v)]
            for (x, y), v in zip(pose.keypoints, pose.visible)]
    Path(path).write_text(json.dumps({
        "image_size": list(pose.image_size), "keypoints": rows}, indent=0))


def load_pose(path: str | Path) -> PoseSample:
    try:
        obj = json.loads(Path(path).read_text())
        rows = np.asarray(obj["keypoints"], dtype=np.float64)
        size = tuple(obj["image_size"])
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DatasetError(f"{path}: bad pose file ({exc})") from exc
    if rows.shape != (25, 3):
        raise DatasetError(f"{path}: pose must have 25 keypoints")
    return PoseSample(keypoints=rows[:, :2], visible=rows[:, 2] > 0.5,
                      image_size=(int(size[0]), int(size[1])))


# ---------------------------------------------------------------------------
# sequences

def save_sequence(frames: list[PairedFrame], out_dir: str | Path,
                  seed: int | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(frames)
    for t, fr in enumerate(frames):
        save_image(fr.frame, out / f"frame_{t:04d}.png")
        save_pose(fr.pose, out / f"pose_{t:04d}.json")
        save_label_map(fr.parsing.argmax(dim=0), out / f"parsing_{t:04d}.png")
        if fr.flow_to_next is not None:
            save_flow(fr.flow_to_next, out / f"flow_{t:04d}.bin")
        if fr.flow_to_prev is not None:
            save_flow(fr.flow_to_prev, out / f"flow_prev_{t:04d}.bin")
    save_image(frames[0].background, out / "background.png")
    h, w = frames[0].pose.image_size
    meta = {
        "n_frames": n,
        "size": [h, w],
        "seed": seed,
        "fingerprint": frames[0].geometry.fingerprint if frames[0].geometry else None,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2))


@dataclass
class LoadedSequence:
    """A sequence read back from disk; tensors are stacked over time."""

    frames: torch.Tensor                  # (N, 3, H, W)
    parsings: torch.Tensor                # (N, 18, H, W)
    poses: list[PoseSample]
    background: torch.Tensor              # (3, H, W)
    flows_next: list[FlowField]           # length N-1
    flows_prev: list[FlowField | None]    # length N, index 0 is None
    name: str
    meta: dict

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def load_sequence(seq_dir: str | Path) -> LoadedSequence:
    d = Path(seq_dir)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"{d}: missing meta.json")
    meta = json.loads(meta_path.read_text())
    n = int(meta["n_frames"])
    if n < 1:
        raise DatasetError(f"{d}: empty sequence")
    frames, parsings, poses = [], [], []
    for t in range(n):
        fp, pp, sp = d / f"frame_{t:04d}.png", d / f"parsing_{t:04d}.png", d / f"pose_{t:04d}.json"
        for p in (fp, pp, sp):
            if not p.exists():
                raise DatasetError(f"{d}: missing {p.name}")
        frames.append(load_image(fp))
        parsings.append(load_parsing(pp))
        poses.append(load_pose(sp))
    flows_next = []
    for t in range(n - 1):
        p = d / f"flow_{t:04d}.bin"
        if not p.exists():
            raise DatasetError(f"{d}: missing {p.name}")
        flows_next.append(load_flow(p))
    flows_prev: list[FlowField | None] = [None]
    for t in range(1, n):
        p = d / f"flow_prev_{t:04d}.bin"
        flows_prev.append(load_flow(p) if p.exists() else None)
    bg_path = d / "background.png"
    if not bg_path.exists():
        raise DatasetError(f"{d}: missing background.png")
    return LoadedSequence(
        frames=torch.stack(frames), parsings=torch.stack(parsings), poses=poses,
        background=load_image(bg_path), flows_next=flows_next, flows_prev=flows_prev,
        name=d.name, meta=meta)


def list_sequence_dirs(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "meta.json").exists())
    if not dirs:
        raise DatasetError(f"{root}: no sequence directories found")
    return dirs


def load_dataset(root: str | Path) -> list[LoadedSequence]:
    return [load_sequence(d) for d in list_sequence_dirs(root)]


def generate_dataset(out_root: str | Path, n_actors: int, n_frames: int,
                     size: tuple[int, int], seed: int,
                     gen_config: GenConfig | None = None) -> list[Path]:
    """Render and save one sequence per actor; fully determined by (seed, config)."""
    if n_actors < 1:
        raise ValueError("n_actors must be >= 1")
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    cfg = gen_config or GenConfig()
    dirs = []
    for a in range(n_actors):
        actor_seed = seed + 101 * a
        actor = make_actor(actor_seed, cfg, height=size[0])
        motion = make_motion(actor_seed + 53, n_frames, cfg, height=size[0])
        frames = make_sequence(actor, motion, size)
        seq_dir = out / f"seq_{a:03d}"
        save_sequence(frames, seq_dir, seed=actor_seed)
        dirs.append(seq_dir)
    return dirs
