"""Command line front end.

Subcommands cover the whole workflow: data-gen renders the synthetic dataset,
train runs either stage, infer rolls a trained model over a driving sequence,
eval scores generated frames against ground truth, and ablate runs the module
on/off grid.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .config import TrainConfig, format_config, load_config, parse_config, save_config
from .dataio import (DatasetError, generate_dataset, load_dataset, load_image,
                     load_parsing, load_pose, load_sequence, save_image)
from .geometry import PoseSample, merge_parsing, render_pose_map
from .pipeline import (evaluate_frames, load_models, run_ablation, transfer,
                       write_report)
from .training import (build_sequence_tensors, prepare_sequences, train_stage1,
                       train_stage2)


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"size must look like 64x48, got {text!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be two integers, got {text!r}")
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def cmd_data_gen(args) -> int:
    dirs = generate_dataset(args.out, args.actors, args.frames, args.size, args.seed)
    print(f"wrote {len(dirs)} sequences under {args.out}")
    return 0


def cmd_init_config(args) -> int:
    text = format_config(TrainConfig())
    for item in args.set or []:
        key, _, val = item.partition("=")
        key = key.strip()
        lines = text.splitlines()
        hits = [i for i, ln in enumerate(lines) if ln.split("=")[0].strip() == key]
        if not hits:
            print(f"unknown config key {key!r}", file=sys.stderr)
            return 2
        lines[hits[0]] = f"{key} = {val.strip()}"
        text = "\n".join(lines) + "\n"
    cfg = parse_config(text)  # validates
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_config(cfg, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    loaded = load_dataset(cfg.train_dir)
    if not loaded:
        raise DatasetError(f"no sequences under {cfg.train_dir}")
    seqs = prepare_sequences(loaded, cfg)
    save_config(cfg, out / "config.txt")
    resume = out if args.resume else None
    if args.stage == 1:
        result = train_stage1(cfg, seqs, out, resume_dir=resume)
    else:
        for name in ("layout.ckpt", "region.ckpt"):
            if not (out / name).exists():
                raise DatasetError(f"{out / name} missing; run train --stage 1 first")
        result = train_stage2(cfg, seqs, out, resume_dir=resume)
    if result.log:
        last = result.log[-1]
        print(f"stage {args.stage} done: epoch {last['epoch']} "
              f"total {last.get('total', float('nan')):.4f}")
    else:
        print(f"stage {args.stage}: nothing to do (already trained)")
    return 0


def _find_parsing(source: Path) -> Path:
    if "frame" in source.name:
        cand = source.with_name(source.name.replace("frame", "parsing"))
        if cand.exists():
            return cand
    raise DatasetError(
        f"cannot find the parsing map for {source} (expected a sibling file "
        f"with 'frame' replaced by 'parsing')")


def _rescale_pose(pose: PoseSample, size: tuple[int, int]) -> PoseSample:
    if tuple(pose.image_size) == tuple(size):
        return pose
    sy = size[0] / pose.image_size[0]
    sx = size[1] / pose.image_size[1]
    kp = pose.keypoints * np.array([sx, sy])
    return PoseSample(keypoints=kp, visible=pose.visible, image_size=size)


def cmd_infer(args) -> int:
    source = Path(args.source)
    frame = load_image(source)
    parsing = load_parsing(_find_parsing(source))
    layout = merge_parsing(parsing)
    h, w = frame.shape[1:]

    driving = Path(args.driving)
    pose_paths = sorted(driving.glob("pose_*.json"))
    if len(pose_paths) < 3:
        raise DatasetError(f"{driving}: need at least 3 driving poses, "
                           f"found {len(pose_paths)}")
    poses = [_rescale_pose(load_pose(p), (h, w)) for p in pose_paths]
    bg_path = driving / "background.png"
    if not bg_path.exists():
        raise DatasetError(f"{driving}: missing background.png")
    background = load_image(bg_path)
    if background.shape[1:] != (h, w):
        raise DatasetError("background size differs from the source frame")

    bundle = load_models(args.ckpt_dir, need_compositor=not args.no_wcn)
    result = transfer(bundle, frame, layout, poses, background,
                      no_gam=args.no_gam, no_tam=args.no_tam, no_wcn=args.no_wcn)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t in range(result.frames.shape[0]):
        save_image(result.frames[t], out / f"frame_{t:04d}.png")
        if args.grid:
            pose_map = render_pose_map(poses[t], (h, w), bundle.cfg.skeleton_edges,
                                       bundle.cfg.pose_stroke)
            grid = torch.cat([frame, pose_map, result.frames[t].clamp(-1, 1)], dim=2)
            save_image(grid, out / f"grid_{t:04d}.png")
    print(f"wrote {result.frames.shape[0]} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    gt = load_sequence(args.gt)
    sq = build_sequence_tensors(gt, TrainConfig())
    gen_dir = Path(args.gen)
    paths = sorted(gen_dir.glob("frame_*.png"))
    if len(paths) != gt.n_frames:
        raise DatasetError(f"{gen_dir} holds {len(paths)} frames, "
                           f"ground truth has {gt.n_frames}")
    gen = torch.stack([load_image(p) for p in paths])
    report = evaluate_frames(gen, sq)
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    write_report(report, args.report)
    print(report.format_text(), end="")
    print(f"report written to {args.report}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    summary = run_ablation(cfg, args.out)
    print((Path(args.out) / "table.txt").read_text(), end="")
    print(f"ordering holds in {summary['ordering_count']} of "
          f"{len(summary['seeds'])} seeds")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="motrans",
                                description="Region-wise human motion transfer")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("data-gen", help="render a synthetic paired dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--actors", type=int, default=8)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--size", type=_parse_size, default=(64, 48),
                   help="HxW, e.g. 64x48")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_data_gen)

    c = sub.add_parser("init-config", help="write a default config file")
    c.add_argument("--out", required=True)
    c.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a default (repeatable)")
    c.set_defaults(func=cmd_init_config)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true",
                   help="continue from checkpoints already in --out")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="animate a source frame with driving poses")
    i.add_argument("--source", required=True, help="source frame image")
    i.add_argument("--driving", required=True,
                   help="directory with pose_*.json and background.png")
    i.add_argument("--ckpt-dir", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--no-gam", action="store_true",
                   help="skip global affine source alignment")
    i.add_argument("--no-tam", action="store_true",
                   help="replace feature correspondence fusion with addition")
    i.add_argument("--no-wcn", action="store_true",
                   help="paste summed regions on the background, no compositor")
    i.add_argument("--grid", action="store_true",
                   help="also write source|pose|output side-by-side images")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score generated frames against ground truth")
    e.add_argument("--gen", required=True, help="directory of generated frame_*.png")
    e.add_argument("--gt", required=True, help="ground-truth sequence directory")
    e.add_argument("--report", required=True, help="output text report path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate the module on/off grid")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)  # keeps reductions deterministic across runs
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
