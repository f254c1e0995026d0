"""Two-stage training.

Stage 1 trains the layout predictor and the shared region generator with full
teacher forcing: ground-truth layouts, masks, and region images stand in for
history and alignment targets. Stage 2 freezes stage 1, precomputes the coarse
region sums once, and trains the compositor against whole frames.

Sample order is drawn from a PCG64 stream keyed by (seed, phase, epoch), so a
resume at an epoch boundary replays the exact uninterrupted schedule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import config as CFG
from .blocks import MultiScaleDiscriminator, init_parameters
from .checkpoint import CheckpointContainer, load_checkpoint, save_checkpoint
from .compositor import FrameCompositor, compositor_generator_loss, face_crop
from .config import TrainConfig
from .dataio import LoadedSequence
from .geometry import (batch_global_align, compute_alignment, layout_to_mask,
                       merge_parsing, render_pose_map)
from .layoutnet import LayoutGenerator, layout_generator_loss
from .losses import PerceptualExtractor, gan_d_loss
from .regionnet import RegionGenerator, region_generator_loss

LAYOUT_STAGE = "stage1-layout"
REGION_STAGE = "stage1-region"
COMPOSITOR_STAGE = "stage2-compositor"

# parameter-init seed offsets per network
_SEEDS = {"layout_g": 11, "layout_d": 12, "region_g": 13, "region_d": 14,
          "comp_g": 15, "comp_d": 16, "face_d": 17}


@dataclass
class SequenceTensors:
    """Training-ready tensors for one sequence; frame 0 doubles as the source."""

    name: str
    frames: torch.Tensor            # (N, 3, H, W)
    layouts: torch.Tensor           # (N, 6, H, W) one-hot
    masks: torch.Tensor             # (N, 1, H, W)
    fg: torch.Tensor                # (N, 3, H, W)
    pose_maps: torch.Tensor         # (N, 3, H, W)
    region_images: torch.Tensor     # (N, 5, 3, H, W)
    aligned_src_regions: torch.Tensor   # (N, 5, 3, H, W)
    aligned_src_fg: torch.Tensor        # (N, 3, H, W)
    flow_prev: torch.Tensor         # (N, 2, H, W), zeros at t=0
    flow_prev_weight: torch.Tensor  # (N, 1, H, W), zeros at t=0
    background: torch.Tensor        # (3, H, W)
    flows_next: list                # FlowField list for evaluation

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def pose_stack(self, t: int) -> torch.Tensor:
        pm = self.pose_maps
        return torch.cat([pm[max(0, t - 2)], pm[max(0, t - 1)], pm[t]], dim=0)

    def layout_history(self, t: int) -> torch.Tensor:
        lay = self.layouts
        return torch.cat([lay[max(0, t - 2)], lay[max(0, t - 1)]], dim=0)

    def fg_history(self, t: int) -> torch.Tensor:
        return torch.cat([self.fg[max(0, t - 2)], self.fg[max(0, t - 1)]], dim=0)

    def cond_stack(self, t: int) -> torch.Tensor:
        lay, pm = self.layouts, self.pose_maps
        idx = [max(0, t - 2), max(0, t - 1), t]
        return torch.cat([lay[i] for i in idx] + [pm[i] for i in idx], dim=0)


def build_sequence_tensors(loaded: LoadedSequence, cfg: TrainConfig) -> SequenceTensors:
    n = loaded.n_frames
    h, w = loaded.frames.shape[2:]
    layouts = torch.stack([
        merge_parsing(loaded.parsings[t], cfg.parsing_merge).channels for t in range(n)])
    masks = torch.stack([layout_to_mask(layouts[t]) for t in range(n)]).unsqueeze(1)
    fg = loaded.frames * masks
    pose_maps = torch.stack([
        render_pose_map(loaded.poses[t], (h, w), cfg.skeleton_edges, cfg.pose_stroke)
        for t in range(n)])
    region_images = loaded.frames.unsqueeze(1) * layouts[:, :CFG.NUM_REGIONS].unsqueeze(2)

    src_pack = torch.cat([region_images[0].reshape(-1, h, w), fg[0]], dim=0)  # (18, H, W)
    aligns = [compute_alignment(masks[0, 0], masks[t, 0]) for t in range(n)]
    scales = torch.tensor([a.scale for a in aligns], dtype=torch.float32)
    offsets = torch.tensor([a.offset for a in aligns], dtype=torch.float32)
    anchors = torch.tensor([a.anchor for a in aligns], dtype=torch.float32)
    aligned = batch_global_align(src_pack.unsqueeze(0).expand(n, -1, -1, -1),
                                 scales, offsets, anchors)
    aligned_src_regions = aligned[:, :15].reshape(n, CFG.NUM_REGIONS, 3, h, w)
    aligned_src_fg = aligned[:, 15:]

    flow_prev = torch.zeros(n, 2, h, w)
    flow_weight = torch.zeros(n, 1, h, w)
    for t in range(1, n):
        fl = loaded.flows_prev[t]
        if fl is not None:
            flow_prev[t] = fl.displacement
            flow_weight[t, 0] = fl.weight if fl.weight is not None else 1.0
    return SequenceTensors(
        name=loaded.name, frames=loaded.frames, layouts=layouts, masks=masks, fg=fg,
        pose_maps=pose_maps, region_images=region_images,
        aligned_src_regions=aligned_src_regions, aligned_src_fg=aligned_src_fg,
        flow_prev=flow_prev, flow_prev_weight=flow_weight,
        background=loaded.background, flows_next=loaded.flows_next)


def prepare_sequences(loaded: list[LoadedSequence], cfg: TrainConfig) -> list[SequenceTensors]:
    return [build_sequence_tensors(sq, cfg) for sq in loaded]


# ---------------------------------------------------------------------------
# checkpoint packing

def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))


def pack_state(stage: str, epoch: int, nets: dict[str, nn.Module],
               opts: dict[str, torch.optim.Optimizer]) -> CheckpointContainer:
    box = CheckpointContainer(stage=stage, epoch=epoch)
    for net_name, net in nets.items():
        for pname, p in net.named_parameters():
            box.put(f"{net_name}/param/{pname}", p.detach().numpy())
        opt = opts.get(net_name)
        if opt is None:
            continue
        for pname, p in net.named_parameters():
            state = opt.state.get(p)
            if not state:
                continue
            box.put(f"{net_name}/opt/{pname}/exp_avg", state["exp_avg"].numpy())
            box.put(f"{net_name}/opt/{pname}/exp_avg_sq", state["exp_avg_sq"].numpy())
            box.put(f"{net_name}/opt/{pname}/step",
                    np.asarray(float(state["step"]), dtype=np.float32))
    box.put("rng/torch", torch.get_rng_state().numpy().astype(np.float32))
    return box


def unpack_state(box: CheckpointContainer, nets: dict[str, nn.Module],
                 opts: dict[str, torch.optim.Optimizer]) -> None:
    for net_name, net in nets.items():
        for pname, p in net.named_parameters():
            key = f"{net_name}/param/{pname}"
            if key not in box.arrays:
                raise KeyError(f"checkpoint misses {key}")
            arr = box.arrays[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{key}: shape {arr.shape} != {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.from_numpy(arr))
        opt = opts.get(net_name)
        if opt is None:
            continue
        for pname, p in net.named_parameters():
            base = f"{net_name}/opt/{pname}"
            if f"{base}/exp_avg" not in box.arrays:
                continue
            opt.state[p] = {
                "step": torch.tensor(float(box.arrays[f"{base}/step"])),
                "exp_avg": torch.from_numpy(box.arrays[f"{base}/exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(box.arrays[f"{base}/exp_avg_sq"].copy()),
            }
    if "rng/torch" in box.arrays:
        torch.set_rng_state(torch.from_numpy(box.arrays["rng/torch"].astype(np.uint8)))


# ---------------------------------------------------------------------------
# batching

def _epoch_order(seed: int, phase: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng([seed & 0x7FFFFFFF, phase, epoch])
    return rng.permutation(n)


def _batches(order: np.ndarray, batch_size: int):
    for i in range(0, len(order), batch_size):
        yield order[i:i + batch_size]


class _LossMeter:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.count = 0

    def add(self, terms: dict[str, torch.Tensor]) -> None:
        for k, v in terms.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v.detach())
        self.count += 1

    def means(self) -> dict[str, float]:
        return {k: v / max(self.count, 1) for k, v in sorted(self.sums.items())}


def _write_log(path: Path, entries: list[dict]) -> None:
    with open(path, "w") as f:
        for entry in entries:
            f.write(json.dumps(entry, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    out_dir: Path
    log: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------------------
# stage 1

def train_stage1(cfg: TrainConfig, seqs: list[SequenceTensors], out_dir: str | Path,
                 resume_dir: str | Path | None = None) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout_g = LayoutGenerator(cfg.base_width, cfg.n_downsample, cfg.n_resblocks)
    region_g = RegionGenerator(cfg.base_width, cfg.n_downsample, cfg.n_resblocks)
    init_parameters(layout_g, cfg.seed + _SEEDS["layout_g"])
    init_parameters(region_g, cfg.seed + _SEEDS["region_g"])
    layout_d = None
    if cfg.layout_adversarial:
        layout_d = MultiScaleDiscriminator(CFG.NUM_PARTS + 3, cfg.disc_width,
                                           cfg.disc_scales, cfg.disc_layers)
        init_parameters(layout_d, cfg.seed + _SEEDS["layout_d"])
    region_d = MultiScaleDiscriminator(3 + 1, cfg.disc_width, cfg.disc_scales, cfg.disc_layers)
    init_parameters(region_d, cfg.seed + _SEEDS["region_d"])
    extractor = PerceptualExtractor(cfg.perceptual_seed)

    layout_nets = {"layout_g": layout_g}
    layout_opts = {"layout_g": _adam(layout_g.parameters(), cfg)}
    if layout_d is not None:
        layout_nets["layout_d"] = layout_d
        layout_opts["layout_d"] = _adam(layout_d.parameters(), cfg)
    region_nets = {"region_g": region_g, "region_d": region_d}
    region_opts = {"region_g": _adam(region_g.parameters(), cfg),
                   "region_d": _adam(region_d.parameters(), cfg)}

    start_layout = start_region = 0
    if resume_dir is not None:
        lp = Path(resume_dir) / "layout.ckpt"
        rp = Path(resume_dir) / "region.ckpt"
        if lp.exists():
            box = load_checkpoint(lp, expected_stage=LAYOUT_STAGE)
            unpack_state(box, layout_nets, layout_opts)
            start_layout = box.epoch
        if rp.exists():
            box = load_checkpoint(rp, expected_stage=REGION_STAGE)
            unpack_state(box, region_nets, region_opts)
            start_region = box.epoch

    log: list[dict] = []
    layout_samples = [(s, t) for s, sq in enumerate(seqs) for t in range(sq.n_frames)]
    region_samples = [(s, t, i) for s, sq in enumerate(seqs)
                      for t in range(sq.n_frames) for i in range(CFG.NUM_REGIONS)]

    for epoch in range(start_layout, cfg.epochs_stage1):
        meter = _LossMeter()
        d_meter = _LossMeter()
        order = _epoch_order(cfg.seed, 1, epoch, len(layout_samples))
        for batch in _batches(order, cfg.batch_size):
            items = [layout_samples[j] for j in batch]
            src = torch.stack([seqs[s].layouts[0] for s, _ in items])
            poses = torch.stack([seqs[s].pose_stack(t) for s, t in items])
            hist = torch.stack([seqs[s].layout_history(t) for s, t in items])
            target = torch.stack([seqs[s].layouts[t] for s, t in items])
            f_target = torch.stack([seqs[s].flow_prev[t] for s, t in items])
            f_weight = torch.stack([seqs[s].flow_prev_weight[t] for s, t in items])
            cond = torch.stack([seqs[s].pose_maps[t] for s, t in items])

            res = layout_g(src, poses, hist)
            terms = layout_generator_loss(res, target, f_target, f_weight,
                                          disc=layout_d, condition=cond,
                                          lambda_rec=cfg.lambda_rec,
                                          lambda_flow=cfg.lambda_flow)
            layout_opts["layout_g"].zero_grad()
            terms["total"].backward()
            layout_opts["layout_g"].step()
            meter.add(terms)
            if layout_d is not None:
                d_loss = gan_d_loss(layout_d, target, res.fused, cond)
                layout_opts["layout_d"].zero_grad()
                d_loss.backward()
                layout_opts["layout_d"].step()
                d_meter.add({"d": d_loss})
        entry = {"stage": LAYOUT_STAGE, "epoch": epoch, **meter.means(), **d_meter.means()}
        log.append(entry)
        save_checkpoint(pack_state(LAYOUT_STAGE, epoch + 1, layout_nets, layout_opts),
                        out / "layout.ckpt")

    for epoch in range(start_region, cfg.epochs_stage1):
        meter = _LossMeter()
        d_meter = _LossMeter()
        order = _epoch_order(cfg.seed, 2, epoch, len(region_samples))
        for batch in _batches(order, cfg.batch_size):
            items = [region_samples[j] for j in batch]
            mask = torch.stack([seqs[s].layouts[t, i:i + 1] for s, t, i in items])
            prev1 = torch.stack([seqs[s].region_images[max(0, t - 1), i] for s, t, i in items])
            prev2 = torch.stack([seqs[s].region_images[max(0, t - 2), i] for s, t, i in items])
            src = torch.stack([seqs[s].aligned_src_regions[t, i] for s, t, i in items])
            target = torch.stack([seqs[s].region_images[t, i] for s, t, i in items])

            fake = region_g(mask, prev1, prev2, src)
            terms = region_generator_loss(fake, target, mask, region_d, extractor,
                                          cfg.lambda_rec, cfg.lambda_per)
            region_opts["region_g"].zero_grad()
            terms["total"].backward()
            region_opts["region_g"].step()
            meter.add(terms)
            d_loss = gan_d_loss(region_d, target, fake, mask)
            region_opts["region_d"].zero_grad()
            d_loss.backward()
            region_opts["region_d"].step()
            d_meter.add({"d": d_loss})
        entry = {"stage": REGION_STAGE, "epoch": epoch, **meter.means(), **d_meter.means()}
        log.append(entry)
        save_checkpoint(pack_state(REGION_STAGE, epoch + 1, region_nets, region_opts),
                        out / "region.ckpt")

    _write_log(out / "stage1_log.jsonl", log)
    return TrainResult(out_dir=out, log=log)


# ---------------------------------------------------------------------------
# stage 2

def _load_region_generator(cfg: TrainConfig, stage1_dir: Path) -> RegionGenerator:
    region_g = RegionGenerator(cfg.base_width, cfg.n_downsample, cfg.n_resblocks)
    box = load_checkpoint(stage1_dir / "region.ckpt", expected_stage=REGION_STAGE)
    unpack_state(box, {"region_g": region_g}, {})
    for p in region_g.parameters():
        p.requires_grad_(False)
    return region_g


def precompute_coarse(region_g: RegionGenerator, sq: SequenceTensors) -> torch.Tensor:
    """Frozen region outputs summed per frame, teacher-forced exactly as in training."""
    n = sq.n_frames
    coarse = torch.zeros_like(sq.frames)
    with torch.no_grad():
        for i in range(CFG.NUM_REGIONS):
            mask = sq.layouts[:, i:i + 1]
            prev1 = torch.stack([sq.region_images[max(0, t - 1), i] for t in range(n)])
            prev2 = torch.stack([sq.region_images[max(0, t - 2), i] for t in range(n)])
            src = sq.aligned_src_regions[:, i]
            coarse = coarse + region_g(mask, prev1, prev2, src)
    return coarse


def train_stage2(cfg: TrainConfig, seqs: list[SequenceTensors], out_dir: str | Path,
                 stage1_dir: str | Path | None = None,
                 resume_dir: str | Path | None = None) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage1 = Path(stage1_dir) if stage1_dir is not None else out
    region_g = _load_region_generator(cfg, stage1)
    coarse_all = [precompute_coarse(region_g, sq) for sq in seqs]

    comp_g = FrameCompositor(cfg.base_width, cfg.n_downsample, cfg.n_resblocks,
                             use_texture_align=not cfg.no_tam,
                             use_flow_fusion=cfg.wcn_flow_fusion)
    comp_d = MultiScaleDiscriminator(3 + CFG.NUM_PARTS, cfg.disc_width,
                                     cfg.disc_scales, cfg.disc_layers)
    face_d = MultiScaleDiscriminator(3, cfg.disc_width, 1, cfg.disc_layers)
    init_parameters(comp_g, cfg.seed + _SEEDS["comp_g"])
    init_parameters(comp_d, cfg.seed + _SEEDS["comp_d"])
    init_parameters(face_d, cfg.seed + _SEEDS["face_d"])
    extractor = PerceptualExtractor(cfg.perceptual_seed)

    nets = {"comp_g": comp_g, "comp_d": comp_d, "face_d": face_d}
    opts = {name: _adam(net.parameters(), cfg) for name, net in nets.items()}

    start_epoch = 0
    if resume_dir is not None:
        cp = Path(resume_dir) / "compositor.ckpt"
        if cp.exists():
            box = load_checkpoint(cp, expected_stage=COMPOSITOR_STAGE)
            unpack_state(box, nets, opts)
            start_epoch = box.epoch

    samples = [(s, t) for s, sq in enumerate(seqs) for t in range(sq.n_frames)]
    log: list[dict] = []
    for epoch in range(start_epoch, cfg.epochs_stage2):
        meter = _LossMeter()
        d_meter = _LossMeter()
        order = _epoch_order(cfg.seed, 3, epoch, len(samples))
        for batch in _batches(order, cfg.batch_size):
            items = [samples[j] for j in batch]
            a_src = torch.stack([seqs[s].aligned_src_fg[t] for s, t in items])
            hist = torch.stack([seqs[s].fg_history(t) for s, t in items])
            coarse = torch.stack([coarse_all[s][t] for s, t in items])
            cond = torch.stack([seqs[s].cond_stack(t) for s, t in items])
            bg = torch.stack([seqs[s].background for s, _ in items])
            fusion_prev = torch.stack([seqs[s].fg[max(0, t - 1)] for s, t in items])
            frame_gt = torch.stack([seqs[s].frames[t] for s, t in items])
            fg_gt = torch.stack([seqs[s].fg[t] for s, t in items])
            lay_cond = torch.stack([seqs[s].layouts[t] for s, t in items])
            f_target = torch.stack([seqs[s].flow_prev[t] for s, t in items])
            f_weight = torch.stack([seqs[s].flow_prev_weight[t] for s, t in items])

            res = comp_g(a_src, hist, coarse, cond, bg, fusion_prev=fusion_prev)
            fake_faces, real_faces = [], []
            for b, (s, t) in enumerate(items):
                crop_fake, ok = face_crop(res.composite[b], seqs[s].layouts[t],
                                          cfg.face_size, min_area=cfg.face_min_area)
                if ok:
                    crop_real, _ = face_crop(seqs[s].frames[t], seqs[s].layouts[t],
                                             cfg.face_size, min_area=cfg.face_min_area)
                    fake_faces.append(crop_fake)
                    real_faces.append(crop_real)
            face_fake = torch.stack(fake_faces) if fake_faces else None
            terms = compositor_generator_loss(
                res, frame_gt, fg_gt, comp_d, extractor, lay_cond,
                face_disc=face_d if face_fake is not None else None,
                face_fake=face_fake,
                flow_target=f_target, flow_target_weight=f_weight,
                lambda_rec=cfg.lambda_rec, lambda_per=cfg.lambda_per,
                lambda_flow=cfg.lambda_flow)
            opts["comp_g"].zero_grad()
            terms["total"].backward()
            opts["comp_g"].step()
            meter.add(terms)

            d_loss = gan_d_loss(comp_d, frame_gt, res.composite, lay_cond)
            opts["comp_d"].zero_grad()
            d_loss.backward()
            opts["comp_d"].step()
            d_terms = {"d": d_loss}
            if face_fake is not None:
                face_real = torch.stack(real_faces)
                fd_loss = gan_d_loss(face_d, face_real, face_fake, None)
                opts["face_d"].zero_grad()
                fd_loss.backward()
                opts["face_d"].step()
                d_terms["d_face"] = fd_loss
            d_meter.add(d_terms)
        entry = {"stage": COMPOSITOR_STAGE, "epoch": epoch, **meter.means(), **d_meter.means()}
        log.append(entry)
        save_checkpoint(pack_state(COMPOSITOR_STAGE, epoch + 1, nets, opts),
                        out / "compositor.ckpt")

    _write_log(out / "stage2_log.jsonl", log)
    return TrainResult(out_dir=out, log=log)
