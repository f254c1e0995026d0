"""Inference rollout, evaluation, baselines, and the ablation grid.

Inference feeds the model its own outputs: predicted layouts become history and
alignment targets, generated regions become region history, and composited
foregrounds drive the temporal fusion. Before any frame exists the histories
hold the globally aligned source, mirroring the teacher-forced clamp used in
training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import config as CFG
from .checkpoint import load_checkpoint
from .compositor import FrameCompositor
from .config import TrainConfig, load_config, save_config
from .dataio import DatasetError, load_dataset
from .geometry import (AffineAlignment, EmptyMaskError, IDENTITY_ALIGNMENT, Layout,
                       PoseSample, batch_global_align, compute_alignment, hardened,
                       layout_to_mask, render_pose_map)
from .layoutnet import LayoutGenerator
from .losses import PerceptualExtractor
from .metrics import (MetricReport, fid_proxy, lpips_proxy, masked_metric, psnr,
                      ssim, temporal_consistency, to_unit_range)
from .regionnet import RegionGenerator
from .training import (COMPOSITOR_STAGE, LAYOUT_STAGE, REGION_STAGE, SequenceTensors,
                       build_sequence_tensors, train_stage1, train_stage2, unpack_state)


@dataclass
class ModelBundle:
    cfg: TrainConfig
    layout_g: LayoutGenerator
    region_g: RegionGenerator
    comp_g: FrameCompositor | None


def build_models(cfg: TrainConfig, with_compositor: bool = True) -> ModelBundle:
    """Fresh networks matching the config architecture (uninitialized)."""
    layout_g = LayoutGenerator(cfg.base_width, cfg.n_downsample, cfg.n_resblocks)
    region_g = RegionGenerator(cfg.base_width, cfg.n_downsample, cfg.n_resblocks)
    comp_g = None
    if with_compositor:
        comp_g = FrameCompositor(cfg.base_width, cfg.n_downsample, cfg.n_resblocks,
                                 use_texture_align=not cfg.no_tam,
                                 use_flow_fusion=cfg.wcn_flow_fusion)
    return ModelBundle(cfg=cfg, layout_g=layout_g, region_g=region_g, comp_g=comp_g)


def init_models(bundle: ModelBundle, seed: int) -> ModelBundle:
    """Seeded random init, matching the layout used at the start of training."""
    from .blocks import init_parameters
    from .training import _SEEDS

    init_parameters(bundle.layout_g, seed + _SEEDS["layout_g"])
    init_parameters(bundle.region_g, seed + _SEEDS["region_g"])
    if bundle.comp_g is not None:
        init_parameters(bundle.comp_g, seed + _SEEDS["comp_g"])
    return bundle


def load_models(ckpt_dir: str | Path, need_compositor: bool = True) -> ModelBundle:
    """Load the generator stack from a training output directory.

    The directory must hold config.txt (written by the train command) plus
    layout.ckpt and region.ckpt; compositor.ckpt is optional when the caller
    only runs the region pipeline.
    """
    d = Path(ckpt_dir)
    cfg_path = d / "config.txt"
    if not cfg_path.exists():
        raise DatasetError(f"{d}: missing config.txt next to the checkpoints")
    cfg = load_config(cfg_path)
    comp_path = d / "compositor.ckpt"
    if need_compositor and not comp_path.exists():
        raise DatasetError(f"{d}: missing compositor.ckpt (train stage 2 first)")
    bundle = build_models(cfg, with_compositor=comp_path.exists())
    unpack_state(load_checkpoint(d / "layout.ckpt", expected_stage=LAYOUT_STAGE),
                 {"layout_g": bundle.layout_g}, {})
    unpack_state(load_checkpoint(d / "region.ckpt", expected_stage=REGION_STAGE),
                 {"region_g": bundle.region_g}, {})
    if bundle.comp_g is not None:
        unpack_state(load_checkpoint(comp_path, expected_stage=COMPOSITOR_STAGE),
                     {"comp_g": bundle.comp_g}, {})
    for net in (bundle.layout_g, bundle.region_g, bundle.comp_g):
        if net is not None:
            net.eval()
            for p in net.parameters():
                p.requires_grad_(False)
    return bundle


@dataclass
class TransferResult:
    frames: torch.Tensor    # (N, 3, H, W) composited output
    layouts: torch.Tensor   # (N, 6, H, W) fused soft layouts
    coarse: torch.Tensor    # (N, 3, H, W) summed region outputs


def transfer(bundle: ModelBundle, source_frame: torch.Tensor, source_layout: Layout,
             driving_poses: list[PoseSample], background: torch.Tensor,
             no_gam: bool = False, no_tam: bool = False,
             no_wcn: bool = False) -> TransferResult:
    """Animate the source appearance through the driving pose sequence.

    no_gam keeps the source unaligned, no_tam bypasses the feature
    correspondence fusion, and no_wcn pastes the summed regions straight onto
    the background instead of running the compositor.
    """
    cfg = bundle.cfg
    if source_frame.dim() != 3 or source_frame.shape[0] != 3:
        raise ValueError("source_frame must be (3, H, W)")
    h, w = source_frame.shape[1:]
    if not driving_poses:
        raise ValueError("need at least one driving pose")
    hard_src = source_layout.to_hard().channels
    mask_src = layout_to_mask(hard_src)
    if float(mask_src.sum()) == 0:
        raise EmptyMaskError("source layout has no foreground")
    src_regions = source_frame.unsqueeze(0) * hard_src[:CFG.NUM_REGIONS].unsqueeze(1)
    fg_src = source_frame * mask_src
    src_layout_soft = hard_src  # one-hot is a valid simplex

    pose_maps = torch.stack([
        render_pose_map(p, (h, w), cfg.skeleton_edges, cfg.pose_stroke)
        for p in driving_poses])
    n = pose_maps.shape[0]

    use_wcn = bundle.comp_g is not None and not no_wcn
    tam_saved = None
    if use_wcn and no_tam:
        tam_saved = bundle.comp_g.use_texture_align
        bundle.comp_g.use_texture_align = False

    # regions and foreground ride through one resample per step
    src_pack = torch.cat([src_regions.reshape(-1, h, w), fg_src], dim=0)  # (18, H, W)

    def align_pack(alignment: AffineAlignment):
        out = batch_global_align(
            src_pack.unsqueeze(0),
            torch.tensor([alignment.scale]),
            torch.tensor([alignment.offset]),
            torch.tensor([alignment.anchor]))[0]
        return out[:15].reshape(CFG.NUM_REGIONS, 3, h, w), out[15:]

    frames, layouts_out, coarse_out = [], [], []
    lay_hist = [src_layout_soft, src_layout_soft]
    region_hist: list[torch.Tensor] | None = None   # entries (5, 3, H, W)
    fg_hist: list[torch.Tensor] | None = None
    last_alignment = IDENTITY_ALIGNMENT
    try:
        with torch.no_grad():
            for t in range(n):
                stack = torch.cat([pose_maps[max(0, t - 2)], pose_maps[max(0, t - 1)],
                                   pose_maps[t]], dim=0)
                res = bundle.layout_g(src_layout_soft.unsqueeze(0), stack.unsqueeze(0),
                                      torch.cat(lay_hist, dim=0).unsqueeze(0))
                lay_t = res.fused[0]
                hard_t = hardened(lay_t)
                mask_t = layout_to_mask(hard_t)

                if no_gam:
                    alignment = IDENTITY_ALIGNMENT
                else:
                    try:
                        alignment = compute_alignment(mask_src, mask_t)
                    except EmptyMaskError:
                        # degenerate layout prediction; reuse the last good alignment
                        alignment = last_alignment
                last_alignment = alignment
                aligned_regions, aligned_fg = align_pack(alignment)
                if region_hist is None:
                    region_hist = [aligned_regions, aligned_regions]
                    fg_hist = [aligned_fg, aligned_fg]

                masks5 = hard_t[:CFG.NUM_REGIONS].unsqueeze(1)
                regions_t = bundle.region_g(masks5, region_hist[-1], region_hist[-2],
                                            aligned_regions)
                coarse_t = regions_t.sum(dim=0)

                if use_wcn:
                    idx = [max(0, t - 2), max(0, t - 1), t]
                    cond_lay = [hardened(lay_hist[0]), hardened(lay_hist[1]), hard_t]
                    cond = torch.cat(cond_lay + [pose_maps[i] for i in idx], dim=0)
                    out = bundle.comp_g(
                        aligned_fg.unsqueeze(0),
                        torch.cat([fg_hist[-2], fg_hist[-1]], dim=0).unsqueeze(0),
                        coarse_t.unsqueeze(0), cond.unsqueeze(0),
                        background.unsqueeze(0),
                        fusion_prev=fg_hist[-1].unsqueeze(0))
                    frame_t = out.composite[0]
                    fg_t = out.foreground[0]
                else:
                    frame_t = coarse_t + (1.0 - mask_t) * background
                    fg_t = coarse_t

                lay_hist = [lay_hist[-1], lay_t]
                region_hist = [region_hist[-1], regions_t]
                fg_hist = [fg_hist[-1], fg_t]
                frames.append(frame_t)
                layouts_out.append(lay_t)
                coarse_out.append(coarse_t)
    finally:
        if tam_saved is not None:
            bundle.comp_g.use_texture_align = tam_saved
    return TransferResult(frames=torch.stack(frames), layouts=torch.stack(layouts_out),
                          coarse=torch.stack(coarse_out))


def reenact_sequence(bundle: ModelBundle, sq: SequenceTensors,
                     poses: list[PoseSample], **flags) -> TransferResult:
    """Drive a sequence's own first frame through its pose track."""
    return transfer(bundle, sq.frames[0], Layout(sq.layouts[0], kind="hard"),
                    poses, sq.background, **flags)


def copy_aligned_baseline(sq: SequenceTensors) -> torch.Tensor:
    """Per frame: source foreground aligned onto the true mask, pasted over background."""
    n = sq.n_frames
    pack = torch.cat([sq.fg[0], sq.masks[0]], dim=0).unsqueeze(0).expand(n, -1, -1, -1)
    aligns = [compute_alignment(sq.masks[0, 0], sq.masks[t, 0]) for t in range(n)]
    aligned = batch_global_align(
        pack,
        torch.tensor([a.scale for a in aligns]),
        torch.tensor([a.offset for a in aligns]),
        torch.tensor([a.anchor for a in aligns]))
    fg = aligned[:, :3]
    mask = (aligned[:, 3:] > 0.5).float()
    return fg * mask + sq.background.unsqueeze(0) * (1.0 - mask)


# ---------------------------------------------------------------------------
# evaluation

def evaluate_frames(gen: torch.Tensor, sq: SequenceTensors,
                    extractor: PerceptualExtractor | None = None) -> MetricReport:
    """Score generated frames against the ground-truth sequence."""
    if gen.shape != sq.frames.shape:
        raise ValueError(f"generated {tuple(gen.shape)} vs ground truth "
                         f"{tuple(sq.frames.shape)}")
    extractor = extractor or PerceptualExtractor()
    n = gen.shape[0]
    g = to_unit_range(gen)
    r = to_unit_range(sq.frames)
    names = ("ssim", "psnr", "masked_ssim", "masked_psnr", "lpips")
    per_frame: dict[str, list[float]] = {k: [] for k in names}
    for t in range(n):
        m = sq.masks[t]
        per_frame["ssim"].append(ssim(g[t], r[t]))
        per_frame["psnr"].append(psnr(g[t], r[t]))
        per_frame["masked_ssim"].append(masked_metric(ssim, g[t], r[t], m))
        per_frame["masked_psnr"].append(masked_metric(psnr, g[t], r[t], m))
        per_frame["lpips"].append(lpips_proxy(g[t], r[t], extractor))
    scores = {k: float(np.mean(v)) for k, v in per_frame.items()}
    scores["tcm"] = temporal_consistency(g, sq.flows_next)
    if n >= 2:
        scores["fid"] = fid_proxy(g, r, extractor)
    return MetricReport(scores=scores, per_frame=per_frame)


def aggregate_reports(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to aggregate")
    keys = reports[0].scores.keys()
    scores = {k: float(np.mean([r.scores[k] for r in reports])) for k in keys}
    per_frame: dict[str, list[float]] = {}
    for r in reports:
        for k, v in r.per_frame.items():
            per_frame.setdefault(k, []).extend(v)
    return MetricReport(scores=scores, per_frame=per_frame)


def write_report(report: MetricReport, text_path: str | Path) -> Path:
    """Write the text report plus a sibling .json with the per-frame breakdown."""
    text_path = Path(text_path)
    text_path.parent.mkdir(parents=True, exist_ok=True)
    text_path.write_text(report.format_text())
    json_path = text_path.with_suffix(".json")
    json_path.write_text(json.dumps(report.to_json(), indent=2))
    return json_path


def evaluate_bundle(bundle: ModelBundle, seqs: list[SequenceTensors],
                    pose_lists: list[list[PoseSample]],
                    extractor: PerceptualExtractor | None = None,
                    **flags) -> MetricReport:
    """Self-reenact every sequence and average the reports."""
    extractor = extractor or PerceptualExtractor(bundle.cfg.perceptual_seed)
    reports = []
    for sq, poses in zip(seqs, pose_lists):
        result = reenact_sequence(bundle, sq, poses, **flags)
        reports.append(evaluate_frames(result.frames, sq, extractor))
    return aggregate_reports(reports)


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_VARIANTS = ("full", "no_gam", "no_tam", "no_wcn")


def run_ablation(cfg: TrainConfig, out_root: str | Path) -> dict:
    """Train per seed, evaluate the variant grid, and write per-variant reports.

    no_gam and no_wcn reuse the fully trained model with the module switched
    off at inference; no_tam also retrains stage 2 so the compositor never saw
    the correspondence features.
    """
    out = Path(out_root)
    out.mkdir(parents=True, exist_ok=True)
    train_loaded = load_dataset(cfg.train_dir)
    test_loaded = load_dataset(cfg.test_dir)
    summary: dict = {"variants": list(ABLATION_VARIANTS), "seeds": {}}

    for seed in cfg.ablate_seeds:
        cfg_seed = replace(cfg, seed=seed)
        train_seqs = [build_sequence_tensors(sq, cfg_seed) for sq in train_loaded]
        test_seqs = [build_sequence_tensors(sq, cfg_seed) for sq in test_loaded]
        pose_lists = [sq.poses for sq in test_loaded]
        seed_dir = out / f"seed{seed}"

        full_dir = seed_dir / "full"
        full_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg_seed, full_dir / "config.txt")
        train_stage1(cfg_seed, train_seqs, full_dir)
        train_stage2(cfg_seed, train_seqs, full_dir)

        notam_cfg = replace(cfg_seed, no_tam=True)
        notam_dir = seed_dir / "no_tam"
        notam_dir.mkdir(parents=True, exist_ok=True)
        save_config(notam_cfg, notam_dir / "config.txt")
        for name in ("layout.ckpt", "region.ckpt"):
            (notam_dir / name).write_bytes((full_dir / name).read_bytes())
        train_stage2(notam_cfg, train_seqs, notam_dir, stage1_dir=full_dir)

        bundle_full = load_models(full_dir)
        bundle_notam = load_models(notam_dir)
        extractor = PerceptualExtractor(cfg_seed.perceptual_seed)
        variant_scores = {}
        for variant in ABLATION_VARIANTS:
            if variant == "no_tam":
                report = evaluate_bundle(bundle_notam, test_seqs, pose_lists, extractor)
            else:
                flags = {variant: True} if variant != "full" else {}
                report = evaluate_bundle(bundle_full, test_seqs, pose_lists,
                                         extractor, **flags)
            write_report(report, seed_dir / variant / "report.txt")
            variant_scores[variant] = report.scores
        summary["seeds"][str(seed)] = {v: s["masked_ssim"]
                                       for v, s in variant_scores.items()}

    orderings = [s["full"] >= s["no_tam"] >= s["no_wcn"]
                 for s in summary["seeds"].values()]
    summary["ordering_holds"] = orderings
    summary["ordering_count"] = int(sum(orderings))
    (out / "summary.json").write_text(json.dumps(summary, indent=2))

    lines = ["seed  " + "  ".join(f"{v:>11}" for v in ABLATION_VARIANTS)]
    for seed, scores in summary["seeds"].items():
        lines.append(f"{seed:>4}  " +
                     "  ".join(f"{scores[v]:11.4f}" for v in ABLATION_VARIANTS))
    (out / "table.txt").write_text("\n".join(lines) + "\n")
    return summary
