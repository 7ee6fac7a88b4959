"""Losses, noise injection, and the training loop.

Each step picks a target frame, samples labeled points on its ground-truth
mesh, binds them to the tracked body, warps them into the selected reference
poses, and injects one Gaussian noise shift per point into every warped
copy. The network predicts occupancy (supervised at the original,
pre-noise target positions) and the injected shift (supervised through the
per-step estimates of the iterative head). Total loss is the unweighted sum
of the two terms unless configured otherwise.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .binding import BoundPointSet, bind_points, sample_training_points
from .fusion import MftConfig
from .mesh import sample_surface_with_colors
from .pipeline import (
    FrameContext, ReconNet, encode_frames, geometry_volume_for, make_model,
    predict_occupancy_batch, save_model, texture_forward, warp_to_references,
)
from .sequence import precompute_selections
from .synthetic import SyntheticDataset


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, dump_path):
        super().__init__(f"loss became non-finite at step {step}; state dumped to {dump_path}")
        self.step = step
        self.dump_path = dump_path


@dataclass
class TrainConfig:
    seed: int = 1
    steps: int = 2000
    points_surface: int = 480
    points_uniform: int = 160
    sample_sigma: float = 0.02        # surface-offset std, model units
    noise_std: float = 0.02           # injected warp-noise std, model units
    lr: float = 1e-3                  # 2e-3 sits on a stability cliff for this net
    lr_decay: bool = True             # cosine decay to a tenth of the base rate
    warmup_steps: int = 100           # linear lr ramp; avoids early slow-learning basins
    grad_clip: float = 5.0            # global gradient-norm ceiling (0 disables)
    beta1: float = 0.9
    beta2: float = 0.999
    w_occupancy: float = 1.0
    w_shift: float = 1.0
    n_refs: int = 4
    use_shift: bool = True            # train the refinement head (and use it at inference)
    log_every: int = 25
    checkpoint_every: int = 1000
    texture_steps: int = 0
    preset: str = "desk"

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


# -- losses -------------------------------------------------------------------

def occupancy_loss(pred: Tensor, labels: np.ndarray) -> Tensor:
    """Mean absolute error between predicted and ground-truth occupancy."""
    labels = np.asarray(labels, dtype=np.float32).reshape(-1)
    if pred.shape != labels.shape:
        raise ValueError("occupancy prediction/label shape mismatch")
    return ad.mean(ad.abs_(pred - Tensor(labels)))


def shift_loss(pred_steps: list[Tensor], noise: np.ndarray) -> Tensor:
    """Refinement loss: per-step mean |estimate - injected noise|, summed
    over the iteration's steps. The mean runs over points and coordinates."""
    noise_t = Tensor(np.asarray(noise, dtype=np.float32))
    total = None
    for step_estimate in pred_steps:
        term = ad.mean(ad.abs_(step_estimate - noise_t))
        total = term if total is None else total + term
    return total


def inject_noise(points: np.ndarray, std: float, rng: np.random.Generator):
    """Per-point per-axis Gaussian displacement; returns (shifted, noise)."""
    if std < 0:
        raise ValueError("noise std must be nonnegative")
    points = np.asarray(points, dtype=np.float64)
    noise = rng.normal(0.0, std, size=points.shape) if std > 0 else np.zeros_like(points)
    return points + noise, noise


# -- training loop ---------------------------------------------------------------

def training_selections(store, n_refs: int) -> dict[int, list[int]]:
    """Reference frames per target; tiny sequences degrade gracefully: with
    too few frames the available ones repeat (a 1-frame dataset references
    itself), so single-frame overfitting still runs."""
    if len(store) > n_refs:
        return precompute_selections(store, n_refs)
    out = {}
    for t in range(len(store)):
        pool = [j for j in range(len(store)) if j != t] or [t]
        refs = [pool[i % len(pool)] for i in range(n_refs)]
        out[t] = refs
    return out


def train(config: TrainConfig, dataset: SyntheticDataset, out_dir,
          mft: MftConfig | None = None, model: ReconNet | None = None) -> Path:
    """Optimize the geometry path on one dataset; returns the checkpoint path.

    Writes ``train_log.csv`` (step, L_o, L_s, L) and periodic checkpoints
    under ``out_dir``. A non-finite loss aborts with a state dump.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if mft is None:
        mft = MftConfig.full() if config.preset == "full" else MftConfig.desk()
    body, store, images = dataset.body, dataset.store, dataset.images
    if len(store) == 0:
        raise ValueError("dataset is empty")
    if model is None:
        model = make_model(mft, body.n_parts, config.seed)

    rng = np.random.default_rng(config.seed)
    ctx = FrameContext.build(body, store, mft.geom_resolution)
    selections = training_selections(store, config.n_refs)
    opt = nn.Adam(model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2))

    log_rows = []
    final_l_o = final_l_s = float("nan")
    meta = {"train_config": config.to_dict(), "seed": config.seed}

    for step in range(config.steps):
        target = int(rng.integers(0, len(store)))
        refs = selections[target]
        batch = sample_training_points(
            dataset.gt_meshes[target], config.points_surface, config.points_uniform,
            sigma=config.sample_sigma, rng_seed=config.seed * 1_000_003 + step)
        bound = bind_points(batch.points, ctx.posed[target], body, ctx.adjacency,
                            ctx.sigma[target])
        keep = np.flatnonzero(bound.valid)      # ignored points drop out of the loss
        if len(keep) == 0:
            log_rows.append((step, float("nan"), float("nan"), float("nan")))
            continue
        sub = BoundPointSet(batch.points[keep], bound.nearest[keep],
                            bound.bind_weights[keep], np.ones(len(keep), dtype=bool))
        labels = batch.occupancy_labels[keep]
        warped = warp_to_references(ctx, store, sub, target, refs)
        # one noise vector per point, shared across every reference copy
        noisy_first, noise = inject_noise(warped[0], config.noise_std, rng)
        noisy = [noisy_first] + [w + noise for w in warped[1:]]

        model.zero_grad()
        fmaps = encode_frames(model, store, images, sorted(set(refs + [target])))
        geom_vol = geometry_volume_for(model, ctx, target)
        occ, _, trace, _ = predict_occupancy_batch(
            model, fmaps, geom_vol, target, refs, batch.points[keep], noisy)

        l_o = occupancy_loss(occ, labels)
        if config.use_shift and config.w_shift != 0:
            l_s = shift_loss(trace, noise)
            loss = l_o * config.w_occupancy + l_s * config.w_shift
        else:
            l_s = None
            loss = l_o * config.w_occupancy

        l_o_val = float(l_o.data)
        l_s_val = float(l_s.data) if l_s is not None else 0.0
        loss_val = float(loss.data)
        if not np.isfinite(loss_val):
            dump = out_dir / "diverged.ckpt"
            save_model(model, dump, {**meta, "step": step, "status": "diverged"})
            _write_log(out_dir, log_rows)
            raise TrainingDiverged(step, dump)

        loss.backward()
        if config.grad_clip > 0:
            total = np.sqrt(sum(float((p.grad ** 2).sum())
                                for p in model.parameters() if p.grad is not None))
            if total > config.grad_clip:
                scale = config.grad_clip / total
                for p in model.parameters():
                    if p.grad is not None:
                        p.grad = p.grad * scale
        lr_now = config.lr
        if config.lr_decay:
            lr_now *= 0.1 + 0.45 * (1.0 + np.cos(np.pi * step / config.steps))
        if config.warmup_steps > 0 and step < config.warmup_steps:
            lr_now *= (step + 1) / config.warmup_steps
        opt.lr = lr_now
        opt.step()
        final_l_o, final_l_s = l_o_val, l_s_val
        if step % config.log_every == 0 or step == config.steps - 1:
            log_rows.append((step, l_o_val, l_s_val, loss_val))
        if config.checkpoint_every and step and step % config.checkpoint_every == 0:
            save_model(model, out_dir / f"step_{step:06d}.ckpt", {**meta, "step": step})

    if config.texture_steps > 0:
        train_texture(model, config, dataset, config.texture_steps, ctx=ctx)

    ckpt = out_dir / "model.ckpt"
    save_model(model, ckpt, {**meta, "step": config.steps,
                             "final_l_o": final_l_o, "final_l_s": final_l_s})
    _write_log(out_dir, log_rows)
    (out_dir / "train_meta.json").write_text(json.dumps(
        {"final_l_o": final_l_o, "final_l_s": final_l_s, "steps": config.steps},
        sort_keys=True) + "\n")
    return ckpt


def _write_log(out_dir: Path, rows):
    with open(out_dir / "train_log.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "L_o", "L_s", "L"])
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])


def train_texture(model: ReconNet, config: TrainConfig, dataset: SyntheticDataset,
                  steps: int, ctx: FrameContext | None = None,
                  batch_points: int = 256) -> float:
    """Fit the texture path (its encoders, fusion, and color head) with an L1
    loss against ground-truth vertex colors sampled on the true surface.
    Geometry-path weights stay frozen. Returns the final loss."""
    body, store, images = dataset.body, dataset.store, dataset.images
    if dataset.gt_meshes[0].colors is None:
        raise ValueError("texture training needs colored ground-truth meshes")
    if ctx is None:
        ctx = FrameContext.build(body, store, model.cfg.geom_resolution)
    rng = np.random.default_rng(config.seed + 7919)
    selections = precompute_selections(store, config.n_refs)
    tex_params = (list(model.tex_image_encoder.parameters())
                  + list(model.tex_frame_encoder.parameters())
                  + list(model.tex_point_decoder.parameters())
                  + list(model.color_head.parameters()))
    opt = nn.Adam(tex_params, lr=config.lr)
    final = float("nan")
    for step in range(steps):
        target = int(rng.integers(0, len(store)))
        refs = selections[target]
        pts, gt_colors = sample_surface_with_colors(
            dataset.gt_meshes[target], batch_points, rng)
        bound = bind_points(pts, ctx.posed[target], body, ctx.adjacency, ctx.sigma[target])
        keep = np.flatnonzero(bound.valid)
        if len(keep) == 0:
            continue
        sub = BoundPointSet(pts[keep], bound.nearest[keep],
                            bound.bind_weights[keep], np.ones(len(keep), dtype=bool))
        warped = warp_to_references(ctx, store, sub, target, refs)

        model.zero_grad()
        frames = sorted(set(refs + [target]))
        geo_maps = encode_frames(model, store, images, frames, texture=False)
        tex_maps = encode_frames(model, store, images, frames, texture=True)
        geom_vol = geometry_volume_for(model, ctx, target)
        pred = texture_forward(model, geo_maps, tex_maps, geom_vol, target, refs,
                               pts[keep], warped)
        loss = ad.mean(ad.abs_(pred - Tensor(gt_colors[keep].astype(np.float32))))
        final = float(loss.data)
        loss.backward()
        opt.step()
    return final
