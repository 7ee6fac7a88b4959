"""Gradient verification suite: every differentiable operation plus each
composed head, checked against central finite differences over many seeds.

Ops run exhaustively at small random shapes; the wide composed heads run at
desk-preset channel widths with a capped per-tensor element probe so the
whole suite stays inside a few minutes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .bodymodel import generate_mini_body
from .features import GeometryEncoder, ImageEncoder
from .fusion import ColorHead, MftConfig, MftDecoder, MftEncoder, OccupancyHead, ShiftHead
from .registration import skinned_vertices_t


@dataclass
class SuiteResult:
    checks: dict = field(default_factory=dict)   # name -> max rel err over seeds
    tolerance: float = 1e-3
    seeds: int = 10

    @property
    def passed(self) -> bool:
        return all(v < self.tolerance for v in self.checks.values())

    @property
    def max_rel_err(self) -> float:
        return max(self.checks.values(), default=0.0)

    def failures(self) -> list[str]:
        return [k for k, v in self.checks.items() if v >= self.tolerance]

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "seeds": self.seeds,
                "passed": self.passed, "max_rel_err": self.max_rel_err,
                "checks": {k: float(v) for k, v in sorted(self.checks.items())}}


def _op_checks(seed: int) -> dict:
    r = np.random.default_rng(seed)
    cfg = MftConfig(image_channels=8, geom_channels=4, model_dim=8, heads=2,
                    occupancy_hidden=(16, 8), shift_hidden=(16, 8), color_hidden=(16, 8))
    checks = {}

    lin = nn.Linear(5, 4, r)
    checks["op.linear"] = nn.grad_check(lin, [r.standard_normal((3, 5))], seed=seed)

    checks["op.matmul_batched"] = nn.grad_check(
        None, [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 2))],
        forward=lambda ts: ad.matmul(ts[0], ts[1]), seed=seed)

    conv2 = nn.Conv2d(2, 3, 3, r, stride=2, padding=1)
    checks["op.conv2d"] = nn.grad_check(conv2, [r.standard_normal((1, 2, 5, 5))], seed=seed)

    conv3 = nn.Conv3d(2, 2, 3, r, stride=1, padding=1)
    checks["op.conv3d"] = nn.grad_check(conv3, [r.standard_normal((1, 2, 4, 4, 4))], seed=seed)

    mha = nn.MultiHeadAttention(8, 2, r)
    x = r.standard_normal((2, 3, 8))
    checks["op.multi_head_attention"] = nn.grad_check(mha, [x, x, x], seed=seed)

    ln = nn.LayerNorm(6)
    checks["op.layer_norm"] = nn.grad_check(ln, [r.standard_normal((4, 6))], seed=seed)

    checks["op.softmax_chain"] = nn.grad_check(
        None, [r.standard_normal((3, 5))],
        forward=lambda ts: ad.softmax(ts[0] * 2.0, axis=-1), seed=seed)

    def elementwise(ts):
        t = ts[0]
        y = ad.exp(ad.log(t) * 0.3) + ad.sqrt(t) * ad.sin(t) - ad.cos(t) / (t + 1.0)
        return ad.mean(ad.tanh(y) + ad.sigmoid(y) + ad.leaky_relu(y, 0.01) + ad.abs_(y), axis=0)

    checks["op.elementwise_chain"] = nn.grad_check(
        None, [r.uniform(0.5, 4.0, (3, 4))], forward=elementwise, seed=seed)

    idx = r.integers(0, 3, 4)
    checks["op.shape_and_gather"] = nn.grad_check(
        None, [r.standard_normal((3, 4)), r.standard_normal((3, 4))],
        forward=lambda ts: ad.sum_(ad.concat([ts[0], ts[1]], axis=1) ** 2.0)
        + ad.sum_(ad.stack([ts[0], ts[1]], axis=0) * 0.5)
        + ad.sum_(ad.take(ts[0], idx) * ad.take(ts[1], idx)), seed=seed)
    return checks


def _head_checks(seed: int, cap: int) -> dict:
    r = np.random.default_rng(seed)
    cfg = MftConfig.desk()
    checks = {}
    kw = dict(seed=seed, max_elements_per_tensor=cap)

    enc = ImageEncoder(cfg.image_channels, r, width=cfg.encoder_width)
    checks["head.image_encoder"] = nn.grad_check(enc, [r.standard_normal((1, 3, 8, 8))], **kw)

    geo = GeometryEncoder(6, cfg.geom_channels, r, width=cfg.geom_encoder_width)
    checks["head.geometry_encoder"] = nn.grad_check(geo, [r.standard_normal((1, 6, 6, 6, 6))], **kw)

    menc = MftEncoder(cfg.image_channels + 1, cfg, r)
    checks["head.mft_encoder"] = nn.grad_check(
        menc, [r.standard_normal((2, 3, cfg.image_channels + 1))], **kw)

    mdec = MftDecoder(cfg.image_channels + cfg.geom_channels, cfg, r)
    checks["head.mft_decoder"] = nn.grad_check(
        None, [r.standard_normal((2, 3, cfg.model_dim)),
               r.standard_normal((2, cfg.image_channels + cfg.geom_channels))],
        forward=lambda ts: mdec(ts[0], ts[1])[0], **kw)

    occ = OccupancyHead(cfg, r)
    occ.mlp.layers[-1].weight.data[:] = r.standard_normal(
        occ.mlp.layers[-1].weight.shape).astype(np.float32) * 0.2
    checks["head.occupancy"] = nn.grad_check(
        None, [r.standard_normal((3, cfg.model_dim)), r.standard_normal((3, cfg.geom_channels))],
        forward=lambda ts: occ(ts[0], ts[1]), **kw)

    shift = ShiftHead(cfg, r)
    shift.mlp.layers[-1].weight.data[:] = r.standard_normal(
        shift.mlp.layers[-1].weight.shape).astype(np.float32) * 0.2
    checks["head.shift_ief"] = nn.grad_check(
        None, [r.standard_normal((2, 3, cfg.model_dim))],
        forward=lambda ts: shift(ts[0])[0], **kw)

    color = ColorHead(cfg, r)
    color.mlp.layers[-1].weight.data[:] = r.standard_normal(
        color.mlp.layers[-1].weight.shape).astype(np.float32) * 0.2
    checks["head.color"] = nn.grad_check(
        None, [r.standard_normal((3, cfg.texture_dim)), r.standard_normal((3, cfg.geom_channels))],
        forward=lambda ts: color(ts[0], ts[1]), **kw)
    return checks


_LBS_BODY = None


def _lbs_check(seed: int) -> float:
    global _LBS_BODY
    if _LBS_BODY is None:
        _LBS_BODY = generate_mini_body(subdivisions=1)
    body = _LBS_BODY
    r = np.random.default_rng(seed)
    report = nn.grad_check(
        None, [r.uniform(-0.5, 0.5, (body.n_joints, 3)), r.uniform(-0.2, 0.2, 3),
               r.uniform(-1, 1, body.n_shape)],
        forward=lambda ts: skinned_vertices_t(body, ts[0], ts[1], ts[2])[0], seed=seed)
    return report


def run_grad_suite(seeds: int = 10, tolerance: float = 1e-3, h: float = 1e-3,
                   cap: int = 160, heads_every: int = 5,
                   progress=None) -> SuiteResult:
    """Run all checks over ``seeds`` seeds; ops every seed, the wide composed
    heads every ``heads_every``-th seed (they dominate runtime)."""
    result = SuiteResult(tolerance=tolerance, seeds=seeds)
    for s in range(seeds):
        groups = dict(_op_checks(1000 + s))
        if s % heads_every == 0:
            groups.update(_head_checks(2000 + s, cap))
            groups["head.registration_lbs"] = _lbs_check(3000 + s)
        for name, rep in groups.items():
            result.checks[name] = max(result.checks.get(name, 0.0), rep.max_rel_err)
            if progress:
                progress(f"seed {s} {name}: {rep.max_rel_err:.2e}")
    return result
