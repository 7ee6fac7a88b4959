"""End-to-end inference: the network bundle, per-point feature plumbing,
occupancy field evaluation over a voxel grid, mesh extraction, and texture.

Geometry path per query point: bind to the target-pose body, carry the point
into each selected reference frame, sample pixel-aligned features there
(plus a visibility mask channel), fuse across frames with the transformer
queried by the target-frame image + geometry embedding, and decode occupancy.
At inference the shift head runs one refinement pass: predicted shifts
correct the warped positions, features are re-fetched there, and occupancy
is queried again (config toggle ``shift_refetch``).
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .binding import BoundPointSet, PartAdjacency, bind_points, default_bind_sigma, make_voxel_grid, warp_points
from .bodymodel import BodyModel, BodyParams, PosedBody, skin
from .features import (
    GeometryEncoder, GeometryVolume, ImageEncoder, body_occupancy_grid,
    build_geometry_volume, encode_image, sample_geometry, sample_pixel_aligned,
)
from .fusion import ColorHead, MftConfig, OccupancyHead, ShiftHead, make_decoder, make_encoder
from .mcubes import GridGeometry, marching_cubes
from .mesh import Mesh
from .sequence import SequenceStore, select_reference_frames


class ReconNet(nn.Module):
    """All learned components: image/geometry encoders, the fusion
    transformer, the occupancy and shift heads, and a separate texture path
    (its own image encoder and fusion weights at twice the model dim)."""

    def __init__(self, cfg: MftConfig, n_parts: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.n_parts = n_parts
        C, G = cfg.image_channels, cfg.geom_channels
        self.image_encoder = ImageEncoder(C, rng, width=cfg.encoder_width)
        self.geom_encoder = GeometryEncoder(1 + n_parts, G, rng, width=cfg.geom_encoder_width)
        self.frame_encoder = make_encoder(C + 1, cfg, rng)
        self.point_decoder = make_decoder(C + G, cfg, rng)
        self.occ_head = OccupancyHead(cfg, rng)
        self.shift_head = ShiftHead(cfg, rng)

        tex_cfg = dataclasses.replace(cfg, model_dim=cfg.texture_dim,
                                      encoder_layers=cfg.encoder_layers,
                                      heads=cfg.heads)
        self.tex_image_encoder = ImageEncoder(C, rng, width=cfg.encoder_width)
        self.tex_frame_encoder = make_encoder(2 * C + 1, tex_cfg, rng)
        self.tex_point_decoder = make_decoder(2 * C + G, tex_cfg, rng, dim=cfg.texture_dim)
        self.color_head = ColorHead(cfg, rng)


def make_model(cfg: MftConfig, n_parts: int, seed: int) -> ReconNet:
    return ReconNet(cfg, n_parts, np.random.default_rng(seed))


def save_model(model: ReconNet, path, meta: dict | None = None):
    info = {"config": model.cfg.to_dict(), "n_parts": model.n_parts}
    info.update(meta or {})
    nn.save_checkpoint(path, model.state_dict(), info)


def load_model(path) -> tuple[ReconNet, dict]:
    arrays, meta = nn.load_checkpoint(path)
    cfg = MftConfig.from_dict(meta["config"])
    model = make_model(cfg, int(meta["n_parts"]), seed=0)
    model.load_state_dict(arrays)
    return model, meta


@dataclass
class FrameContext:
    """Pose-derived per-frame data that training and inference reuse:
    skinned bodies under the stored poses, binding kernel widths, and the
    raw geometry occupancy grids."""

    body: BodyModel
    posed: list[PosedBody]
    sigma: list[float]
    geo_grids: list[np.ndarray]
    geo_boxes: list[tuple]
    adjacency: PartAdjacency

    @staticmethod
    def build(body: BodyModel, store: SequenceStore, geom_resolution: int) -> "FrameContext":
        posed, sigma, grids, boxes = [], [], [], []
        for f in store.frames:
            p = skin(body, f.params())
            posed.append(p)
            sigma.append(default_bind_sigma(body, p))
            grid, lo, hi = body_occupancy_grid(p, body, geom_resolution)
            grids.append(grid)
            boxes.append((lo, hi))
        return FrameContext(body, posed, sigma, grids, boxes, PartAdjacency.from_body(body))


def encode_frames(model: ReconNet, store: SequenceStore, images: list,
                  frames: list[int], texture: bool = False) -> dict:
    """Feature maps for the requested frames; recomputed per training step,
    cached once for whole-grid inference."""
    encoder = model.tex_image_encoder if texture else model.image_encoder
    return {k: encode_image(encoder, images[k], store[k].camera) for k in frames}


def geometry_volume_for(model: ReconNet, ctx: FrameContext, target: int) -> GeometryVolume:
    return build_geometry_volume(ctx.posed[target], ctx.body, model.geom_encoder,
                                 model.cfg.geom_resolution, grid=ctx.geo_grids[target],
                                 box=ctx.geo_boxes[target])


def warp_to_references(ctx: FrameContext, store: SequenceStore, bound: BoundPointSet,
                       target: int, refs: list[int]) -> list[np.ndarray]:
    beta = store[target].beta
    out = []
    for r in refs:
        out.append(warp_points(bound, ctx.body, beta,
                               store[target].theta, store[r].theta,
                               posed_src=ctx.posed[target], posed_dst=ctx.posed[r]))
    return out


def _frame_feature_rows(fmaps: dict, refs: list[int], warped: list[np.ndarray]) -> Tensor:
    rows = []
    for r, pts in zip(refs, warped):
        feats, in_view = sample_pixel_aligned(fmaps[r], pts)
        mask = Tensor(in_view.astype(np.float32)[:, None])
        rows.append(ad.concat([feats, mask], axis=1))
    return ad.stack(rows, axis=1)          # (B, N, C+1)


def fuse_points(model: ReconNet, fmaps: dict, geom_vol: GeometryVolume,
                target: int, refs: list[int], points_target: np.ndarray,
                warped: list[np.ndarray]):
    """Shared fusion trunk: returns (e_o, e_s, psi) for a point batch."""
    phi_t, _ = sample_pixel_aligned(fmaps[target], points_target)
    psi, _ = sample_geometry(geom_vol, points_target)
    frame_feats = _frame_feature_rows(fmaps, refs, warped)
    encoded = model.frame_encoder(frame_feats)
    e_o, e_s = model.point_decoder(encoded, ad.concat([phi_t, psi], axis=1))
    return e_o, e_s, psi


def predict_occupancy_batch(model: ReconNet, fmaps: dict, geom_vol: GeometryVolume,
                            target: int, refs: list[int], points_target: np.ndarray,
                            warped: list[np.ndarray], shift_steps: int | None = None):
    e_o, e_s, psi = fuse_points(model, fmaps, geom_vol, target, refs, points_target, warped)
    occ = model.occ_head(e_o, psi)
    shift, trace = model.shift_head(e_s, steps=shift_steps)
    return occ, shift, trace, psi


@dataclass
class ReconstructionReport:
    reference_frames: list[int]
    resolution: int
    timings: dict = field(default_factory=dict)
    field_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"reference_frames": self.reference_frames, "resolution": self.resolution,
                "timings": {k: round(v, 4) for k, v in self.timings.items()},
                "field_stats": self.field_stats}


def evaluate_field(model: ReconNet, body: BodyModel, store: SequenceStore, images: list,
                   target: int, resolution: int, refs: list[int] | None = None,
                   n_refs: int = 4, batch: int = 8192, margin: float = 0.1,
                   shift_correct: bool = True, shift_refetch: bool = True,
                   ctx: FrameContext | None = None) -> tuple[np.ndarray, GridGeometry, ReconstructionReport]:
    """Occupancy over a voxel grid around the target-pose body.

    Points with no valid binding get occupancy 0. When the shift head is
    active, its predicted warp error is subtracted from the warped positions
    and features are re-fetched once for the final occupancy query.
    """
    t0 = time.perf_counter()
    if not (0 <= target < len(store)):
        raise ValueError(f"target frame {target} out of range for {len(store)} frames")
    if ctx is None:
        ctx = FrameContext.build(body, store, model.cfg.geom_resolution)
    if refs is None:
        refs = select_reference_frames(store, target, n_refs)
    if any(not (0 <= r < len(store)) for r in refs):
        raise ValueError("reference frame index out of range")

    grid_batch = make_voxel_grid(ctx.posed[target], resolution, margin=margin)
    geom = grid_batch.grid_geometry
    points = grid_batch.points
    values = np.zeros(len(points), dtype=np.float32)
    t_grid = time.perf_counter()

    with ad.no_grad():
        fmaps = encode_frames(model, store, images, sorted(set(refs + [target])))
        geom_vol = geometry_volume_for(model, ctx, target)
        t_feat = time.perf_counter()

        bound_all = bind_points(points, ctx.posed[target], body, ctx.adjacency, ctx.sigma[target])
        valid_idx = np.flatnonzero(bound_all.valid)
        t_bind = time.perf_counter()

        for start in range(0, len(valid_idx), batch):
            sel = valid_idx[start:start + batch]
            sub = BoundPointSet(points[sel], bound_all.nearest[sel],
                                bound_all.bind_weights[sel], np.ones(len(sel), dtype=bool))
            warped = warp_to_references(ctx, store, sub, target, refs)
            occ, shift, _, _ = predict_occupancy_batch(
                model, fmaps, geom_vol, target, refs, points[sel], warped)
            if shift_correct:
                corrected = [w - shift.data for w in warped]
                if shift_refetch:
                    occ, _, _, _ = predict_occupancy_batch(
                        model, fmaps, geom_vol, target, refs, points[sel], corrected,
                        shift_steps=1)
            values[sel] = occ.data.astype(np.float32)
    t_eval = time.perf_counter()

    report = ReconstructionReport(
        reference_frames=list(refs), resolution=resolution,
        timings={"grid": t_grid - t0, "features": t_feat - t_grid,
                 "binding": t_bind - t_feat, "field": t_eval - t_bind},
        field_stats={"valid_fraction": float(bound_all.valid.mean()),
                     "mean": float(values.mean()), "max": float(values.max())})
    return values.reshape(resolution, resolution, resolution), geom, report


def reconstruct_frame(model: ReconNet, body: BodyModel, store: SequenceStore, images: list,
                      target: int, resolution: int, threshold: float = 0.5,
                      **kwargs) -> tuple[Mesh, ReconstructionReport]:
    values, geom, report = evaluate_field(model, body, store, images, target, resolution, **kwargs)
    t0 = time.perf_counter()
    mesh = marching_cubes(values, threshold, geom)
    report.timings["marching_cubes"] = time.perf_counter() - t0
    report.field_stats["vertices"] = mesh.n_vertices
    report.field_stats["faces"] = mesh.n_faces
    return mesh, report


def infer_texture(model: ReconNet, mesh: Mesh, body: BodyModel, store: SequenceStore,
                  images: list, target: int, refs: list[int] | None = None,
                  n_refs: int = 4, batch: int = 8192,
                  ctx: FrameContext | None = None) -> Mesh:
    """Per-vertex RGB through the texture path; vertices without a valid
    binding copy the color of the nearest validly-bound vertex."""
    if ctx is None:
        ctx = FrameContext.build(body, store, model.cfg.geom_resolution)
    if refs is None:
        refs = select_reference_frames(store, target, n_refs)
    colors = np.full((mesh.n_vertices, 3), 0.5, dtype=np.float64)

    with ad.no_grad():
        frames = sorted(set(refs + [target]))
        geo_maps = encode_frames(model, store, images, frames, texture=False)
        tex_maps = encode_frames(model, store, images, frames, texture=True)
        geom_vol = geometry_volume_for(model, ctx, target)
        bound = bind_points(mesh.vertices, ctx.posed[target], body, ctx.adjacency, ctx.sigma[target])
        valid_idx = np.flatnonzero(bound.valid)

        for start in range(0, len(valid_idx), batch):
            sel = valid_idx[start:start + batch]
            sub = BoundPointSet(mesh.vertices[sel], bound.nearest[sel],
                                bound.bind_weights[sel], np.ones(len(sel), dtype=bool))
            warped = warp_to_references(ctx, store, sub, target, refs)
            colors[sel] = texture_forward(model, geo_maps, tex_maps, geom_vol,
                                          target, refs, mesh.vertices[sel], warped).data

    if len(valid_idx) and len(valid_idx) < mesh.n_vertices:
        invalid = np.flatnonzero(~bound.valid)
        tree = cKDTree(mesh.vertices[valid_idx])
        _, nn_idx = tree.query(mesh.vertices[invalid])
        colors[invalid] = colors[valid_idx[nn_idx]]
    return Mesh(mesh.vertices.copy(), mesh.faces.copy(), colors)


def texture_forward(model: ReconNet, geo_maps: dict, tex_maps: dict,
                    geom_vol: GeometryVolume, target: int, refs: list[int],
                    points_target: np.ndarray, warped: list[np.ndarray]) -> Tensor:
    """Color prediction for a point batch: per-frame geometry+texture
    features fused by the texture transformer, decoded against the target
    embedding, then the sigmoid RGB head."""
    rows = []
    for r, pts in zip(refs, warped):
        g, _ = sample_pixel_aligned(geo_maps[r], pts)
        tx, in_view = sample_pixel_aligned(tex_maps[r], pts)
        mask = Tensor(in_view.astype(np.float32)[:, None])
        rows.append(ad.concat([g, tx, mask], axis=1))
    frame_feats = ad.stack(rows, axis=1)
    phi_g, _ = sample_pixel_aligned(geo_maps[target], points_target)
    phi_x, _ = sample_pixel_aligned(tex_maps[target], points_target)
    psi, _ = sample_geometry(geom_vol, points_target)
    encoded = model.tex_frame_encoder(frame_feats)
    e_o_tex, _ = model.tex_point_decoder(encoded, ad.concat([phi_g, phi_x, psi], axis=1))
    return model.color_head(e_o_tex, psi)
