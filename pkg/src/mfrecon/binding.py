"""Binding free-space points to the posed body and carrying them through
body motion, plus the point samplers used for training and grid evaluation.

A point binds to its three nearest body vertices with Gaussian weights. If
the three vertices span parts that are not mutually identical or adjacent,
or touch a masked extremity part (hands, feet), the point is ignored:
training drops it from the loss and grid evaluation assigns occupancy 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .bodymodel import BodyModel, BodyParams, PosedBody, skin, _invert_transform
from .mcubes import GridGeometry
from .mesh import Mesh, contains_points, sample_surface


@dataclass
class PartAdjacency:
    adjacency: np.ndarray                 # (P, P) bool, symmetric, diagonal true
    masked_parts: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=bool)
        if not np.array_equal(self.adjacency, self.adjacency.T):
            raise ValueError("part adjacency must be symmetric")
        if not self.adjacency.diagonal().all():
            raise ValueError("part adjacency diagonal must be true")
        self.masked_parts = frozenset(int(p) for p in self.masked_parts)

    @property
    def n_parts(self) -> int:
        return len(self.adjacency)

    @staticmethod
    def from_body(body: BodyModel) -> "PartAdjacency":
        return PartAdjacency(body.part_adjacency.copy(), body.masked_parts)


@dataclass
class BoundPointSet:
    points: np.ndarray        # (N, 3) positions in the binding pose
    nearest: np.ndarray       # (N, 3) bound vertex indices
    bind_weights: np.ndarray  # (N, 3) normalized weights; zeros when invalid
    valid: np.ndarray         # (N,) bool

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class SampleBatch:
    points: np.ndarray
    occupancy_labels: np.ndarray | None = None
    source: str = "uniform"
    grid_geometry: GridGeometry | None = None

    def __len__(self) -> int:
        return len(self.points)

    def dump(self, path):
        """Debug dump: magic XSMP1, point count and label flag as little-endian
        int32, float32 points, then float32 labels when present."""
        import struct
        with open(path, "wb") as f:
            f.write(b"XSMP1\x00")
            has_labels = self.occupancy_labels is not None
            f.write(struct.pack("<2i", len(self.points), int(has_labels)))
            f.write(np.ascontiguousarray(self.points, dtype="<f4").tobytes())
            if has_labels:
                f.write(np.ascontiguousarray(self.occupancy_labels, dtype="<f4").tobytes())

    @staticmethod
    def load(path) -> "SampleBatch":
        import struct
        raw = open(path, "rb").read()
        if raw[:6] != b"XSMP1\x00":
            raise ValueError("not a sample batch dump")
        n, has_labels = struct.unpack("<2i", raw[6:14])
        points = np.frombuffer(raw[14:14 + n * 12], dtype="<f4").reshape(n, 3).astype(np.float64)
        labels = None
        if has_labels:
            labels = np.frombuffer(raw[14 + n * 12:14 + n * 16], dtype="<f4").astype(np.float64)
        return SampleBatch(points, labels, "dump")


def mean_edge_length(vertices: np.ndarray, faces: np.ndarray) -> float:
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    return float(np.linalg.norm(vertices[e[:, 0]] - vertices[e[:, 1]], axis=1).mean())


def default_bind_sigma(body: BodyModel, posed: PosedBody) -> float:
    """Kernel width defaulting to the posed mesh's mean edge length."""
    return mean_edge_length(posed.vertices, body.faces)


def bind_points(points: np.ndarray, posed: PosedBody, body: BodyModel,
                adj: PartAdjacency | None = None, sigma: float | None = None) -> BoundPointSet:
    """Bind each point to its 3 nearest posed vertices with Gaussian weights.

    Nearest neighbors come from an exact k-d tree; equal distances break
    toward the lower vertex index. The kernel is exp(-d^2 / (2 sigma^2)),
    normalized per point (computed shifted by the nearest distance so far
    points stay well-conditioned; the shift cancels in the normalization).
    """
    if adj is None:
        adj = PartAdjacency.from_body(body)
    if sigma is None:
        sigma = default_bind_sigma(body, posed)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    V = len(posed.vertices)
    if V < 3:
        raise ValueError("body must have at least 3 vertices to bind against")

    tree = cKDTree(posed.vertices)
    k = min(6, V)
    dist, idx = tree.query(points, k=k)
    dist = dist.reshape(len(points), k)
    idx = idx.reshape(len(points), k)
    # deterministic tie-break: sort by (distance, vertex index)
    order = np.lexsort((idx, dist), axis=1)
    rows = np.arange(len(points))[:, None]
    dist = dist[rows, order][:, :3]
    nearest = idx[rows, order][:, :3]

    parts = body.part_labels[nearest]
    masked = np.isin(parts, sorted(adj.masked_parts)).any(axis=1) if adj.masked_parts else \
        np.zeros(len(points), dtype=bool)
    compatible = (adj.adjacency[parts[:, 0], parts[:, 1]]
                  & adj.adjacency[parts[:, 1], parts[:, 2]]
                  & adj.adjacency[parts[:, 0], parts[:, 2]])
    valid = compatible & ~masked

    d2 = dist ** 2
    shifted = d2 - d2.min(axis=1, keepdims=True)
    w = np.exp(-shifted / (2.0 * sigma ** 2))
    w /= w.sum(axis=1, keepdims=True)
    w[~valid] = 0.0
    return BoundPointSet(points.copy(), nearest, w, valid)


def warp_points(bound: BoundPointSet, body: BodyModel, beta: np.ndarray,
                theta_src: np.ndarray, theta_dst: np.ndarray,
                translation_src: np.ndarray | None = None,
                translation_dst: np.ndarray | None = None,
                posed_src: PosedBody | None = None,
                posed_dst: PosedBody | None = None) -> np.ndarray:
    """Carry bound points from the source pose to the destination pose.

    Each valid point moves by the weight-blended composition of its bound
    vertices' warp matrices M(dst) @ inv(M(src)); invalid points pass through
    unchanged. Posed bodies may be supplied to reuse cached skinning.
    """
    zeros = np.zeros(3)
    if posed_src is None:
        posed_src = skin(body, BodyParams(theta_src, zeros if translation_src is None else translation_src, beta))
    if posed_dst is None:
        posed_dst = skin(body, BodyParams(theta_dst, zeros if translation_dst is None else translation_dst, beta))

    out = bound.points.copy()
    sel = np.flatnonzero(bound.valid)
    if len(sel) == 0:
        return out
    used = np.unique(bound.nearest[sel])
    inv_src = _invert_transform(posed_src.per_vertex_transforms[used])
    warp = posed_dst.per_vertex_transforms[used] @ inv_src
    lookup = np.full(len(posed_src.vertices), -1, dtype=np.int64)
    lookup[used] = np.arange(len(used))

    per_vertex = warp[lookup[bound.nearest[sel]]]          # (n, 3, 4, 4)
    blended = np.einsum("nk,nkab->nab", bound.bind_weights[sel], per_vertex)
    dets = np.abs(np.linalg.det(blended))
    if (dets < 1e-12).any():
        raise np.linalg.LinAlgError("singular blended warp transform")
    h = np.concatenate([bound.points[sel], np.ones((len(sel), 1))], axis=1)
    warped = np.einsum("nab,nb->na", blended, h)
    out[sel] = warped[:, :3] / warped[:, 3:]
    return out


def sample_training_points(gt_mesh: Mesh, n_surface: int, n_uniform: int,
                           sigma: float = 0.0005, rng_seed: int = 0,
                           box: tuple | None = None,
                           box_padding: float = 0.1) -> SampleBatch:
    """Surface-offset plus uniform-box samples with inside/outside labels.

    Surface points are drawn uniformly by area and displaced per axis by
    N(0, sigma); uniform points fill the padded bounding box (or an explicit
    ``box``). Labels come from the ray-parity inside test, so the mesh must
    be watertight.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if not gt_mesh.is_watertight():
        raise ValueError("ground-truth mesh must be watertight for inside/outside labels")
    rng = np.random.default_rng(rng_seed)
    chunks = []
    if n_surface > 0:
        pts, _ = sample_surface(gt_mesh, n_surface, rng)
        pts = pts + rng.normal(0.0, sigma, size=pts.shape) if sigma > 0 else pts
        chunks.append(pts)
    if n_uniform > 0:
        if box is None:
            lo, hi = gt_mesh.bounds()
            extent = hi - lo
            lo = lo - box_padding * extent
            hi = hi + box_padding * extent
        else:
            lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
        chunks.append(rng.uniform(lo, hi, size=(n_uniform, 3)))
    points = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
    labels = contains_points(gt_mesh, points).astype(np.float64)
    source = "surface-offset" if n_uniform == 0 else ("uniform" if n_surface == 0 else "mixed")
    return SampleBatch(points, labels, source)


def make_voxel_grid(posed: PosedBody, resolution: int, margin: float = 0.1) -> SampleBatch:
    """Lattice of resolution^3 points over the posed body's padded bounding
    box; row-major with z fastest, world position = origin + index * spacing."""
    if resolution < 2:
        raise ValueError("grid resolution must be at least 2")
    lo = posed.vertices.min(axis=0)
    hi = posed.vertices.max(axis=0)
    extent = hi - lo
    lo = lo - margin * extent
    hi = hi + margin * extent
    geom = GridGeometry.from_box(lo, hi, resolution)
    axes = [lo[a] + geom.spacing[a] * np.arange(resolution) for a in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    points = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    return SampleBatch(points, None, "voxel-grid", geom)
