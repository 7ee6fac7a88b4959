"""Isosurface extraction on a regular lattice via the 256-case cube tables.

Grid values are indexed ``values[ix, iy, iz]``; a lattice point sits at
``origin + index * spacing``. Inside means value > threshold; emitted
triangles face outward from the inside region. Crossing vertices are welded
deterministically through global per-axis edge indices (x edges first, then
y, then z, each in C order).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import Mesh
from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, EDGE_TABLE, TRI_TABLE

# local edge id -> (axis, cell offset of the edge's origin lattice point)
_EDGE_AXIS_OFFSET = (
    (0, 0, 0, 0), (1, 1, 0, 0), (0, 0, 1, 0), (1, 0, 0, 0),
    (0, 0, 0, 1), (1, 1, 0, 1), (0, 0, 1, 1), (1, 0, 0, 1),
    (2, 0, 0, 0), (2, 1, 0, 0), (2, 1, 1, 0), (2, 0, 1, 0),
)


@dataclass
class GridGeometry:
    """Maps lattice indices to world space: point(i) = origin + i * spacing."""

    origin: np.ndarray
    spacing: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.spacing = np.asarray(self.spacing, dtype=np.float64).reshape(3)

    @staticmethod
    def from_box(lo, hi, resolution: int) -> "GridGeometry":
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        return GridGeometry(lo, (hi - lo) / max(1, resolution - 1))

    def world(self, idx: np.ndarray) -> np.ndarray:
        return self.origin + np.asarray(idx, dtype=np.float64) * self.spacing


def _edge_crossings(values: np.ndarray, threshold: float, geom: GridGeometry, axis: int):
    """Interpolated crossing positions and a global vertex-id grid for one axis."""
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(0, -1)
    hi[axis] = slice(1, None)
    v1 = values[tuple(lo)]
    v2 = values[tuple(hi)]
    crossing = (v1 > threshold) != (v2 > threshold)
    idx_grid = np.full(v1.shape, -1, dtype=np.int64)
    ii, jj, kk = np.nonzero(crossing)
    idx_grid[ii, jj, kk] = np.arange(len(ii))
    a, b = v1[ii, jj, kk], v2[ii, jj, kk]
    t = (threshold - a) / (b - a)
    base = np.stack([ii, jj, kk], axis=1).astype(np.float64)
    pos = geom.world(base)
    pos[:, axis] += t * geom.spacing[axis]
    return pos, idx_grid


def marching_cubes(values: np.ndarray, threshold: float = 0.5,
                   geometry: GridGeometry | None = None) -> Mesh:
    """Extract the level set ``values == threshold`` as a welded triangle mesh.

    An all-inside or all-outside field yields an empty mesh. Degenerate
    (zero-area) triangles produced by on-lattice crossings are dropped.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3 or min(values.shape) < 2:
        raise ValueError("marching cubes needs a 3D grid of resolution >= 2 per axis")
    if geometry is None:
        geometry = GridGeometry(np.zeros(3), np.ones(3))

    px, ix = _edge_crossings(values, threshold, geometry, 0)
    py, iy = _edge_crossings(values, threshold, geometry, 1)
    pz, iz = _edge_crossings(values, threshold, geometry, 2)
    offsets = (0, len(px), len(px) + len(py))
    verts = np.concatenate([px, py, pz], axis=0) if len(px) + len(py) + len(pz) else np.zeros((0, 3))
    axis_grids = (ix, iy, iz)

    below = values <= threshold
    nx, ny, nz = values.shape
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for bit, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        case |= below[ox:ox + nx - 1, oy:oy + ny - 1, oz:oz + nz - 1].astype(np.int64) << bit

    active = np.argwhere((case != 0) & (case != 255))
    faces = []
    for i, j, k in active:
        tri_edges = TRI_TABLE[case[i, j, k]]
        ids = []
        for e in tri_edges:
            axis, di, dj, dk = _EDGE_AXIS_OFFSET[e]
            vid = axis_grids[axis][i + di, j + dj, k + dk]
            ids.append(vid + offsets[axis])
        for t in range(0, len(ids), 3):
            faces.append(ids[t:t + 3])

    if not faces:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    faces = np.asarray(faces, dtype=np.int64)

    # drop degenerate triangles (coincident welded vertices or zero area)
    distinct = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
                & (faces[:, 0] != faces[:, 2]))
    faces = faces[distinct]
    tri = verts[faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    faces = faces[areas > 1e-14]

    # keep only referenced vertices, preserving first-use order of the global ids
    used = np.unique(faces)
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return Mesh(verts[used], remap[faces])


def marching_cubes_reference(values: np.ndarray, threshold: float = 0.5,
                             geometry: GridGeometry | None = None) -> np.ndarray:
    """Plain per-cube reference: returns the raw (T, 3, 3) triangle soup.

    Walks every cube independently, interpolates its flagged edges into a
    local 12-slot list, and emits tri-table triangles without any welding.
    """
    values = np.asarray(values, dtype=np.float64)
    if geometry is None:
        geometry = GridGeometry(np.zeros(3), np.ones(3))
    nx, ny, nz = values.shape
    tris = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            for k in range(nz - 1):
                corners = np.array([(i + o[0], j + o[1], k + o[2]) for o in CORNER_OFFSETS])
                vals = values[corners[:, 0], corners[:, 1], corners[:, 2]]
                case = 0
                for bit in range(8):
                    if vals[bit] <= threshold:
                        case |= 1 << bit
                mask = EDGE_TABLE[case]
                if mask == 0:
                    continue
                pts = geometry.world(corners)
                local = [None] * 12
                for e in range(12):
                    if mask & (1 << e):
                        a, b = EDGE_CORNERS[e]
                        t = (threshold - vals[a]) / (vals[b] - vals[a])
                        local[e] = pts[a] + t * (pts[b] - pts[a])
                table = TRI_TABLE[case]
                for t0 in range(0, len(table), 3):
                    tris.append([local[table[t0]], local[table[t0 + 1]], local[table[t0 + 2]]])
    return np.asarray(tris, dtype=np.float64) if tris else np.zeros((0, 3, 3))
