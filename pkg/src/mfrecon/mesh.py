"""Triangle mesh container, primitive generators, and OBJ/PLY interchange.

Vertices are float64 positions in model units (1 unit = 1 m); faces are
integer index triples. Colors, when present, are per-vertex RGB in [0, 1]
and round-trip through the extended OBJ ``v x y z r g b`` lines.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise ValueError("colors must be per-vertex")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def face_normals(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        return n / norm

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals."""
        tri = self.vertices[self.faces]
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        return vn / norm

    def edges_unique(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges_unique()) + self.n_faces

    def is_watertight(self) -> bool:
        """Every undirected edge must be shared by exactly two faces."""
        if self.is_empty():
            return False
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool((counts == 2).all())

    def translated(self, offset) -> "Mesh":
        colors = None if self.colors is None else self.colors.copy()
        return Mesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces.copy(), colors)


def sample_surface_full(mesh: Mesh, n: int, rng: np.random.Generator):
    """Area-uniform surface samples: points, face indices, and barycentric
    (u, v) coordinates relative to each face's first vertex."""
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area to sample")
    cdf = np.cumsum(areas) / total
    face_idx = np.searchsorted(cdf, rng.random(n), side="right").clip(0, mesh.n_faces - 1)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1
    u[flip] = 1 - u[flip]
    v[flip] = 1 - v[flip]
    tri = mesh.vertices[mesh.faces[face_idx]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    return pts, face_idx, u, v


def sample_surface(mesh: Mesh, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Sample n points uniformly by area; returns points and their face indices."""
    pts, face_idx, _, _ = sample_surface_full(mesh, n, rng)
    return pts, face_idx


def sample_surface_with_colors(mesh: Mesh, n: int, rng: np.random.Generator):
    """Surface samples plus barycentrically interpolated vertex colors."""
    if mesh.colors is None:
        raise ValueError("mesh has no vertex colors")
    pts, face_idx, u, v = sample_surface_full(mesh, n, rng)
    cols = mesh.colors[mesh.faces[face_idx]]
    colors = (1 - u - v)[:, None] * cols[:, 0] + u[:, None] * cols[:, 1] + v[:, None] * cols[:, 2]
    return pts, colors


def contains_points(mesh: Mesh, points: np.ndarray, batch: int = 2048) -> np.ndarray:
    """Inside test by ray-crossing parity; the mesh must be watertight.

    The ray direction is a fixed irrational-slope vector so lattice-aligned
    query points do not graze edges.
    """
    direction = np.array([0.57721566, 0.30119021, 0.75470958])
    direction /= np.linalg.norm(direction)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    v0 = mesh.vertices[mesh.faces[:, 0]]
    e1 = mesh.vertices[mesh.faces[:, 1]] - v0
    e2 = mesh.vertices[mesh.faces[:, 2]] - v0
    pvec = np.cross(direction, e2)
    det = (e1 * pvec).sum(axis=1)
    ok = np.abs(det) > 1e-12
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)

    inside = np.zeros(len(points), dtype=bool)
    for start in range(0, len(points), batch):
        p = points[start:start + batch]
        tvec = p[:, None, :] - v0[None, :, :]
        u = (tvec * pvec[None, :, :]).sum(axis=2) * inv_det[None, :]
        qvec = np.cross(tvec, e1[None, :, :])
        v = (qvec * direction).sum(axis=2) * inv_det[None, :]
        t = (qvec * e2[None, :, :]).sum(axis=2) * inv_det[None, :]
        hit = ok[None, :] & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-12)
        inside[start:start + batch] = hit.sum(axis=1) % 2 == 1
    return inside


# -- primitives -------------------------------------------------------------------

def icosphere(subdivisions: int = 3, radius: float = 1.0) -> Mesh:
    """Subdivided icosahedron; deterministic vertex ordering."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            if key in cache:
                return cache[key]
            m = np.asarray(verts[a]) + np.asarray(verts[b])
            m /= np.linalg.norm(m)
            verts.append(tuple(m))
            cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.asarray(verts) * radius, np.asarray(faces, dtype=np.int64))


# -- interchange --------------------------------------------------------------------

def save_obj(mesh: Mesh, path):
    lines = []
    if mesh.colors is not None:
        for v, c in zip(mesh.vertices, mesh.colors):
            lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}")
    else:
        for v in mesh.vertices:
            lines.append(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}")
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> Mesh:
    verts, colors, faces = [], [], []
    with open(path, "r") as f:
        for line in f:
            parts = line.strip().split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:
                    colors.append([float(x) for x in parts[4:7]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:4]]
                faces.append(idx)
    if not verts:
        raise ValueError(f"no vertices in OBJ file {path}")
    cols = np.asarray(colors) if len(colors) == len(verts) and colors else None
    return Mesh(np.asarray(verts), np.asarray(faces, dtype=np.int64), cols)


def save_ply(mesh: Mesh, path):
    """Binary little-endian PLY with optional uchar vertex colors."""
    has_color = mesh.colors is not None
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {mesh.n_vertices}",
              "property float x", "property float y", "property float z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header += [f"element face {mesh.n_faces}",
               "property list uchar int vertex_indices", "end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if has_color:
            rgb = np.clip(np.round(mesh.colors * 255), 0, 255).astype(np.uint8)
            for v, c in zip(mesh.vertices.astype(np.float32), rgb):
                f.write(struct.pack("<fff3B", v[0], v[1], v[2], c[0], c[1], c[2]))
        else:
            f.write(mesh.vertices.astype("<f4").tobytes())
        for face in mesh.faces:
            f.write(struct.pack("<B3i", 3, int(face[0]), int(face[1]), int(face[2])))
