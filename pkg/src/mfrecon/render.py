"""Z-buffered barycentric triangle rasterizer.

Renders per-vertex colored meshes with flat Lambertian shading under a fixed
light. Interpolation is perspective-correct for pinhole cameras and affine
for weak-perspective ones. Rasterization walks faces in index order with a
strict depth comparison, so output is deterministic.
"""

from __future__ import annotations

import numpy as np

from .cameras import Camera, PERSPECTIVE
from .mesh import Mesh

_LIGHT = np.array([0.35, -0.5, -0.77])
_AMBIENT = 0.35
_DEFAULT_ALBEDO = np.array([0.75, 0.73, 0.7])


def rasterize(mesh: Mesh, cam: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (image (3, H, W) in [0, 1], depth (H, W), coverage mask (H, W)).

    Back faces (clockwise after projection, with image y down) are culled;
    a fully back-facing mesh renders as background.
    """
    W, H = cam.image_size
    image = np.zeros((3, H, W), dtype=np.float64)
    depth = np.full((H, W), np.inf)
    mask = np.zeros((H, W), dtype=bool)
    if mesh.is_empty():
        return image.astype(np.float32), depth, mask

    uv, z, ok = cam.project_many(mesh.vertices)
    albedo = mesh.colors if mesh.colors is not None else \
        np.broadcast_to(_DEFAULT_ALBEDO, (mesh.n_vertices, 3))
    light = _LIGHT / np.linalg.norm(_LIGHT)
    fnormals = mesh.face_normals()
    shade_f = _AMBIENT + (1 - _AMBIENT) * np.maximum(0.0, -(fnormals @ light))

    persp = cam.model == PERSPECTIVE
    for fi, face in enumerate(mesh.faces):
        if not ok[face].all():
            continue
        a, b, c = uv[face]
        za, zb, zc = z[face]
        area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        # outward faces of a counter-clockwise mesh project clockwise (y down)
        if area >= -1e-12:
            continue
        x0 = max(int(np.ceil(min(a[0], b[0], c[0]))), 0)
        x1 = min(int(np.floor(max(a[0], b[0], c[0]))), W - 1)
        y0 = max(int(np.ceil(min(a[1], b[1], c[1]))), 0)
        y1 = min(int(np.floor(max(a[1], b[1], c[1]))), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        px = xs.ravel()
        py = ys.ravel()
        w0 = ((b[0] - px) * (c[1] - py) - (b[1] - py) * (c[0] - px)) / area
        w1 = ((c[0] - px) * (a[1] - py) - (c[1] - py) * (a[0] - px)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= -1e-12)
        if not inside.any():
            continue
        px, py = px[inside], py[inside]
        w0, w1, w2 = w0[inside], w1[inside], w2[inside]
        if persp:
            iz = w0 / za + w1 / zb + w2 / zc
            zpix = 1.0 / iz
            cw0, cw1, cw2 = (w0 / za) * zpix, (w1 / zb) * zpix, (w2 / zc) * zpix
        else:
            zpix = w0 * za + w1 * zb + w2 * zc
            cw0, cw1, cw2 = w0, w1, w2
        closer = zpix < depth[py, px]
        if not closer.any():
            continue
        px, py, zpix = px[closer], py[closer], zpix[closer]
        col = (cw0[closer, None] * albedo[face[0]]
               + cw1[closer, None] * albedo[face[1]]
               + cw2[closer, None] * albedo[face[2]]) * shade_f[fi]
        depth[py, px] = zpix
        mask[py, px] = True
        image[:, py, px] = np.clip(col, 0.0, 1.0).T
    return image.astype(np.float32), depth, mask


def render_frame(mesh: Mesh, cam: Camera) -> np.ndarray:
    """RGB render (3, H, W) in [0, 1]."""
    image, _, _ = rasterize(mesh, cam)
    return image


def silhouette_reference(mesh: Mesh, cam: Camera) -> np.ndarray:
    """Independent coverage oracle: point-in-projected-triangle per pixel,
    no z-buffer, no backface culling, vectorized over all faces at once."""
    W, H = cam.image_size
    uv, _, ok = cam.project_many(mesh.vertices)
    tri = uv[mesh.faces]                               # (F, 3, 2)
    valid = ok[mesh.faces].all(axis=1)
    tri = tri[valid]
    xs, ys = np.meshgrid(np.arange(W), np.arange(H))
    p = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)

    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area = ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
            - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    keep = np.abs(area) > 1e-12
    a, b, c, area = a[keep], b[keep], c[keep], area[keep]

    covered = np.zeros(len(p), dtype=bool)
    for start in range(0, len(p), 4096):
        blk = p[start:start + 4096]
        w0 = ((b[None, :, 0] - blk[:, None, 0]) * (c[None, :, 1] - blk[:, None, 1])
              - (b[None, :, 1] - blk[:, None, 1]) * (c[None, :, 0] - blk[:, None, 0])) / area
        w1 = ((c[None, :, 0] - blk[:, None, 0]) * (a[None, :, 1] - blk[:, None, 1])
              - (c[None, :, 1] - blk[:, None, 1]) * (a[None, :, 0] - blk[:, None, 0])) / area
        w2 = 1.0 - w0 - w1
        covered[start:start + 4096] = ((w0 >= 0) & (w1 >= 0) & (w2 >= -1e-12)).any(axis=1)
    return covered.reshape(H, W)


def silhouette_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0
