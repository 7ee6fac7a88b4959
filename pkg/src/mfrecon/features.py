"""Pixel-aligned image features and the body-derived geometry feature volume.

Feature maps are produced once per frame by a small strided convolutional
encoder (1/4 image resolution); the geometry volume rasterizes the posed body
into an occupancy/one-hot-part grid and refines it with a stride-1 3D
encoder. Per-point work is pure sampling: bilinear on image maps, trilinear
on the volume, both differentiable with respect to the features. Points that
project outside an image or fall outside the volume yield zeros plus a flag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .bodymodel import BodyModel, PosedBody
from .cameras import Camera

DOWNSAMPLE = 4


@dataclass
class FeatureMap:
    tensor: Tensor            # (C, Hf, Wf)
    camera: Camera

    @property
    def channels(self) -> int:
        return self.tensor.shape[0]


@dataclass
class GeometryVolume:
    tensor: Tensor            # (C, D, D, D)
    box_lo: np.ndarray
    box_hi: np.ndarray
    pitch: np.ndarray         # per-axis voxel size

    @property
    def channels(self) -> int:
        return self.tensor.shape[0]

    @property
    def resolution(self) -> int:
        return self.tensor.shape[1]


class ImageEncoder(nn.Module):
    """3 x H x W image to channels x H/4 x W/4 features: two stride-2 convs,
    two residual blocks, and a 1x1 projection. ReLU activations."""

    def __init__(self, out_channels: int, rng: np.random.Generator, width: int | None = None):
        super().__init__()
        w = width or max(8, out_channels)
        self.out_channels = out_channels
        self.stem1 = nn.Conv2d(3, w // 2, 3, rng, stride=2, padding=1)
        self.stem2 = nn.Conv2d(w // 2, w, 3, rng, stride=2, padding=1)
        self.res = [nn.Conv2d(w, w, 3, rng, stride=1, padding=1) for _ in range(4)]
        self.proj = nn.Conv2d(w, out_channels, 1, rng)

    def forward(self, image: Tensor) -> Tensor:
        x = ad.relu(self.stem2(ad.relu(self.stem1(image))))
        for i in range(0, len(self.res), 2):
            y = self.res[i + 1](ad.relu(self.res[i](x)))
            x = ad.relu(x + y)
        return self.proj(x)


def encode_image(encoder: ImageEncoder, image: np.ndarray, camera: Camera) -> FeatureMap:
    """Run the encoder on one RGB image (3, H, W) in [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError("image must be (3, H, W)")
    H, W = image.shape[1:]
    if H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ValueError(f"image dims must be multiples of {DOWNSAMPLE}")
    if (W, H) != camera.image_size:
        raise ValueError(f"image size {(W, H)} does not match camera {camera.image_size}")
    out = encoder(Tensor(image[None]))
    return FeatureMap(ad.reshape(out, out.shape[1:]), camera)


def sample_pixel_aligned(fmap: FeatureMap, points: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Project points through the map's camera and sample bilinearly.

    Returns per-point feature rows (N, C) and the in-view flags. Out-of-view
    rows are zero. Gradients flow into the feature map only; the sampling
    locations are fixed data.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    uv, _, ok = fmap.camera.project_many(points)
    in_view = fmap.camera.in_view(uv, ok)

    C, Hf, Wf = fmap.tensor.shape
    # texel (i, j) covers a DOWNSAMPLE^2 pixel block centered at
    # (stride*j + (stride-1)/2, stride*i + (stride-1)/2)
    half = (DOWNSAMPLE - 1) / 2.0
    fx = np.clip((uv[:, 0] - half) / DOWNSAMPLE, 0.0, Wf - 1.0)
    fy = np.clip((uv[:, 1] - half) / DOWNSAMPLE, 0.0, Hf - 1.0)
    feats = _bilinear(fmap.tensor, fx, fy)
    mask = in_view.astype(np.float32)[:, None]
    return feats * Tensor(mask), in_view


def _bilinear(map_t: Tensor, fx: np.ndarray, fy: np.ndarray) -> Tensor:
    C, H, W = map_t.shape
    x0 = np.minimum(np.floor(fx).astype(np.int64), W - 2) if W > 1 else np.zeros(len(fx), dtype=np.int64)
    y0 = np.minimum(np.floor(fy).astype(np.int64), H - 2) if H > 1 else np.zeros(len(fy), dtype=np.int64)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    tx = (fx - x0).astype(np.float32)[:, None]
    ty = (fy - y0).astype(np.float32)[:, None]
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)

    rows = ad.transpose(ad.reshape(map_t, (C, H * W)))   # (H*W, C)
    f00 = ad.take(rows, y0 * W + x0)
    f01 = ad.take(rows, y0 * W + x1)
    f10 = ad.take(rows, y1 * W + x0)
    f11 = ad.take(rows, y1 * W + x1)
    w00 = Tensor((1 - tx) * (1 - ty))
    w01 = Tensor(tx * (1 - ty))
    w10 = Tensor((1 - tx) * ty)
    w11 = Tensor(tx * ty)
    return f00 * w00 + f01 * w01 + f10 * w10 + f11 * w11


class GeometryEncoder(nn.Module):
    """Occupancy/part grid (1 + n_parts, D, D, D) to feature volume; two
    stride-1 3D convolutions with a ReLU between."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 width: int | None = None):
        super().__init__()
        w = width or max(8, out_channels)
        self.out_channels = out_channels
        self.conv1 = nn.Conv3d(in_channels, w, 3, rng, stride=1, padding=1)
        self.conv2 = nn.Conv3d(w, out_channels, 3, rng, stride=1, padding=1)

    def forward(self, grid: Tensor) -> Tensor:
        return self.conv2(ad.relu(self.conv1(grid)))


def body_occupancy_grid(posed: PosedBody, body: BodyModel, resolution: int,
                        margin: float = 0.1, box: tuple | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rasterize posed vertices into (1 + n_parts, D, D, D): channel 0 flags
    voxels containing any vertex, channel 1+p flags vertices of part p.
    Returns (grid, box_lo, box_hi)."""
    if resolution < 2:
        raise ValueError("geometry grid resolution must be >= 2")
    if box is None:
        lo = posed.vertices.min(axis=0)
        hi = posed.vertices.max(axis=0)
        extent = hi - lo
        lo = lo - margin * extent
        hi = hi + margin * extent
    else:
        lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    pitch = (hi - lo) / resolution
    idx = np.floor((posed.vertices - lo) / pitch).astype(np.int64)
    keep = ((idx >= 0) & (idx < resolution)).all(axis=1)   # outside-box vertices occupy no voxel
    idx = idx[keep]
    grid = np.zeros((1 + body.n_parts, resolution, resolution, resolution), dtype=np.float32)
    grid[0, idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    grid[1 + body.part_labels[keep], idx[:, 0], idx[:, 1], idx[:, 2]] = 1.0
    return grid, lo, hi


def build_geometry_volume(posed: PosedBody, body: BodyModel, encoder: GeometryEncoder,
                          resolution: int, margin: float = 0.1,
                          box: tuple | None = None,
                          grid: np.ndarray | None = None) -> GeometryVolume:
    """Voxelize the posed body and encode it; D >= 8 for meaningful context.

    A precomputed occupancy grid may be passed to skip rasterization when the
    pose is unchanged.
    """
    if resolution < 8:
        raise ValueError("geometry volume resolution must be >= 8")
    if grid is None:
        grid, lo, hi = body_occupancy_grid(posed, body, resolution, margin, box)
    else:
        if box is None:
            raise ValueError("explicit grid needs its box")
        lo, hi = (np.asarray(b, dtype=np.float64) for b in box)
    out = encoder(Tensor(grid[None]))
    vol = ad.reshape(out, out.shape[1:])
    return GeometryVolume(vol, lo, hi, (hi - lo) / resolution)


def sample_geometry(vol: GeometryVolume, points: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Trilinear sample at world points; outside-box points give zeros + flag."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = ((points >= vol.box_lo) & (points <= vol.box_hi)).all(axis=1)
    D = vol.resolution
    # voxel centers sit at lo + (i + 0.5) * pitch
    coord = (points - vol.box_lo) / vol.pitch - 0.5
    coord = np.clip(coord, 0.0, D - 1.0)

    C = vol.channels
    i0 = np.minimum(np.floor(coord).astype(np.int64), D - 2) if D > 1 else np.zeros((len(points), 3), dtype=np.int64)
    i0 = np.maximum(i0, 0)
    t = (coord - i0).astype(np.float32)
    i1 = np.minimum(i0 + 1, D - 1)

    rows = ad.transpose(ad.reshape(vol.tensor, (C, D * D * D)))   # (D^3, C)

    def gather(ix, iy, iz):
        return ad.take(rows, (ix * D + iy) * D + iz)

    tx, ty, tz = t[:, 0:1], t[:, 1:2], t[:, 2:3]
    out = (gather(i0[:, 0], i0[:, 1], i0[:, 2]) * Tensor((1 - tx) * (1 - ty) * (1 - tz))
           + gather(i1[:, 0], i0[:, 1], i0[:, 2]) * Tensor(tx * (1 - ty) * (1 - tz))
           + gather(i0[:, 0], i1[:, 1], i0[:, 2]) * Tensor((1 - tx) * ty * (1 - tz))
           + gather(i0[:, 0], i0[:, 1], i1[:, 2]) * Tensor((1 - tx) * (1 - ty) * tz)
           + gather(i1[:, 0], i1[:, 1], i0[:, 2]) * Tensor(tx * ty * (1 - tz))
           + gather(i1[:, 0], i0[:, 1], i1[:, 2]) * Tensor(tx * (1 - ty) * tz)
           + gather(i0[:, 0], i1[:, 1], i1[:, 2]) * Tensor((1 - tx) * ty * tz)
           + gather(i1[:, 0], i1[:, 1], i1[:, 2]) * Tensor(tx * ty * tz))
    return out * Tensor(inside.astype(np.float32)[:, None]), inside
