"""Perspective and weak-perspective cameras with world-to-image projection.

Camera space follows the computer-vision convention: x right, y down,
z forward; ``x_cam = R @ x_world + t``. Perspective projection is a pinhole
with a single focal length in pixels; weak-perspective maps camera-space
x/y through a scale and offset while depth stays the camera-space z.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PERSPECTIVE = "perspective"
WEAK_PERSPECTIVE = "weak_perspective"


@dataclass
class Camera:
    model: str
    image_size: tuple[int, int]                  # (W, H) pixels
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    focal: float = 1.0                           # perspective, pixels
    principal: np.ndarray = field(default_factory=lambda: np.zeros(2))
    scale: float = 1.0                           # weak perspective, px per unit
    offset: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        if self.model not in (PERSPECTIVE, WEAK_PERSPECTIVE):
            raise ValueError(f"unknown camera model {self.model!r}")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.principal = np.asarray(self.principal, dtype=np.float64).reshape(2)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(2)
        self.image_size = (int(self.image_size[0]), int(self.image_size[1]))
        if self.model == PERSPECTIVE and self.focal <= 0:
            raise ValueError("focal length must be positive")
        if self.model == WEAK_PERSPECTIVE and self.scale <= 0:
            raise ValueError("weak-perspective scale must be positive")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation must be orthonormal")

    # -- projection ------------------------------------------------------------

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def project_many(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batched projection: pixel coords (N, 2), depth (N,), validity (N,).

        Perspective points at or behind the camera plane are flagged invalid
        instead of raising; their pixel coordinates are zeros.
        """
        cam = self.to_camera(np.atleast_2d(points))
        depth = cam[:, 2]
        if self.model == PERSPECTIVE:
            ok = depth > 1e-6
            z = np.where(ok, depth, 1.0)
            uv = self.focal * cam[:, :2] / z[:, None] + self.principal
            uv = np.where(ok[:, None], uv, 0.0)
        else:
            ok = np.ones(len(cam), dtype=bool)
            uv = self.scale * cam[:, :2] + self.offset
        return uv, depth, ok

    def project(self, x: np.ndarray) -> tuple[float, float, float]:
        """Single-point projection; perspective rejects behind-camera points."""
        uv, depth, ok = self.project_many(np.asarray(x, dtype=np.float64).reshape(1, 3))
        if self.model == PERSPECTIVE and not ok[0]:
            raise ValueError("point is behind the perspective camera")
        return float(uv[0, 0]), float(uv[0, 1]), float(depth[0])

    def unproject(self, u: float, v: float, depth: float) -> np.ndarray:
        if self.model == PERSPECTIVE:
            x = (u - self.principal[0]) / self.focal * depth
            y = (v - self.principal[1]) / self.focal * depth
        else:
            x = (u - self.offset[0]) / self.scale
            y = (v - self.offset[1]) / self.scale
        cam = np.array([x, y, depth])
        return self.rotation.T @ (cam - self.translation)

    def in_view(self, uv: np.ndarray, ok: np.ndarray) -> np.ndarray:
        W, H = self.image_size
        return ok & (uv[:, 0] >= 0) & (uv[:, 0] <= W - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= H - 1)

    # -- interchange ------------------------------------------------------------

    def to_dict(self) -> dict:
        d = {
            "model": self.model,
            "image_size": list(self.image_size),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }
        if self.model == PERSPECTIVE:
            d["focal"] = float(self.focal)
            d["principal"] = self.principal.tolist()
        else:
            d["scale"] = float(self.scale)
            d["offset"] = self.offset.tolist()
        return d

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            model=d["model"],
            image_size=tuple(d["image_size"]),
            rotation=np.asarray(d.get("rotation", np.eye(3).tolist())),
            translation=np.asarray(d.get("translation", [0, 0, 0])),
            focal=float(d.get("focal", 1.0)),
            principal=np.asarray(d.get("principal", [0, 0])),
            scale=float(d.get("scale", 1.0)),
            offset=np.asarray(d.get("offset", [0, 0])),
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation for a camera at ``eye``
    looking toward ``target`` (camera y points down to match image rows)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    t = -R @ eye
    return R, t
