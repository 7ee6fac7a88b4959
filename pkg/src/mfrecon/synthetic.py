"""Procedural desk-scale datasets: a miniature body skinned through a
scripted pose sequence, rendered with the software rasterizer.

The subject spins through a full yaw turn in front of a fixed perspective
camera (optionally also swinging its limbs). Ground-truth meshes, rendered
frames, cameras, and tracked poses go into one directory. Two knobs emulate
real capture pathologies: ``cloth`` wraps the body in a procedurally
displaced outer shell so the true surface leaves the body surface, and
``perturb_rad`` corrupts the *stored* poses (per joint, fixed magnitude,
random direction) while ground truth and renders keep the true ones,
mirroring estimated-tracking error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .bodymodel import BodyModel, BodyParams, MiniBodyConfig, generate_mini_body, load_body, save_body, skin
from .cameras import Camera, look_at
from .mesh import Mesh, load_obj, save_obj
from .render import render_frame, silhouette_iou, silhouette_reference, rasterize
from .sequence import FramePose, SequenceStore, load_manifest, save_manifest

_PALETTE = np.array([
    [0.85, 0.3, 0.25], [0.25, 0.6, 0.85], [0.3, 0.8, 0.4], [0.9, 0.75, 0.2],
    [0.7, 0.35, 0.8], [0.95, 0.55, 0.2], [0.25, 0.8, 0.75], [0.85, 0.4, 0.6],
    [0.5, 0.65, 0.3], [0.4, 0.45, 0.9], [0.8, 0.6, 0.45], [0.35, 0.7, 0.55],
    [0.75, 0.5, 0.75], [0.6, 0.8, 0.3],
])


@dataclass
class SyntheticDataset:
    body: BodyModel
    store: SequenceStore
    images: list
    gt_meshes: list
    true_thetas: list
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.store)


def _vertex_colors(body: BodyModel, mode: str) -> np.ndarray:
    if mode == "red":
        return np.tile([1.0, 0.0, 0.0], (body.n_vertices, 1))
    if mode == "parts":
        return _PALETTE[body.part_labels % len(_PALETTE)]
    raise ValueError(f"unknown color mode {mode!r}")


def _cloth_shell(mesh: Mesh, offset: float, seed: int) -> Mesh:
    """Displace the surface outward along vertex normals by a smooth,
    strictly positive field, emulating loose cloth over the body."""
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0, 2 * np.pi, 3)
    v = mesh.vertices
    wave = (np.sin(3.0 * np.arctan2(v[:, 2], v[:, 0]) + phases[0])
            * np.sin(2.0 * np.pi * v[:, 1] / max(1e-6, np.ptp(v[:, 1])) + phases[1]))
    field = offset * (1.0 + 0.45 * wave)
    out = v + mesh.vertex_normals() * field[:, None]
    return Mesh(out, mesh.faces.copy(), None if mesh.colors is None else mesh.colors.copy())


def _scripted_theta(body: BodyModel, k: int, frames: int, script: str, swing: float) -> np.ndarray:
    theta = np.zeros((body.n_joints, 3))
    theta[0, 1] = 2.0 * np.pi * k / frames
    if script == "orbit":
        return theta
    if script == "wave":
        for j in range(1, body.n_joints):
            theta[j, 2] = swing * np.sin(2.0 * np.pi * k / frames + 1.7 * j)
        return theta
    raise ValueError(f"unknown pose script {script!r}")


def generate_synthetic_sequence(frames: int = 8, image_size: int = 64,
                                body: BodyModel | None = None,
                                body_config: MiniBodyConfig | None = None,
                                pose_script: str = "orbit", swing: float = 0.25,
                                camera_distance: float = 2.5, seed: int = 1,
                                cloth: bool = False, cloth_offset: float = 0.04,
                                perturb_rad: float = 0.0,
                                color_mode: str = "parts") -> SyntheticDataset:
    if frames < 2:
        raise ValueError("need at least 2 frames")
    if body is None:
        body = generate_mini_body(body_config)
    rng = np.random.default_rng(seed)
    colors = _vertex_colors(body, color_mode)

    # fixed camera framing the whole motion
    radius = np.linalg.norm(body.template_vertices, axis=1).max() * (1.0 + (cloth_offset if cloth else 0))
    focal = 0.38 * image_size * camera_distance / radius
    R, t = look_at([0.0, 0.0, -camera_distance], [0.0, 0.0, 0.0])
    cam = Camera("perspective", (image_size, image_size), rotation=R, translation=t,
                 focal=focal, principal=np.array([image_size / 2.0, image_size / 2.0]))

    frames_out, images, gt_meshes, true_thetas = [], [], [], []
    for k in range(frames):
        theta_true = _scripted_theta(body, k, frames, pose_script, swing)
        posed = skin(body, BodyParams(theta_true, np.zeros(3), np.zeros(body.n_shape)))
        gt = Mesh(posed.vertices.copy(), body.faces.copy(), colors.copy())
        if cloth:
            gt = _cloth_shell(gt, cloth_offset, seed=seed * 1000 + k)
        image = render_frame(gt, cam)

        theta_stored = theta_true.copy()
        if perturb_rad > 0:
            for j in range(body.n_joints):
                direction = rng.standard_normal(3)
                theta_stored[j] += perturb_rad * direction / np.linalg.norm(direction)

        frames_out.append(FramePose(theta_stored, np.zeros(3), np.zeros(body.n_shape),
                                    cam, image_path=f"images/frame_{k:03d}.png"))
        images.append(image)
        gt_meshes.append(gt)
        true_thetas.append(theta_true)

    store = SequenceStore(frames_out, fps=float(frames), body_path="body.xbody")
    return SyntheticDataset(body, store, images, gt_meshes, true_thetas)


def validate_dataset(ds: SyntheticDataset, frame: int = 0) -> float:
    """Consistency check between the rasterizer coverage and an independent
    silhouette oracle for one frame; returns the IoU."""
    cam = ds.store[frame].camera
    _, _, mask = rasterize(ds.gt_meshes[frame], cam)
    ref = silhouette_reference(ds.gt_meshes[frame], cam)
    return silhouette_iou(mask, ref)


# -- on-disk layout ---------------------------------------------------------------

def save_image_png(image: np.ndarray, path):
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def save_dataset(ds: SyntheticDataset, root):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    save_body(ds.body, root / "body.xbody")
    for k, (img, gt) in enumerate(zip(ds.images, ds.gt_meshes)):
        save_image_png(img, root / "images" / f"frame_{k:03d}.png")
        save_obj(gt, root / "gt" / f"frame_{k:03d}.obj")
    save_manifest(ds.store, root / "manifest.json")
    truth = {"true_thetas": [t.tolist() for t in ds.true_thetas]}
    (root / "true_params.json").write_text(json.dumps(truth, sort_keys=True) + "\n")
    ds.root = root


def load_dataset(root) -> SyntheticDataset:
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    store = load_manifest(root / "manifest.json")
    body = load_body(root / (store.body_path or "body.xbody"))
    images = [load_image_png(root / f.image_path) for f in store.frames]
    gt_meshes = [load_obj(root / "gt" / f"frame_{k:03d}.obj") for k in range(len(store))]
    truth_file = root / "true_params.json"
    if truth_file.exists():
        truth = json.loads(truth_file.read_text())
        true_thetas = [np.asarray(t) for t in truth["true_thetas"]]
    else:
        true_thetas = [f.theta.copy() for f in store.frames]
    return SyntheticDataset(body, store, images, gt_meshes, true_thetas, root)
