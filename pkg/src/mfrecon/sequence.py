"""Tracked pose sequence storage and pose-guided reference frame selection.

A frame scores against the target by summed squared joint-rotation
differences plus an inverse term on the global rotation/translation gap, so
low scores mean similar articulation seen from a complementary angle. The
greedy selector additionally spreads picks across yaw bins so the references
do not collapse onto one opposite view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bodymodel import BodyParams, rodrigues
from .cameras import Camera


@dataclass
class FramePose:
    theta: np.ndarray             # (J, 3)
    translation: np.ndarray       # (3,)
    beta: np.ndarray              # (S,)
    camera: Camera
    image_path: str | None = None

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)

    def params(self) -> BodyParams:
        return BodyParams(self.theta.copy(), self.translation.copy(), self.beta.copy())


@dataclass
class SequenceStore:
    frames: list[FramePose]
    fps: float | None = None
    body_path: str | None = None

    def __post_init__(self):
        if self.frames:
            beta0 = self.frames[0].beta
            for i, f in enumerate(self.frames):
                if f.beta.shape != beta0.shape or np.abs(f.beta - beta0).max(initial=0.0) > 1e-9:
                    raise ValueError(f"frame {i}: beta must match frame 0 (single-subject sequence)")

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> FramePose:
        return self.frames[i]


@dataclass
class SelectionWeights:
    joint_weights: np.ndarray      # (J,), entry 0 unused by the joint sum
    global_weight: float = 1.0
    epsilon: float = 1e-6

    def __post_init__(self):
        self.joint_weights = np.asarray(self.joint_weights, dtype=np.float64).reshape(-1)
        if (self.joint_weights < 0).any() or self.global_weight < 0:
            raise ValueError("selection weights must be nonnegative")
        if len(self.joint_weights) > 1 and not (self.joint_weights[1:] > 0).any():
            raise ValueError("at least one joint weight must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @staticmethod
    def uniform(n_joints: int) -> "SelectionWeights":
        return SelectionWeights(np.ones(n_joints))


def pose_distance(pose_i: BodyParams, pose_j: BodyParams, w: SelectionWeights) -> float:
    """Joint-pose dissimilarity plus inverse global-pose dissimilarity.

    The joint sum runs over every joint except joint 0; the global term
    divides by the squared distance between the concatenated global rotation
    and translation vectors, floored at epsilon.
    """
    if pose_i.theta.shape != pose_j.theta.shape:
        raise ValueError("poses must come from the same body")
    diffs = ((pose_i.theta[1:] - pose_j.theta[1:]) ** 2).sum(axis=1)
    jw = w.joint_weights[1:1 + len(diffs)]
    joint_term = float((jw * diffs).sum())
    g_i = np.concatenate([pose_i.theta[0], pose_i.global_translation])
    g_j = np.concatenate([pose_j.theta[0], pose_j.global_translation])
    gap = float(((g_i - g_j) ** 2).sum())
    return joint_term + w.global_weight / max(gap, w.epsilon)


def yaw_of(theta0: np.ndarray) -> float:
    """Heading of the global rotation: where it sends the +z axis in the
    horizontal plane."""
    fwd = rodrigues(np.asarray(theta0, dtype=np.float64)) @ np.array([0.0, 0.0, 1.0])
    return float(np.arctan2(fwd[0], fwd[2]))


def select_reference_frames(store: SequenceStore, target: int, n: int = 4,
                            w: SelectionWeights | None = None) -> list[int]:
    """Greedy lowest-score pick with yaw-bin diversity.

    Each selected frame must land in a distinct yaw bin of width 2*pi/n
    (relative to the target's yaw) while unclaimed bins remain; after that
    the remaining slots fill purely by score. Ties break on the lower frame
    index. Default n = 4.
    """
    if n < 1:
        raise ValueError("need n >= 1 reference frames")
    if len(store) <= n:
        raise ValueError(f"store has {len(store)} frames; selection needs more than {n}")
    if w is None:
        w = SelectionWeights.uniform(store[target].theta.shape[0])

    target_pose = store[target].params()
    yaw_t = yaw_of(store[target].theta[0])
    width = 2.0 * np.pi / n

    candidates = []
    for j in range(len(store)):
        if j == target:
            continue
        score = pose_distance(target_pose, store[j].params(), w)
        rel = (yaw_of(store[j].theta[0]) - yaw_t) % (2.0 * np.pi)
        bin_id = min(int(rel / width), n - 1)
        candidates.append((score, j, bin_id))
    candidates.sort(key=lambda c: (c[0], c[1]))

    selected: list[int] = []
    used_bins: set[int] = set()
    for score, j, bin_id in candidates:
        if len(selected) == n:
            break
        if bin_id not in used_bins:
            selected.append(j)
            used_bins.add(bin_id)
    if len(selected) < n:
        chosen = set(selected)
        for score, j, bin_id in candidates:
            if len(selected) == n:
                break
            if j not in chosen:
                selected.append(j)
                chosen.add(j)
    return selected


def precompute_selections(store: SequenceStore, n: int = 4,
                          w: SelectionWeights | None = None) -> dict[int, list[int]]:
    """Reference frames for every target, for the offline pipeline cache."""
    return {t: select_reference_frames(store, t, n, w) for t in range(len(store))}


# -- interchange -----------------------------------------------------------------

def save_manifest(store: SequenceStore, path):
    doc = {
        "fps": store.fps,
        "body": store.body_path,
        "frames": [
            {
                "image": f.image_path,
                "theta": f.theta.tolist(),
                "translation": f.translation.tolist(),
                "beta": f.beta.tolist(),
                "camera": f.camera.to_dict(),
            }
            for f in store.frames
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_manifest(path) -> SequenceStore:
    path = Path(path)
    doc = json.loads(path.read_text())
    frames = [
        FramePose(
            theta=np.asarray(rec["theta"], dtype=np.float64),
            translation=np.asarray(rec["translation"], dtype=np.float64),
            beta=np.asarray(rec["beta"], dtype=np.float64),
            camera=Camera.from_dict(rec["camera"]),
            image_path=rec.get("image"),
        )
        for rec in doc["frames"]
    ]
    return SequenceStore(frames, fps=doc.get("fps"), body_path=doc.get("body"))


def save_selection_cache(selections: dict[int, list[int]], path):
    doc = {str(t): [int(i) for i in refs] for t, refs in sorted(selections.items())}
    Path(path).write_text(json.dumps(doc, indent=0, sort_keys=True) + "\n")


def load_selection_cache(path) -> dict[int, list[int]]:
    doc = json.loads(Path(path).read_text())
    return {int(t): [int(i) for i in refs] for t, refs in doc.items()}
