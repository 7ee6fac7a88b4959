"""Parametric skinned body: template, blend shapes, linear blend skinning,
per-vertex warp matrices, plus a procedural miniature body for desk-scale work.

The body lives in model units (1 unit = 1 m). Pose is axis-angle per joint
with joint 0 acting as the global rotation; a separate global translation is
applied after skinning. Per-vertex transforms map template positions directly
to posed world positions, so warping a point between two poses is
``M_i(pose_b) @ inv(M_i(pose_a))``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import Mesh, icosphere

_BODY_MAGIC = b"XBODY1"


class BodyLoadError(ValueError):
    """Raised when a body file is malformed or violates model invariants."""


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3).

    Safe near zero angle via the series limits of sin(t)/t and (1-cos t)/t^2.
    """
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    tiny = theta < 1e-10
    s = np.where(tiny, 1.0, np.sin(theta) / np.where(tiny, 1.0, theta))
    c = np.where(tiny, 0.5, (1.0 - np.cos(theta)) / np.where(tiny, 1.0, theta) ** 2)
    x, y, z = aa[..., 0], aa[..., 1], aa[..., 2]
    zeros = np.zeros_like(x)
    K = np.stack([
        np.stack([zeros, -z, y], axis=-1),
        np.stack([z, zeros, -x], axis=-1),
        np.stack([-y, x, zeros], axis=-1),
    ], axis=-2)
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + s[..., None, None] * K + c[..., None, None] * (K @ K)


@dataclass
class BodyModel:
    """Skinned body definition; immutable after construction."""

    template_vertices: np.ndarray      # (V, 3)
    joint_regressor: np.ndarray        # (J, V)
    parents: np.ndarray                # (J,) with parents[0] == -1
    skin_weights: np.ndarray           # (V, J), rows sum to 1
    shape_basis: np.ndarray            # (V, 3, S)
    pose_basis: np.ndarray             # (V, 3, P), P == 9*(J-1) or 0
    part_labels: np.ndarray            # (V,)
    faces: np.ndarray                  # (F, 3)
    part_names: dict[int, str]
    part_adjacency: np.ndarray         # (n_parts, n_parts) bool
    masked_parts: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.skin_weights = np.asarray(self.skin_weights, dtype=np.float64)
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.pose_basis = np.asarray(self.pose_basis, dtype=np.float64)
        self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.part_adjacency = np.asarray(self.part_adjacency, dtype=bool)
        self.masked_parts = frozenset(int(p) for p in self.masked_parts)
        self.validate()

    # -- dimensions --------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_parts(self) -> int:
        return len(self.part_adjacency)

    def validate(self):
        V, J = self.n_vertices, self.n_joints
        if self.skin_weights.shape != (V, J):
            raise BodyLoadError(f"skin weights shape {self.skin_weights.shape} != {(V, J)}")
        if self.joint_regressor.shape != (J, V):
            raise BodyLoadError("joint regressor shape mismatch")
        if (self.skin_weights < -1e-9).any():
            raise BodyLoadError("negative skin weights")
        sums = self.skin_weights.sum(axis=1)
        if (np.abs(sums) < 1e-8).any():
            raise BodyLoadError("degenerate skin weights: row sums to 0")
        if np.abs(sums - 1.0).max() > 1e-6:
            raise BodyLoadError("skin weight rows must sum to 1")
        if self.parents[0] != -1:
            raise BodyLoadError("joint 0 must be the root (parent -1)")
        for j in range(1, J):
            if not (0 <= self.parents[j] < j):
                raise BodyLoadError("cyclic joint tree: parent index must precede the joint")
        if self.pose_basis.shape[2] not in (0, 9 * (J - 1)):
            raise BodyLoadError("pose basis must have 9*(J-1) columns or be empty")
        n_parts = self.n_parts
        if self.part_labels.min(initial=0) < 0 or self.part_labels.max(initial=0) >= n_parts:
            raise BodyLoadError("part labels out of range")
        declared = set(range(n_parts))
        used = set(int(p) for p in np.unique(self.part_labels))
        if used != declared:
            raise BodyLoadError(f"part labels must cover the declared part set (missing {sorted(declared - used)})")
        if not np.array_equal(self.part_adjacency, self.part_adjacency.T):
            raise BodyLoadError("part adjacency must be symmetric")
        if not self.part_adjacency.diagonal().all():
            raise BodyLoadError("part adjacency diagonal must be true")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise BodyLoadError("face indices out of range")

    def rest_mesh(self) -> Mesh:
        return Mesh(self.template_vertices.copy(), self.faces.copy())


@dataclass
class BodyParams:
    """Per-frame pose: axis-angle per joint (index 0 = global rotation),
    global translation, and shape coefficients."""

    theta: np.ndarray              # (J, 3) radians
    global_translation: np.ndarray  # (3,)
    beta: np.ndarray               # (S,)
    beta_limit: float = 5.0

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.global_translation = np.asarray(self.global_translation, dtype=np.float64).reshape(3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if not np.isfinite(self.theta).all():
            raise ValueError("theta must be finite")
        if np.abs(self.beta).max(initial=0.0) > self.beta_limit:
            raise ValueError(f"|beta| components must stay within {self.beta_limit}")

    @staticmethod
    def zero(body: BodyModel) -> "BodyParams":
        return BodyParams(np.zeros((body.n_joints, 3)), np.zeros(3), np.zeros(body.n_shape))

    def copy(self) -> "BodyParams":
        return BodyParams(self.theta.copy(), self.global_translation.copy(), self.beta.copy())


@dataclass
class PosedBody:
    vertices: np.ndarray                # (V, 3)
    per_vertex_transforms: np.ndarray   # (V, 4, 4)
    posed_joints: np.ndarray            # (J, 3)

    def __post_init__(self):
        if len(self.vertices) == 0:
            raise ValueError("posed body must have vertices")

    def mesh(self, faces: np.ndarray) -> Mesh:
        return Mesh(self.vertices.copy(), faces)


def _homogeneous(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    out = np.zeros(rot.shape[:-2] + (4, 4), dtype=np.float64)
    out[..., :3, :3] = rot
    out[..., :3, 3] = trans
    out[..., 3, 3] = 1.0
    return out


def joint_world_transforms(body: BodyModel, params: BodyParams,
                           rest_joints: np.ndarray | None = None) -> np.ndarray:
    """World transform of every joint under the pose (no global translation)."""
    if rest_joints is None:
        shaped = body.template_vertices + body.shape_basis @ params.beta
        rest_joints = body.joint_regressor @ shaped
    R = rodrigues(params.theta)
    J = body.n_joints
    world = np.zeros((J, 4, 4), dtype=np.float64)
    world[0] = _homogeneous(R[0], rest_joints[0])
    for j in range(1, J):
        p = body.parents[j]
        local = _homogeneous(R[j], rest_joints[j] - rest_joints[p])
        world[j] = world[p] @ local
    return world


def skin(body: BodyModel, params: BodyParams) -> PosedBody:
    """Pose the body by linear blend skinning.

    Returns posed vertices together with the per-vertex homogeneous
    transforms that carry rest template positions to the posed positions
    (global translation included).
    """
    if params.theta.shape != (body.n_joints, 3):
        raise ValueError(f"theta shape {params.theta.shape} != {(body.n_joints, 3)}")
    if len(params.beta) != body.n_shape:
        raise ValueError(f"beta length {len(params.beta)} != {body.n_shape}")

    shaped = body.template_vertices + body.shape_basis @ params.beta
    rest_joints = body.joint_regressor @ shaped
    world = joint_world_transforms(body, params, rest_joints)

    # remove the rest-pose joint locations so transforms act on template space
    A = world.copy()
    A[:, :3, 3] -= np.einsum("jab,jb->ja", world[:, :3, :3], rest_joints)

    blend_offsets = body.shape_basis @ params.beta
    if body.pose_basis.shape[2]:
        R = rodrigues(params.theta)
        pose_feature = (R[1:] - np.eye(3)).reshape(-1)
        blend_offsets = blend_offsets + body.pose_basis @ pose_feature

    blended = np.einsum("vj,jab->vab", body.skin_weights, A)
    M = blended.copy()
    # fold the blend-shape displacement in as a pre-translation,
    # then the global translation as a post-translation
    M[:, :3, 3] += np.einsum("vab,vb->va", blended[:, :3, :3], blend_offsets)
    M[:, :3, 3] += params.global_translation

    verts = np.einsum("vab,vb->va", M[:, :3, :3], body.template_vertices) + M[:, :3, 3]
    joints = world[:, :3, 3] + params.global_translation
    return PosedBody(verts, M, joints)


def _invert_transform(M: np.ndarray, rigid_tol: float = 1e-6) -> np.ndarray:
    """Invert homogeneous 4x4s; closed-form (R^T, -R^T t) when rigid within tol."""
    M = np.asarray(M, dtype=np.float64)
    single = M.ndim == 2
    Ms = M[None] if single else M
    dets = np.abs(np.linalg.det(Ms))
    if (dets < 1e-12).any():
        raise np.linalg.LinAlgError("singular per-vertex transform")
    R = Ms[:, :3, :3]
    ortho = np.abs(np.einsum("nab,ncb->nac", R, R) - np.eye(3)).max(axis=(1, 2))
    affine = np.abs(Ms[:, 3, :] - np.array([0, 0, 0, 1.0])).max(axis=1)
    out = np.empty_like(Ms)
    rigid = (ortho < rigid_tol) & (affine < rigid_tol)
    if rigid.any():
        Rt = np.swapaxes(R[rigid], 1, 2)
        out[rigid] = _homogeneous(Rt, -np.einsum("nab,nb->na", Rt, Ms[rigid, :3, 3]))
    if (~rigid).any():
        out[~rigid] = np.linalg.inv(Ms[~rigid])
    return out[0] if single else out


def warp_vertex(body: BodyModel, beta: np.ndarray, theta_src: np.ndarray,
                theta_dst: np.ndarray, x_src: np.ndarray, vertex_index: int,
                translation_src: np.ndarray | None = None,
                translation_dst: np.ndarray | None = None) -> np.ndarray:
    """Carry a point through vertex ``vertex_index``'s motion between poses."""
    x_src = np.asarray(x_src, dtype=np.float64).reshape(3)
    if not np.isfinite(x_src).all():
        raise ValueError("x_src must be finite")
    zeros = np.zeros(3)
    src = skin(body, BodyParams(theta_src, zeros if translation_src is None else translation_src, beta))
    dst = skin(body, BodyParams(theta_dst, zeros if translation_dst is None else translation_dst, beta))
    M_src = src.per_vertex_transforms[vertex_index]
    M_dst = dst.per_vertex_transforms[vertex_index]
    h = np.append(x_src, 1.0)
    out = M_dst @ (_invert_transform(M_src) @ h)
    return out[:3] / out[3]


# -- interchange format ---------------------------------------------------------

def save_body(body: BodyModel, path):
    """Write the documented body interchange file.

    Layout: magic "XBODY1"; V, J, S, P as little-endian int32; float32 arrays
    in order template, regressor, skin weights, shape basis, pose basis; JSON
    trailer with parents, part labels, part adjacency, and the face list.
    """
    V, J = body.n_vertices, body.n_joints
    S = body.n_shape
    P = body.pose_basis.shape[2]
    trailer = {
        "parents": body.parents.tolist(),
        "part_labels": body.part_labels.tolist(),
        "part_adjacency": body.part_adjacency.astype(int).tolist(),
        "faces": body.faces.tolist(),
        "part_names": {str(k): v for k, v in sorted(body.part_names.items())},
        "masked_parts": sorted(body.masked_parts),
    }
    with open(path, "wb") as f:
        f.write(_BODY_MAGIC)
        f.write(struct.pack("<4i", V, J, S, P))
        for arr in (body.template_vertices, body.joint_regressor, body.skin_weights,
                    body.shape_basis, body.pose_basis):
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        f.write(json.dumps(trailer, sort_keys=True).encode("utf-8"))


def load_body(path) -> BodyModel:
    """Load and validate a body interchange file; see :func:`save_body`."""
    path = Path(path)
    if not path.exists():
        raise BodyLoadError(f"body file not found: {path}")
    raw = path.read_bytes()
    if raw[:6] != _BODY_MAGIC:
        raise BodyLoadError(f"bad magic {raw[:6]!r}; not a body file")
    V, J, S, P = struct.unpack("<4i", raw[6:22])
    if min(V, J) < 1 or min(S, P) < 0:
        raise BodyLoadError(f"implausible header dims V={V} J={J} S={S} P={P}")
    counts = [V * 3, J * V, V * J, V * 3 * S, V * 3 * P]
    offset = 22
    arrays = []
    for count in counts:
        end = offset + count * 4
        if end > len(raw):
            raise BodyLoadError("body file truncated in float section")
        arrays.append(np.frombuffer(raw[offset:end], dtype="<f4").astype(np.float64))
        offset = end
    try:
        trailer = json.loads(raw[offset:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BodyLoadError(f"bad JSON trailer: {exc}") from exc
    for key in ("parents", "part_labels", "part_adjacency", "faces"):
        if key not in trailer:
            raise BodyLoadError(f"JSON trailer missing {key!r}")

    template = arrays[0].reshape(V, 3)
    regressor = arrays[1].reshape(J, V)
    weights = arrays[2].reshape(V, J)
    sums = weights.sum(axis=1)
    if (np.abs(sums) < 1e-8).any():
        raise BodyLoadError("degenerate skin weights: row sums to 0")
    if (weights < -1e-6).any():
        raise BodyLoadError("negative skin weights")
    weights = np.clip(weights, 0.0, None) / sums[:, None]

    part_names = {int(k): str(v) for k, v in trailer.get("part_names", {}).items()}
    masked = frozenset(int(p) for p in trailer.get("masked_parts", []))
    return BodyModel(
        template_vertices=template,
        joint_regressor=regressor,
        parents=np.asarray(trailer["parents"], dtype=np.int64),
        skin_weights=weights,
        shape_basis=arrays[3].reshape(V, 3, S),
        pose_basis=arrays[4].reshape(V, 3, P),
        part_labels=np.asarray(trailer["part_labels"], dtype=np.int64),
        faces=np.asarray(trailer["faces"], dtype=np.int64).reshape(-1, 3),
        part_names=part_names,
        part_adjacency=np.asarray(trailer["part_adjacency"], dtype=bool),
        masked_parts=masked,
    )


# -- procedural miniature body -----------------------------------------------------

@dataclass
class MiniBodyConfig:
    limbs: int = 4
    segments: int = 2
    radius: float = 0.07
    torso_radius: float = 0.2
    segment_length: float = 0.16
    subdivisions: int = 3
    blend_fraction: float = 0.35


def _limb_directions(n: int) -> np.ndarray:
    """Unit directions fanned around the vertical axis with alternating pitch."""
    dirs = np.zeros((n, 3))
    for l in range(n):
        az = 2.0 * np.pi * l / n
        el = 0.55 if l % 2 == 0 else -0.55
        dirs[l] = [np.cos(az) * np.cos(el), np.sin(el), np.sin(az) * np.cos(el)]
    return dirs


def generate_mini_body(config: MiniBodyConfig | None = None, **overrides) -> BodyModel:
    """Deterministic star-shaped articulated body built on icosphere topology.

    Each limb is a chain of ``segments`` joints whose first pivot sits at the
    body center (joint 0 doubles as the global root and torso driver, like a
    pelvis). Skin weights follow hat profiles along each limb axis: exactly 1
    on a single joint in the middle of a segment, linearly blended across
    segment boundaries. Terminal segments are the hand/foot parts.
    """
    cfg = config or MiniBodyConfig()
    if overrides:
        cfg = MiniBodyConfig(**{**cfg.__dict__, **overrides})
    if cfg.limbs < 1 or cfg.segments < 1:
        raise ValueError("limb count and segments per limb must both be >= 1")

    L, S = cfg.limbs, cfg.segments
    J = L * S
    dirs = _limb_directions(L)
    tip_t = cfg.torso_radius + S * cfg.segment_length

    # pivots: first pivot of every limb at the origin (shoulders/hips share the
    # body center), elbow s at torso_radius + s * segment_length along the axis
    def pivot_t(s: int) -> float:
        return 0.0 if s == 0 else cfg.torso_radius + s * cfg.segment_length

    joint_of = lambda l, s: l * S + s  # noqa: E731
    pivots = np.zeros((J, 3))
    parents = np.full(J, -1, dtype=np.int64)
    for l in range(L):
        for s in range(S):
            j = joint_of(l, s)
            pivots[j] = dirs[l] * pivot_t(s)
            parents[j] = -1 if j == 0 else (0 if s == 0 else joint_of(l, s - 1))

    # star-shaped surface: max ray-exit over the torso ball and limb sphere chains
    base = icosphere(cfg.subdivisions)
    u = base.vertices
    radii = np.full(len(u), cfg.torso_radius)
    step = cfg.radius * 0.5
    for l in range(L):
        ts = np.arange(0.0, tip_t - cfg.radius + 1e-12, step)
        ts = np.append(ts, tip_t - cfg.radius)
        h = u @ dirs[l]                                    # (V,)
        for t in ts:
            disc = cfg.radius ** 2 - (t * t - (h * t) ** 2)
            hit = disc >= 0
            exit_t = np.where(hit, h * t + np.sqrt(np.maximum(disc, 0.0)), 0.0)
            radii = np.maximum(radii, exit_t)
    verts = u * radii[:, None]

    # skinning: per vertex pick the best-aligned limb, then hat weights along it
    align = u @ dirs.T                                      # (V, L)
    governing = np.argmax(align, axis=1)
    tau = np.einsum("vi,vi->v", verts, dirs[governing])
    weights = np.zeros((len(verts), J))
    labels = np.zeros(len(verts), dtype=np.int64)
    band = cfg.blend_fraction * cfg.segment_length
    torso_edge = cfg.torso_radius * 0.85

    # knot k separates chain stop k from stop k+1: the torso edge first, then
    # each elbow pivot. Limb 0's first segment is driven by the root itself.
    knots = [torso_edge] + [pivot_t(s) for s in range(1, S)]
    elbows = np.asarray(knots[1:])
    for v in range(len(verts)):
        l = governing[v]
        t = tau[v]
        chain = [0] + [joint_of(l, s) for s in range(S)]
        if l == 0:
            chain[1] = 0  # limb 0 segment 0 is the root
        placed = False
        for k, knot in enumerate(knots):
            if t < knot - band:
                weights[v, chain[k]] = 1.0
                placed = True
                break
            if t <= knot + band:
                frac = (t - (knot - band)) / (2 * band)
                weights[v, chain[k]] += 1.0 - frac
                weights[v, chain[k + 1]] += frac
                placed = True
                break
        if not placed:
            weights[v, chain[-1]] = 1.0
        # part: torso inside the torso edge, otherwise the containing segment
        if t < torso_edge:
            labels[v] = 0
        else:
            seg = int(np.searchsorted(elbows, t, side="right"))
            labels[v] = 1 + l * S + min(seg, S - 1)

    # part universe: torso + one part per limb segment
    n_parts = 1 + J
    part_names = {0: "torso"}
    masked = set()
    for l in range(L):
        for s in range(S):
            pid = 1 + joint_of(l, s)
            if s == S - 1:
                kind = "hand" if l % 2 == 0 else "foot"
                part_names[pid] = f"limb{l}_{kind}"
                masked.add(pid)
            else:
                part_names[pid] = f"limb{l}_seg{s}"
    adjacency = np.eye(n_parts, dtype=bool)
    for l in range(L):
        adjacency[0, 1 + joint_of(l, 0)] = adjacency[1 + joint_of(l, 0), 0] = True
        for s in range(S - 1):
            a, b = 1 + joint_of(l, s), 1 + joint_of(l, s + 1)
            adjacency[a, b] = adjacency[b, a] = True
    # unused declared parts would break the coverage invariant; keep only used ids
    used = np.unique(labels)
    remap = {int(old): new for new, old in enumerate(used)}
    labels = np.asarray([remap[int(p)] for p in labels], dtype=np.int64)
    adjacency = adjacency[np.ix_(used, used)]
    part_names = {remap[int(old)]: part_names[int(old)] for old in used}
    masked = frozenset(remap[int(p)] for p in masked if int(p) in remap)

    # joint regressor: inverse-square-distance weights around each pivot
    regressor = np.zeros((J, len(verts)))
    for j in range(J):
        d2 = ((verts - pivots[j]) ** 2).sum(axis=1)
        w = 1.0 / (d2 + (2.0 * cfg.radius) ** 2)
        regressor[j] = w / w.sum()

    # shape basis: isotropic inflate and vertical stretch
    basis = np.zeros((len(verts), 3, 2))
    basis[:, :, 0] = u * 0.05
    basis[:, :, 1] = np.stack([np.zeros(len(verts)), verts[:, 1] * 0.1, np.zeros(len(verts))], axis=1)

    return BodyModel(
        template_vertices=verts,
        joint_regressor=regressor,
        parents=parents,
        skin_weights=weights,
        shape_basis=basis,
        pose_basis=np.zeros((len(verts), 3, 0)),
        part_labels=labels,
        faces=base.faces,
        part_names=part_names,
        part_adjacency=adjacency,
        masked_parts=masked,
    )
