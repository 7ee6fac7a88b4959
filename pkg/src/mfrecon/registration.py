"""Body-to-scan registration: gradient descent on pose, shape, and
translation minimizing a two-sided nearest-neighbor chamfer objective, with
an optional 2D joint reprojection term.

Skinning is re-expressed on the autodiff tape (axis-angle to rotation,
kinematic chain, blended vertex transforms) so gradients reach the
parameters directly; nearest-neighbor correspondences are refreshed outside
the tape each iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .bodymodel import BodyModel, BodyParams
from .mesh import Mesh, sample_surface
from .metrics import chamfer


def _rodrigues_t(aa: Tensor) -> Tensor:
    """Axis-angle rows (J, 3) to rotations (J, 3, 3) on the tape."""
    J = aa.shape[0]
    sq = ad.sum_(aa * aa, axis=1)
    theta = ad.sqrt(sq + 1e-12)
    s = ad.sin(theta) / theta
    c = (Tensor(np.ones(J, dtype=np.float32)) - ad.cos(theta)) / (theta * theta)
    x = aa[:, 0]
    y = aa[:, 1]
    z = aa[:, 2]
    zero = x * 0.0
    K = ad.stack([
        ad.stack([zero, -z, y], axis=1),
        ad.stack([z, zero, -x], axis=1),
        ad.stack([-y, x, zero], axis=1),
    ], axis=1)
    eye = Tensor(np.broadcast_to(np.eye(3, dtype=np.float32), (J, 3, 3)).copy())
    s3 = ad.reshape(s, (J, 1, 1))
    c3 = ad.reshape(c, (J, 1, 1))
    return eye + K * s3 + ad.matmul(K, K) * c3


def _homo(rot: Tensor, trans: Tensor) -> Tensor:
    """(3,3) rotation and (3,) translation to a homogeneous (4,4)."""
    top = ad.concat([rot, ad.reshape(trans, (3, 1))], axis=1)
    bottom = Tensor(np.array([[0, 0, 0, 1]], dtype=np.float32))
    return ad.concat([top, bottom], axis=0)


def skinned_vertices_t(body: BodyModel, theta: Tensor, trans: Tensor, beta: Tensor):
    """Differentiable linear blend skinning; returns (vertices, joints)."""
    V, J = body.n_vertices, body.n_joints
    template = Tensor(body.template_vertices.astype(np.float32))
    if body.n_shape:
        basis = Tensor(body.shape_basis.reshape(V * 3, body.n_shape).astype(np.float32))
        shaped = template + ad.reshape(ad.matmul(basis, beta), (V, 3))
    else:
        shaped = template
    regressor = Tensor(body.joint_regressor.astype(np.float32))
    rest_joints = ad.matmul(regressor, shaped)            # (J, 3)

    R = _rodrigues_t(theta)
    world: list[Tensor] = [None] * J
    world[0] = _homo(R[0], rest_joints[0])
    for j in range(1, J):
        p = int(body.parents[j])
        local = _homo(R[j], rest_joints[j] - rest_joints[p])
        world[j] = ad.matmul(world[p], local)

    A_rows = []
    for j in range(J):
        Gj = world[j]
        rot = Gj[:3, :3]
        t_adj = Gj[:3, 3] - ad.reshape(ad.matmul(rot, ad.reshape(rest_joints[j], (3, 1))), (3,))
        A_rows.append(ad.reshape(_homo(rot, t_adj), (16,)))
    A = ad.stack(A_rows, axis=0)                          # (J, 16)
    T = ad.reshape(ad.matmul(Tensor(body.skin_weights.astype(np.float32)), A), (V, 4, 4))

    ones = Tensor(np.ones((V, 1), dtype=np.float32))
    shaped_h = ad.reshape(ad.concat([shaped, ones], axis=1), (V, 4, 1))
    posed = ad.reshape(ad.matmul(T, shaped_h), (V, 4))[:, :3] + trans
    joints = ad.stack([world[j][:3, 3] for j in range(J)], axis=0) + trans
    return posed, joints


@dataclass
class RegistrationReport:
    converged: bool
    final_residual: float
    residuals: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    steps_run: int = 0
    final_loss: float = float("nan")

    def to_dict(self) -> dict:
        return {"converged": self.converged, "final_residual": self.final_residual,
                "steps_run": self.steps_run, "final_loss": self.final_loss,
                "residuals": [round(r, 6) for r in self.residuals]}


def register_body_to_scan(body: BodyModel, scan: Mesh, init: BodyParams,
                          keypoints_2d: list | None = None, steps: int = 500,
                          lr: float = 0.03, samples: int = 2000, seed: int = 0,
                          resample: bool = True, optimizer: str = "adam",
                          keypoint_weight: float = 1e-4, tol: float = 0.005,
                          eval_every: int = 25) -> tuple[BodyParams, RegistrationReport]:
    """Fit (theta, beta, translation) so the skinned body matches the scan.

    The per-step objective is the mean squared nearest-neighbor distance in
    both directions over ``samples`` fresh scan samples (fixed seed schedule;
    set ``resample=False`` to freeze them). ``keypoints_2d`` entries are
    (camera, (J, 2) pixel targets) adding a squared reprojection term.
    Non-convergence is reported, not raised.
    """
    if scan.is_empty():
        raise ValueError("scan mesh is empty")
    theta = Tensor(init.theta.astype(np.float32), requires_grad=True)
    trans = Tensor(init.global_translation.astype(np.float32), requires_grad=True)
    beta = Tensor(init.beta.astype(np.float32), requires_grad=True)
    params = [theta, trans, beta]
    opt = nn.Adam(params, lr=lr) if optimizer == "adam" else None
    # cosine decay to a tenth of the base rate keeps the endgame stable
    lr_at = lambda s: lr * (0.1 + 0.45 * (1.0 + np.cos(np.pi * s / max(1, steps))))  # noqa: E731

    base_rng = np.random.default_rng(seed)
    fixed_pts, _ = sample_surface(scan, samples, base_rng)
    residuals: list[float] = []
    losses: list[float] = []
    final_loss = float("nan")

    for step in range(steps):
        if resample:
            rng = np.random.default_rng(seed * 1_000_003 + step)
            scan_pts, _ = sample_surface(scan, samples, rng)
        else:
            scan_pts = fixed_pts

        verts, joints = skinned_vertices_t(body, theta, trans, beta)
        v_np = verts.data.astype(np.float64)
        idx_s2b = cKDTree(v_np).query(scan_pts)[1]
        idx_b2s = cKDTree(scan_pts).query(v_np)[1]

        diff_s2b = verts[idx_s2b] - Tensor(scan_pts.astype(np.float32))
        diff_b2s = verts - Tensor(scan_pts[idx_b2s].astype(np.float32))
        loss = ad.mean(ad.sum_(diff_s2b * diff_s2b, axis=1)) + \
            ad.mean(ad.sum_(diff_b2s * diff_b2s, axis=1))

        if keypoints_2d:
            for cam, targets in keypoints_2d:
                Rc = Tensor(cam.rotation.astype(np.float32))
                tc = Tensor(cam.translation.astype(np.float32))
                cam_pts = ad.matmul(joints, ad.transpose(Rc)) + tc
                if cam.model == "perspective":
                    z = cam_pts[:, 2:3]
                    uv = cam_pts[:, 0:2] * (float(cam.focal) / z) + Tensor(
                        cam.principal.astype(np.float32))
                else:
                    uv = cam_pts[:, 0:2] * float(cam.scale) + Tensor(
                        cam.offset.astype(np.float32))
                kp_diff = uv - Tensor(np.asarray(targets, dtype=np.float32))
                loss = loss + ad.mean(ad.sum_(kp_diff * kp_diff, axis=1)) * keypoint_weight

        final_loss = float(loss.data)
        losses.append(final_loss)
        for p in params:
            p.grad = None
        loss.backward()
        if opt is not None:
            opt.lr = lr_at(step)
            opt.step()
        else:
            for p in params:
                if p.grad is not None:
                    p.data = p.data - lr * p.grad
        np.clip(beta.data, -init.beta_limit, init.beta_limit, out=beta.data)

        if step % eval_every == 0 or step == steps - 1:
            posed_mesh = Mesh(verts.data.astype(np.float64), body.faces)
            residuals.append(chamfer(posed_mesh, scan, samples=samples,
                                     seed=seed, unit_scale_cm=1.0))

    result = BodyParams(theta.data.astype(np.float64),
                        trans.data.astype(np.float64),
                        beta.data.astype(np.float64))
    report = RegistrationReport(converged=bool(residuals and residuals[-1] < tol),
                                final_residual=residuals[-1] if residuals else float("inf"),
                                residuals=residuals, losses=losses,
                                steps_run=steps, final_loss=final_loss)
    return result, report
