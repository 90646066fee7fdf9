"""Differentiable primitive math: covariance construction, projection, SH color.

All functions are batched torch ops working in whatever dtype the inputs
carry (float32 production / float64 verification) and are safe to call
concurrently: they are pure and allocate their own outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import NEAR_PLANE, Camera
from .errors import InvalidParameterError

# Real spherical harmonics constants, bands 0 and 1.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# Anti-aliasing dilation added to the diagonal of every projected covariance.
COV2D_FLOOR = 0.3  # px^2


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) quaternions (w, x, y, z), any norm -> (N, 3, 3) rotations."""
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    R = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def build_covariance(q: torch.Tensor, log_scale: torch.Tensor) -> torch.Tensor:
    """Sigma = R S S^T R^T from quaternion(s) and log-scale(s).

    Accepts (4,)/(3,) or batched (N, 4)/(N, 3); returns (3, 3) or (N, 3, 3).
    """
    single = q.dim() == 1
    qb = q.reshape(-1, 4)
    sb = log_scale.reshape(-1, 3)
    if not (torch.isfinite(qb).all() and torch.isfinite(sb).all()):
        raise InvalidParameterError("non-finite quaternion or log-scale")
    R = quat_to_rotmat(qb)
    S = torch.exp(sb)
    RS = R * S.unsqueeze(-2)  # R @ diag(S)
    cov = RS @ RS.transpose(-1, -2)
    return cov[0] if single else cov


def eval_sh(features: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Decode view-dependent RGB from SH coefficients.

    features: (N, B, 3) with B in {1, 4}; dirs: (N, 3) unit vectors from the
    camera center toward each primitive. Returns (N, 3) colors clamped at 0
    after the +0.5 offset.
    """
    bands = features.shape[-2]
    rgb = SH_C0 * features[..., 0, :]
    if bands >= 4:
        x, y, z = dirs.unbind(-1)
        rgb = (
            rgb
            - SH_C1 * y.unsqueeze(-1) * features[..., 1, :]
            + SH_C1 * z.unsqueeze(-1) * features[..., 2, :]
            - SH_C1 * x.unsqueeze(-1) * features[..., 3, :]
        )
    return torch.clamp(rgb + 0.5, min=0.0)


def rgb_to_band0(rgb: np.ndarray) -> np.ndarray:
    """Inverse of the degree-0 SH decode: features such that eval_sh == rgb."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def camera_tensors(cam: Camera, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(rotation (3,3), translation (3,), center (3,)) as torch tensors."""
    R = torch.as_tensor(cam.rotation, dtype=dtype)
    tr = torch.as_tensor(cam.translation, dtype=dtype)
    center = torch.as_tensor(cam.center, dtype=dtype)
    return R, tr, center


def project_gaussians(
    means: torch.Tensor,
    covs: torch.Tensor,
    cam: Camera,
    near: float = NEAR_PLANE,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """EWA projection of 3D Gaussians into the image plane.

    means: (N, 3), covs: (N, 3, 3). Returns
      means2d (N, 2), cov2d (N, 2, 2) with the dilation floor applied,
      depth (N,) camera-space z, and visible (N,) bool mask (z > near).
    Entries with visible == False hold unspecified values; callers must mask.
    """
    dtype = means.dtype
    R, tr, _ = camera_tensors(cam, dtype)
    cam_pts = means @ R.T + tr
    x, y, z = cam_pts.unbind(-1)
    visible = z > near
    zs = torch.where(visible, z, torch.ones_like(z))  # keep grads finite for culled rows
    u = cam.fx * x / zs + cam.cx
    v = cam.fy * y / zs + cam.cy
    means2d = torch.stack([u, v], dim=-1)

    inv_z = 1.0 / zs
    inv_z2 = inv_z * inv_z
    zero = torch.zeros_like(zs)
    J = torch.stack(
        [
            cam.fx * inv_z, zero, -cam.fx * x * inv_z2,
            zero, cam.fy * inv_z, -cam.fy * y * inv_z2,
        ],
        dim=-1,
    ).reshape(-1, 2, 3)
    JW = J @ R
    cov2d = JW @ covs @ JW.transpose(-1, -2)
    floor = torch.eye(2, dtype=dtype) * COV2D_FLOOR
    cov2d = cov2d + floor
    return means2d, cov2d, z, visible


@dataclass(frozen=True)
class ProjectedGaussian:
    """2D footprint of one primitive: mean/cov in pixels plus camera depth."""

    mean2d: np.ndarray  # (2,)
    cov2d: np.ndarray  # (2, 2) symmetric PSD after the dilation floor
    depth: float


def project_gaussian(mean: np.ndarray, cov: np.ndarray, cam: Camera) -> ProjectedGaussian | None:
    """Single-primitive projection; returns None when culled by the near plane."""
    mean_t = torch.as_tensor(np.asarray(mean, dtype=np.float64)).reshape(1, 3)
    cov_t = torch.as_tensor(np.asarray(cov, dtype=np.float64)).reshape(1, 3, 3)
    means2d, cov2d, depth, visible = project_gaussians(mean_t, cov_t, cam)
    if not bool(visible[0]):
        return None
    return ProjectedGaussian(
        mean2d=means2d[0].numpy(),
        cov2d=cov2d[0].numpy(),
        depth=float(depth[0]),
    )
