"""Time-conditioned deformation of canonical primitives.

Six factored feature planes (xy, xz, yz, xt, yt, zt) are bilinearly
sampled, fused by elementwise product, and decoded by a small two-layer
perceptron into (delta_position, delta_rotation, delta_log_scale). The
decoder's final layer is zero-initialized so a fresh field is exactly the
identity deformation.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import DegenerateRotationError, InvalidParameterError

PLANE_NAMES = ("xy", "xz", "yz", "xt", "yt", "zt")
# Axis indices into the (x, y, z, t) coordinate tuple for each plane.
PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2), "xt": (0, 3), "yt": (1, 3), "zt": (2, 3)}
OUT_DIM = 10  # 3 position + 4 rotation + 3 log-scale deltas


def _bilinear_sample(plane: torch.Tensor, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Sample (R0, R1, F) plane at normalized coords a, b in [0, 1] -> (N, F)."""
    r0, r1, _ = plane.shape
    ga = torch.clamp(a, 0.0, 1.0) * (r0 - 1)
    gb = torch.clamp(b, 0.0, 1.0) * (r1 - 1)
    ia0 = torch.clamp(ga.floor().long(), max=r0 - 2)
    ib0 = torch.clamp(gb.floor().long(), max=r1 - 2)
    wa = ga - ia0
    wb = gb - ib0
    f00 = plane[ia0, ib0]
    f01 = plane[ia0, ib0 + 1]
    f10 = plane[ia0 + 1, ib0]
    f11 = plane[ia0 + 1, ib0 + 1]
    wa = wa.unsqueeze(-1)
    wb = wb.unsqueeze(-1)
    return (
        f00 * (1 - wa) * (1 - wb)
        + f01 * (1 - wa) * wb
        + f10 * wa * (1 - wb)
        + f11 * wa * wb
    )


class DeformationField:
    """Factored space-time grids plus decoder; all tensors are plain leaves."""

    def __init__(
        self,
        box_min,
        box_max,
        feature_dim: int = 8,
        spatial_res: int = 16,
        time_res: int = 16,
        hidden_dim: int = 32,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        if spatial_res < 2 or time_res < 2:
            raise InvalidParameterError("grid resolutions must be >= 2 per axis")
        self.box_min = np.asarray(box_min, dtype=np.float64)
        self.box_max = np.asarray(box_max, dtype=np.float64)
        if not np.all(self.box_max > self.box_min):
            raise InvalidParameterError("normalization box must have positive extent")
        self.feature_dim = feature_dim
        self.spatial_res = spatial_res
        self.time_res = time_res
        self.hidden_dim = hidden_dim
        gen = torch.Generator().manual_seed(seed)
        self.planes: dict[str, torch.Tensor] = {}
        for name in PLANE_NAMES:
            res_b = time_res if "t" in name else spatial_res
            if "t" in name:
                # Time planes start at 1 so product fusion is spatial at init.
                plane = torch.ones(spatial_res, res_b, feature_dim, dtype=dtype)
            else:
                plane = torch.empty(spatial_res, res_b, feature_dim, dtype=dtype).uniform_(
                    0.1, 0.5, generator=gen
                )
            self.planes[name] = plane
        k = 1.0 / np.sqrt(feature_dim)
        self.w1 = torch.empty(hidden_dim, feature_dim, dtype=dtype).uniform_(-k, k, generator=gen)
        self.b1 = torch.zeros(hidden_dim, dtype=dtype)
        self.w2 = torch.zeros(OUT_DIM, hidden_dim, dtype=dtype)  # zero => identity deformation
        self.b2 = torch.zeros(OUT_DIM, dtype=dtype)

    # -- queries -------------------------------------------------------------

    def normalize_positions(self, positions: torch.Tensor) -> torch.Tensor:
        lo = torch.as_tensor(self.box_min, dtype=positions.dtype)
        hi = torch.as_tensor(self.box_max, dtype=positions.dtype)
        return torch.clamp((positions - lo) / (hi - lo), 0.0, 1.0)

    def fused_features(self, positions: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """(N, 3) positions, scalar or (N,) t -> (N, F) product-fused features."""
        norm = self.normalize_positions(positions)
        tt = torch.as_tensor(t, dtype=positions.dtype)
        if tt.dim() == 0:
            tt = tt.expand(positions.shape[0])
        tt = torch.clamp(tt, 0.0, 1.0)
        coords = (norm[:, 0], norm[:, 1], norm[:, 2], tt)
        fused = None
        for name in PLANE_NAMES:
            ia, ib = PLANE_AXES[name]
            feat = _bilinear_sample(self.planes[name], coords[ia], coords[ib])
            fused = feat if fused is None else fused * feat
        return fused

    def decode(self, fused: torch.Tensor) -> torch.Tensor:
        h = torch.relu(fused @ self.w1.T + self.b1)
        return h @ self.w2.T + self.b2

    def query(self, positions: torch.Tensor, t) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """-> (delta_position (N,3), delta_rotation (N,4), delta_log_scale (N,3))."""
        out = self.decode(self.fused_features(positions, t))
        return out[:, 0:3], out[:, 3:7], out[:, 7:10]

    # -- training plumbing -----------------------------------------------------

    def parameters(self) -> dict[str, torch.Tensor]:
        params = {f"plane_{n}": p for n, p in self.planes.items()}
        params.update({"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2})
        return params

    def requires_grad_(self, flag: bool = True) -> "DeformationField":
        for p in self.parameters().values():
            p.requires_grad_(flag)
        return self

    def to(self, dtype: torch.dtype) -> "DeformationField":
        other = DeformationField.__new__(DeformationField)
        other.box_min = self.box_min.copy()
        other.box_max = self.box_max.copy()
        other.feature_dim = self.feature_dim
        other.spatial_res = self.spatial_res
        other.time_res = self.time_res
        other.hidden_dim = self.hidden_dim
        other.planes = {n: p.detach().to(dtype) for n, p in self.planes.items()}
        other.w1 = self.w1.detach().to(dtype)
        other.b1 = self.b1.detach().to(dtype)
        other.w2 = self.w2.detach().to(dtype)
        other.b2 = self.b2.detach().to(dtype)
        return other

    def detach_clone(self) -> "DeformationField":
        other = self.to(self.w1.dtype)
        other.planes = {n: p.clone() for n, p in other.planes.items()}
        other.w1, other.b1 = other.w1.clone(), other.b1.clone()
        other.w2, other.b2 = other.w2.clone(), other.b2.clone()
        return other

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"field_{k}": v.detach().numpy().astype(np.float32) for k, v in self.parameters().items()}

    def meta(self) -> dict:
        return {
            "box_min": [float(v) for v in self.box_min],
            "box_max": [float(v) for v in self.box_max],
            "feature_dim": self.feature_dim,
            "spatial_res": self.spatial_res,
            "time_res": self.time_res,
            "hidden_dim": self.hidden_dim,
        }

    @staticmethod
    def from_state(meta: dict, arrays: dict[str, np.ndarray], dtype: torch.dtype = torch.float32) -> "DeformationField":
        field = DeformationField(
            box_min=meta["box_min"],
            box_max=meta["box_max"],
            feature_dim=int(meta["feature_dim"]),
            spatial_res=int(meta["spatial_res"]),
            time_res=int(meta["time_res"]),
            hidden_dim=int(meta["hidden_dim"]),
            dtype=dtype,
        )
        for name in PLANE_NAMES:
            field.planes[name] = torch.as_tensor(arrays[f"field_plane_{name}"], dtype=dtype)
        field.w1 = torch.as_tensor(arrays["field_w1"], dtype=dtype)
        field.b1 = torch.as_tensor(arrays["field_b1"], dtype=dtype)
        field.w2 = torch.as_tensor(arrays["field_w2"], dtype=dtype)
        field.b2 = torch.as_tensor(arrays["field_b2"], dtype=dtype)
        return field


def deform(
    positions: torch.Tensor,
    rotations: torch.Tensor,
    log_scales: torch.Tensor,
    field: DeformationField | None,
    t,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Apply the field at time t; a None field is the identity.

    Position and log-scale deltas add; the rotation delta adds in quaternion
    coordinates and the result is renormalized (log-scale addition keeps the
    scales positive, which raw scale-matrix addition would not).
    """
    if field is None:
        return positions, rotations / rotations.norm(dim=-1, keepdim=True), log_scales
    dpos, drot, dscale = field.query(positions, t)
    q = rotations + drot
    norms = q.norm(dim=-1, keepdim=True)
    if (norms < 1e-8).any():
        raise DegenerateRotationError("deformed quaternion has near-zero norm")
    return positions + dpos, q / norms, log_scales + dscale


def grid_smoothness(field: DeformationField) -> torch.Tensor:
    """Mean squared difference of adjacent grid features over all six planes.

    Zero iff every plane is constant; the mean runs over every neighbor pair
    and feature channel of every plane.
    """
    total = None
    count = 0
    for plane in field.planes.values():
        for diff in (plane[1:] - plane[:-1], plane[:, 1:] - plane[:, :-1]):
            sq = (diff * diff).sum()
            total = sq if total is None else total + sq
            count += diff.numel()
    return total / count
