"""Learnable Gaussian-primitive cloud (struct-of-arrays over torch tensors).

Each primitive carries position, rotation quaternion, per-axis log scale,
opacity logit, SH features (degree 0 or 1), plus two non-learnable
statistics: an accumulated blend-weight contribution and the uncertainty
derived from it.
"""

from __future__ import annotations

import numpy as np
import torch

from .core import build_covariance
from .errors import InvalidParameterError

SUPPORTED_BANDS = (1, 4)  # SH degree 0 and 1


class GaussianCloud:
    """Parameter container; tensors are leaves with requires_grad for training."""

    PARAM_NAMES = ("positions", "rotations", "log_scales", "opacity_logits", "features")

    def __init__(
        self,
        positions: torch.Tensor,
        rotations: torch.Tensor,
        log_scales: torch.Tensor,
        opacity_logits: torch.Tensor,
        features: torch.Tensor,
        contribution: torch.Tensor | None = None,
        uncertainty: torch.Tensor | None = None,
    ):
        n = positions.shape[0]
        if features.dim() != 3 or features.shape[0] != n:
            raise InvalidParameterError(f"features must be (N, B, 3), got {tuple(features.shape)}")
        if features.shape[1] not in SUPPORTED_BANDS:
            raise InvalidParameterError(
                f"unsupported SH band count {features.shape[1]}; only degree 0/1 ({SUPPORTED_BANDS}) are supported"
            )
        self.positions = positions
        self.rotations = rotations
        self.log_scales = log_scales
        self.opacity_logits = opacity_logits
        self.features = features
        dt = positions.dtype
        self.contribution = contribution if contribution is not None else torch.zeros(n, dtype=dt)
        self.uncertainty = uncertainty if uncertainty is not None else torch.ones(n, dtype=dt)

    # -- construction -----------------------------------------------------

    @staticmethod
    def from_numpy(
        positions: np.ndarray,
        rotations: np.ndarray | None = None,
        log_scales: np.ndarray | None = None,
        opacity_logits: np.ndarray | None = None,
        features: np.ndarray | None = None,
        bands: int = 1,
        dtype: torch.dtype = torch.float32,
    ) -> "GaussianCloud":
        pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        n = pos.shape[0]
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if log_scales is None:
            log_scales = np.full((n, 3), np.log(0.1))
        if opacity_logits is None:
            opacity_logits = np.zeros(n)
        if features is None:
            features = np.zeros((n, bands, 3))
        t = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64), dtype=dtype)
        return GaussianCloud(t(pos), t(rotations), t(log_scales), t(opacity_logits), t(features))

    # -- derived quantities -----------------------------------------------

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def bands(self) -> int:
        return self.features.shape[1]

    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def covariances(self) -> torch.Tensor:
        return build_covariance(self.rotations, self.log_scales)

    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    # -- training plumbing --------------------------------------------------

    def parameters(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def requires_grad_(self, flag: bool = True) -> "GaussianCloud":
        for p in self.parameters().values():
            p.requires_grad_(flag)
        return self

    def normalize_rotations_(self):
        """Re-normalize quaternions in place; call after every optimizer step."""
        with torch.no_grad():
            self.rotations /= self.rotations.norm(dim=-1, keepdim=True)

    def to(self, dtype: torch.dtype) -> "GaussianCloud":
        return GaussianCloud(
            *(getattr(self, n).detach().to(dtype) for n in self.PARAM_NAMES),
            contribution=self.contribution.to(dtype),
            uncertainty=self.uncertainty.to(dtype),
        )

    def detach_clone(self) -> "GaussianCloud":
        return GaussianCloud(
            *(getattr(self, n).detach().clone() for n in self.PARAM_NAMES),
            contribution=self.contribution.clone(),
            uncertainty=self.uncertainty.clone(),
        )

    def select(self, mask_or_index) -> "GaussianCloud":
        return GaussianCloud(
            *(getattr(self, n).detach()[mask_or_index].clone() for n in self.PARAM_NAMES),
            contribution=self.contribution[mask_or_index].clone(),
            uncertainty=self.uncertainty[mask_or_index].clone(),
        )

    @staticmethod
    def concatenate(clouds: list["GaussianCloud"]) -> "GaussianCloud":
        if not clouds:
            raise InvalidParameterError("cannot concatenate zero clouds")
        tensors = [
            torch.cat([getattr(c, n).detach() for c in clouds], dim=0) for n in GaussianCloud.PARAM_NAMES
        ]
        return GaussianCloud(
            *tensors,
            contribution=torch.cat([c.contribution for c in clouds]),
            uncertainty=torch.cat([c.uncertainty for c in clouds]),
        )

    # -- serialization ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {n: getattr(self, n).detach().numpy().astype(np.float32) for n in self.PARAM_NAMES}
        out["contribution"] = self.contribution.detach().numpy().astype(np.float32)
        out["uncertainty"] = self.uncertainty.detach().numpy().astype(np.float32)
        return out

    @staticmethod
    def from_state_arrays(arrays: dict[str, np.ndarray], dtype: torch.dtype = torch.float32) -> "GaussianCloud":
        return GaussianCloud(
            *(torch.as_tensor(arrays[n], dtype=dtype) for n in GaussianCloud.PARAM_NAMES),
            contribution=torch.as_tensor(arrays["contribution"], dtype=dtype),
            uncertainty=torch.as_tensor(arrays["uncertainty"], dtype=dtype),
        )
