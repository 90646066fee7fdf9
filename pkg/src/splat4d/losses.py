"""Training loss terms and their weighted combination.

Reconstruction is the usual L1 + D-SSIM mix; depth and flow supervision
are masked L1 against precomputed maps; the two uncertainty-aware terms
weight their penalties by the rendered uncertainty map and normalize by
its norm, so uniformly scaling the uncertainty leaves them unchanged and
zero-uncertainty regions are untouched. The uncertainty map is treated
as a constant inside both UA terms (it is a slowly refreshed statistic
of past renders, not a live function of the parameters).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractViolationError
from .metrics import ssim_torch

SSIM_MIX = 0.2
NORMALIZER_GUARD = 1e-8


@dataclass
class LossWeights:
    grid: float = 1e-4
    data: float = 0.5
    ua_diff: float = 0.2
    ua_tv: float = 0.01


@dataclass
class LossBreakdown:
    recon: float
    grid: float
    depth: float
    flow: float
    ua_diff: float | None
    ua_tv: float | None
    total: float

    def to_json(self) -> dict:
        out = {
            "recon": self.recon,
            "grid": self.grid,
            "depth": self.depth,
            "flow": self.flow,
            "total": self.total,
        }
        if self.ua_diff is not None:
            out["ua_diff"] = self.ua_diff
        if self.ua_tv is not None:
            out["ua_tv"] = self.ua_tv
        return out


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ContractViolationError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_recon(rendered: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """(1 - 0.2) * mean |delta| + 0.2 * (1 - SSIM)."""
    _check_same_shape(rendered, target, "loss_recon")
    l1 = (rendered - target).abs().mean()
    return (1.0 - SSIM_MIX) * l1 + SSIM_MIX * (1.0 - ssim_torch(rendered, target))


def loss_depth(rendered: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute depth difference over supervised pixels; 0 if none."""
    _check_same_shape(rendered, target, "loss_depth")
    diff = (rendered - target).abs()
    if mask is None:
        return diff.mean()
    m = mask.to(torch.bool)
    if not bool(m.any()):
        return torch.zeros((), dtype=rendered.dtype)
    return diff[m].mean()


def loss_flow(rendered: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean absolute flow difference over supervised pixel-channels; 0 if none."""
    _check_same_shape(rendered, target, "loss_flow")
    diff = (rendered - target).abs()
    if mask is None:
        return diff.mean()
    m = mask.to(torch.bool)
    if not bool(m.any()):
        return torch.zeros((), dtype=rendered.dtype)
    return diff[m].mean()


def loss_ua_diff(rendered: torch.Tensor, refined: torch.Tensor, uncertainty: torch.Tensor) -> torch.Tensor:
    """Uncertainty-weighted, uncertainty-normalized L2 + L1 against the refined image.

    Numerator norms run over all H*W*C entries of U (x) (rendered - refined);
    denominators over the H*W uncertainty map, as the formulation is written.
    """
    _check_same_shape(rendered, refined, "loss_ua_diff")
    if tuple(uncertainty.shape) != tuple(rendered.shape[:2]):
        raise ContractViolationError(
            f"loss_ua_diff: uncertainty shape {tuple(uncertainty.shape)} does not match image {tuple(rendered.shape[:2])}"
        )
    u = uncertainty.detach()
    l1_norm = u.abs().sum()
    if float(l1_norm) < NORMALIZER_GUARD:
        return torch.zeros((), dtype=rendered.dtype)
    weighted = u.unsqueeze(-1) * (rendered - refined)
    sq = weighted.square().sum()
    # Clamped sqrt keeps the gradient finite when the render matches the
    # refined image exactly (first use of a fresh identity cache); the
    # indicator restores the exact-zero value there.
    l2_term = torch.sqrt(torch.clamp(sq, min=1e-24)) * (sq > 0) / u.square().sum().sqrt()
    l1_term = weighted.abs().sum() / l1_norm
    return l2_term + l1_term


def loss_ua_tv(depth: torch.Tensor, uncertainty: torch.Tensor) -> torch.Tensor:
    """Uncertainty-weighted total variation of the depth map.

    Each direction normalizes by the summed pair-average uncertainty and
    contributes 0 when that normalizer underflows.
    """
    _check_same_shape(depth, uncertainty, "loss_ua_tv")
    if depth.shape[0] < 2 or depth.shape[1] < 2:
        raise ContractViolationError("loss_ua_tv needs at least a 2x2 map")
    u = uncertainty.detach()
    total = torch.zeros((), dtype=depth.dtype)
    for dd, uu in (
        (depth[1:] - depth[:-1], 0.5 * (u[1:] + u[:-1])),
        (depth[:, 1:] - depth[:, :-1], 0.5 * (u[:, 1:] + u[:, :-1])),
    ):
        norm = uu.sum()
        if float(norm) >= NORMALIZER_GUARD:
            total = total + (uu * dd.abs()).sum() / norm
    return total


def total_loss(
    recon: torch.Tensor,
    grid: torch.Tensor,
    depth: torch.Tensor,
    flow: torch.Tensor,
    weights: LossWeights,
    ua_diff: torch.Tensor | None = None,
    ua_tv: torch.Tensor | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Weighted combination; UA terms enter only when supplied (active phase)."""
    total = recon + weights.grid * grid + weights.data * (depth + flow)
    if ua_diff is not None:
        total = total + weights.ua_diff * ua_diff
    if ua_tv is not None:
        total = total + weights.ua_tv * ua_tv
    f = lambda t: float(t.detach()) if isinstance(t, torch.Tensor) else float(t)
    breakdown = LossBreakdown(
        recon=f(recon),
        grid=f(grid),
        depth=f(depth),
        flow=f(flow),
        ua_diff=None if ua_diff is None else f(ua_diff),
        ua_tv=None if ua_tv is None else f(ua_tv),
        total=f(total),
    )
    return total, breakdown
