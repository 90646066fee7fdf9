"""Per-primitive uncertainty from accumulated rendering contributions.

A primitive's contribution is the sum of its alpha-blend weights over
every pixel of every training frame; a squashed, inverted sigmoid of that
sum is its uncertainty: rarely-observed primitives score near 1,
well-observed ones near 0.
"""

from __future__ import annotations

import torch

from .cameras import Camera
from .deform import DeformationField
from .errors import InvalidParameterError
from .gaussians import GaussianCloud
from .render import RenderSettings, render


def accumulate_contributions(
    cloud: GaussianCloud,
    field: DeformationField | None,
    cameras: list[Camera],
    settings: RenderSettings = RenderSettings(),
) -> torch.Tensor:
    """Total blend weight each primitive collects over all training frames.

    Replaces (does not add to) the cloud's stored accumulator.
    """
    if not cameras:
        raise InvalidParameterError("need at least one training frame")
    total = torch.zeros(len(cloud), dtype=settings.dtype)
    with torch.no_grad():
        for cam in cameras:
            total += render(cloud, field, cam, settings).contributions
    cloud.contribution = total
    return total


def contribution_to_uncertainty(contribution: torch.Tensor, c0: float, c1: float) -> torch.Tensor:
    """U = 1 - logistic(c1 * (C - c0)); monotonically decreasing in C."""
    if c1 <= 0:
        raise InvalidParameterError("sigmoid slope c1 must be positive")
    c = torch.as_tensor(contribution)
    return 1.0 - torch.sigmoid(c1 * (c - c0))


def refresh_uncertainty(
    cloud: GaussianCloud,
    field: DeformationField | None,
    cameras: list[Camera],
    c0: float,
    c1: float,
    settings: RenderSettings = RenderSettings(),
) -> GaussianCloud:
    """Recompute contributions then map them to uncertainties; idempotent."""
    contributions = accumulate_contributions(cloud, field, cameras, settings)
    cloud.uncertainty = contribution_to_uncertainty(contributions, c0, c1).to(settings.dtype)
    return cloud
