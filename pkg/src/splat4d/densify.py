"""Primitive-set growth: dynamic-region seeding and adaptive density control.

Dynamic-region densification back-projects sampled dynamic pixels through
their supervision depth and seeds band-0 primitives colored by the image,
filling the holes a static-scene reconstruction leaves on moving objects.
Adaptive density control is the usual clone / split / prune maintenance
driven by accumulated positional-gradient statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .cameras import Camera
from .core import rgb_to_band0
from .dataio import Frame
from .errors import InvalidParameterError
from .gaussians import GaussianCloud

DEFAULT_FLOW_THRESHOLD = 1.0  # pixels
NEW_PRIMITIVE_OPACITY = 0.1
PRUNE_OPACITY = 0.005
SPLIT_SCALE_FACTOR = 1.6


def dynamic_mask(flow: np.ndarray, threshold: float = DEFAULT_FLOW_THRESHOLD) -> np.ndarray:
    """Pixels whose flow magnitude reaches the threshold.

    Assumes camera-induced motion was already compensated upstream.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if not np.isfinite(flow).all():
        raise InvalidParameterError("flow map contains non-finite values")
    return np.linalg.norm(flow, axis=-1) >= threshold


def backproject(pixel, depth, cam: Camera) -> np.ndarray:
    """Pixel coordinates + camera depth -> world point (inverse of projection)."""
    uv = np.atleast_2d(np.asarray(pixel, dtype=np.float64))
    d = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    if (d <= 0).any():
        raise InvalidParameterError("backproject needs positive depth")
    x = (uv[:, 0] - cam.cx) * d / cam.fx
    y = (uv[:, 1] - cam.cy) * d / cam.fy
    cam_pts = np.stack([x, y, d], axis=-1)
    world = (cam_pts - cam.translation) @ cam.rotation
    return world[0] if np.asarray(pixel).ndim == 1 else world


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    sampled_pixels: list[tuple[int, int, int]]  # (frame index, row, col)
    warning: str | None = None


def densify_dynamic(
    frames: list[Frame],
    budget: int,
    seed: int = 0,
    flow_threshold: float = DEFAULT_FLOW_THRESHOLD,
    bands: int = 1,
    fallback_scale: float = 0.05,
) -> DensifyResult:
    """Seed up to `budget` primitives on dynamic pixels across the frames.

    Pixels are stratified over the sorted candidate list and drawn with a
    fixed seed, so results are reproducible. Each primitive sits at the
    back-projection of its pixel, carries the pixel color in SH band 0
    (higher bands zero), opacity 0.1, and an isotropic scale from the mean
    distance to its 3 nearest sampled neighbors.
    """
    usable = [f for f in frames if f.depth is not None and (f.dynamic_mask is not None or f.flow is not None)]
    if not usable:
        raise InvalidParameterError("densify_dynamic needs at least one frame with depth and flow (or a dynamic mask)")

    candidates = []
    for fi, frame in enumerate(usable):
        mask = frame.dynamic_mask if frame.dynamic_mask is not None else dynamic_mask(frame.flow, flow_threshold)
        mask = mask & (frame.depth > 0)
        rows, cols = np.nonzero(mask)
        candidates.extend((fi, int(r), int(c)) for r, c in zip(rows, cols))

    if not candidates:
        empty = GaussianCloud.from_numpy(np.zeros((0, 3)), bands=bands)
        return DensifyResult(empty, [], warning="dynamic mask is empty; no primitives added")

    candidates.sort()
    rng = np.random.default_rng(seed)
    if len(candidates) <= budget:
        picked = candidates
    else:
        strata = np.array_split(np.arange(len(candidates)), budget)
        picked = [candidates[int(rng.integers(s[0], s[-1] + 1))] for s in strata]

    positions = []
    colors = []
    for fi, r, c in picked:
        frame = usable[fi]
        positions.append(backproject((c + 0.5, r + 0.5), float(frame.depth[r, c]), frame.camera))
        colors.append(frame.image[r, c])
    positions = np.asarray(positions)
    colors = np.asarray(colors)

    n = len(positions)
    if n >= 4:
        diff = positions[:, None, :] - positions[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        nn3 = np.sort(dist, axis=1)[:, :3].mean(axis=1)
        log_scales = np.log(np.maximum(nn3, 1e-6))[:, None].repeat(3, axis=1)
    else:
        log_scales = np.full((n, 3), np.log(fallback_scale))

    features = np.zeros((n, bands, 3))
    features[:, 0, :] = rgb_to_band0(colors)
    cloud = GaussianCloud.from_numpy(
        positions,
        log_scales=log_scales,
        opacity_logits=np.full(n, _logit(NEW_PRIMITIVE_OPACITY)),
        features=features,
        bands=bands,
    )
    return DensifyResult(cloud, picked)


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def cloud_from_points(
    xyz: np.ndarray,
    rgb: np.ndarray,
    bands: int = 1,
    opacity: float = NEW_PRIMITIVE_OPACITY,
    fallback_scale: float = 0.05,
) -> GaussianCloud:
    """Seed a cloud from a colored point set (SfM PLY or densified samples).

    Same construction rules as densify_dynamic: band-0 color, isotropic
    scale from the mean 3-nearest-neighbor distance.
    """
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    n = len(xyz)
    if n >= 4:
        diff = xyz[:, None, :] - xyz[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        nn3 = np.sort(dist, axis=1)[:, :3].mean(axis=1)
        log_scales = np.log(np.maximum(nn3, 1e-6))[:, None].repeat(3, axis=1)
    else:
        log_scales = np.full((n, 3), np.log(fallback_scale))
    features = np.zeros((n, bands, 3))
    features[:, 0, :] = rgb_to_band0(rgb)
    return GaussianCloud.from_numpy(
        xyz,
        log_scales=log_scales,
        opacity_logits=np.full(n, _logit(opacity)),
        features=features,
        bands=bands,
    )


@dataclass
class DensityControlConfig:
    grad_threshold: float = 2e-4
    split_scale_threshold: float = 0.08  # world units; larger high-grad splats split
    prune_opacity: float = PRUNE_OPACITY
    max_primitives: int = 200_000


@dataclass
class DensityControlStats:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    capped: bool = False
    # For each surviving primitive: index into the input cloud, or -1 for a
    # freshly created one (clone copies / split children start with zeroed
    # optimizer moments).
    source_index: torch.Tensor | None = None


def adaptive_density_control(
    cloud: GaussianCloud,
    grad_avg: torch.Tensor,
    config: DensityControlConfig = DensityControlConfig(),
) -> tuple[GaussianCloud, DensityControlStats]:
    """Clone small / split large high-gradient primitives, prune faint ones.

    Deterministic: split children are placed at +/- half the largest
    covariance axis instead of being sampled.
    """
    stats = DensityControlStats()
    n = len(cloud)
    if n == 0:
        stats.source_index = torch.zeros(0, dtype=torch.long)
        return cloud, stats
    grad_avg = grad_avg.detach()
    scales = cloud.scales().detach()
    max_scale = scales.max(dim=1).values
    hot = grad_avg > config.grad_threshold
    split_mask = hot & (max_scale > config.split_scale_threshold)
    clone_mask = hot & ~split_mask
    if n + int(clone_mask.sum()) + 2 * int(split_mask.sum()) > config.max_primitives:
        stats.capped = True
        split_mask = torch.zeros_like(split_mask)
        clone_mask = torch.zeros_like(clone_mask)

    pieces = [cloud]
    if clone_mask.any():
        pieces.append(cloud.select(clone_mask))
        stats.cloned = int(clone_mask.sum())

    if split_mask.any():
        parents = cloud.select(split_mask)
        covs = parents.covariances().detach()
        eigvals, eigvecs = torch.linalg.eigh(covs.to(torch.float64))
        axis = eigvecs[:, :, -1] * eigvals[:, -1:].sqrt()
        axis = axis.to(parents.positions.dtype)
        children = []
        for sign in (1.0, -1.0):
            child = parents.detach_clone()
            with torch.no_grad():
                child.positions += sign * 0.5 * axis
                child.log_scales -= np.log(SPLIT_SCALE_FACTOR)
            children.append(child)
        pieces.extend(children)
        stats.split = int(split_mask.sum())

    merged = GaussianCloud.concatenate(pieces) if len(pieces) > 1 else cloud.detach_clone()
    source = torch.cat([torch.arange(n), torch.full((len(merged) - n,), -1, dtype=torch.long)])

    # Drop the split parents (their two children replace them), then the faint.
    keep = torch.ones(len(merged), dtype=torch.bool)
    keep[:n] = ~split_mask
    faint = merged.opacities().detach() < config.prune_opacity
    stats.pruned = int((faint & keep).sum())
    keep &= ~faint
    stats.source_index = source[keep]
    return merged.select(keep), stats
