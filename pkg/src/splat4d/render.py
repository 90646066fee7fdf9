"""Depth-sorted alpha-blending rasterizer over 16x16 pixel tiles.

Per pixel r, splat k contributes weight
    w_k(r) = alpha_k * G_k(r) * prod_{j<k} (1 - alpha_j * G_j(r))
with G the unnormalized 2D Gaussian of the projected footprint. Color is
composited over a background with the leftover transmittance; depth, flow
and uncertainty maps are the raw weighted sums of per-splat payloads
(no division by accumulated opacity, so semi-transparent regions bias
toward zero -- documented behavior).

Two run modes share this code path: float32 production and float64
verification. `exact=True` disables the contribution skip, the early
transmittance termination, and per-tile culling so the output is a smooth
function of the parameters (finite-difference checks, oracle comparisons).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
import torch

from .cameras import NEAR_PLANE, Camera
from .core import build_covariance, camera_tensors, eval_sh, project_gaussians
from .deform import DeformationField, deform
from .errors import ContractViolationError
from .gaussians import GaussianCloud

ALPHA_SKIP = 1.0 / 255.0
TRANSMITTANCE_MIN = 1e-4
# Cull radius in sigmas. exp(-0.5 * 3.33^2) < 1/255, so culling is strictly
# conservative with respect to the contribution-skip threshold.
CULL_SIGMA = 3.33


@dataclass(frozen=True)
class RenderSettings:
    dtype: torch.dtype = torch.float32
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tile_size: int = 16
    alpha_skip: float = ALPHA_SKIP
    transmittance_min: float = TRANSMITTANCE_MIN
    exact: bool = False
    near: float = NEAR_PLANE


@dataclass
class SplatList:
    """Per-view splats sorted ascending by depth (ties by primitive index)."""

    indices: torch.Tensor  # (M,) original primitive indices
    means2d: torch.Tensor  # (M, 2) pixels
    cov_inv: torch.Tensor  # (M, 2, 2)
    depths: torch.Tensor  # (M,) camera-space z
    alphas: torch.Tensor  # (M,)
    colors: torch.Tensor  # (M, 3)
    uncertainties: torch.Tensor  # (M,)
    flows: torch.Tensor | None = None  # (M, 2) pixel displacements
    radii: torch.Tensor | None = None  # (M,) cull radii in pixels

    def __len__(self) -> int:
        return int(self.indices.shape[0])


@dataclass
class RenderOutput:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W)
    uncertainty: torch.Tensor  # (H, W)
    alpha: torch.Tensor  # (H, W)
    flow: torch.Tensor | None  # (H, W, 2) when a flow target frame was given
    contributions: torch.Tensor  # (N,) per-primitive sum of blend weights (detached)
    ctx: "RenderContext | None" = None

    def numpy(self) -> dict[str, np.ndarray]:
        out = {
            "color": self.color.detach().numpy(),
            "depth": self.depth.detach().numpy(),
            "uncertainty": self.uncertainty.detach().numpy(),
            "alpha": self.alpha.detach().numpy(),
            "contributions": self.contributions.detach().numpy(),
        }
        if self.flow is not None:
            out["flow"] = self.flow.detach().numpy()
        return out


@dataclass
class RenderContext:
    """Links a forward pass to its parameter leaves for render_backward."""

    params: dict[str, torch.Tensor]
    output: "RenderOutput | None" = None
    consumed: bool = dataclass_field(default=False)


def _invert_cov2d(cov2d: torch.Tensor) -> torch.Tensor:
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    inv = torch.stack([c, -b, -b, a], dim=-1).reshape(-1, 2, 2)
    return inv / det.reshape(-1, 1, 1)


def _cull_radius(cov2d: torch.Tensor) -> torch.Tensor:
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    eig_max = mid + torch.sqrt(torch.clamp((0.5 * (a - c)) ** 2 + b * b, min=0.0))
    return CULL_SIGMA * torch.sqrt(eig_max)


def prepare_splats(
    cloud: GaussianCloud,
    field: DeformationField | None,
    cam: Camera,
    settings: RenderSettings = RenderSettings(),
    flow_to: Camera | None = None,
) -> SplatList:
    """Deform, project, decode and depth-sort the cloud for one view."""
    dtype = settings.dtype
    pos = cloud.positions.to(dtype)
    rot = cloud.rotations.to(dtype)
    log_s = cloud.log_scales.to(dtype)
    mu_t, q_t, s_t = deform(pos, rot, log_s, field, cam.t)
    covs = build_covariance(q_t, s_t)
    means2d, cov2d, depth, visible = project_gaussians(mu_t, covs, cam, near=settings.near)

    idx = torch.nonzero(visible, as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        empty = lambda *shape: torch.zeros(*shape, dtype=dtype)
        return SplatList(
            indices=idx,
            means2d=empty(0, 2),
            cov_inv=empty(0, 2, 2),
            depths=empty(0),
            alphas=empty(0),
            colors=empty(0, 3),
            uncertainties=empty(0),
            flows=empty(0, 2) if flow_to is not None else None,
            radii=empty(0),
        )

    _, _, center = camera_tensors(cam, dtype)
    dirs = mu_t[idx] - center
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    colors = eval_sh(cloud.features.to(dtype)[idx], dirs)
    alphas = torch.sigmoid(cloud.opacity_logits.to(dtype))[idx]

    flows = None
    if flow_to is not None:
        mu_t2, _, _ = deform(pos, rot, log_s, field, float(flow_to.t))
        means2d_b, _, _, visible_b = project_gaussians(mu_t2, covs, flow_to, near=settings.near)
        disp = means2d_b - means2d
        # Behind the second camera's near plane: zero the payload, keep the weight.
        flows = torch.where(visible_b.unsqueeze(-1), disp, torch.zeros_like(disp))[idx]

    order = torch.argsort(depth[idx], stable=True)
    sel = idx[order]
    cov2d_v = cov2d[sel]
    return SplatList(
        indices=sel,
        means2d=means2d[sel],
        cov_inv=_invert_cov2d(cov2d_v),
        depths=depth[sel],
        alphas=alphas[order],
        colors=colors[order],
        uncertainties=cloud.uncertainty.to(dtype)[sel],
        flows=flows[order] if flows is not None else None,
        radii=_cull_radius(cov2d_v),
    )


def _tile_weights(splats: SplatList, sel: torch.Tensor, pix: torch.Tensor, settings: RenderSettings) -> torch.Tensor:
    """Blend weights for one tile: pix (P, 2) x selected splats -> (P, M)."""
    d = pix.unsqueeze(1) - splats.means2d[sel].unsqueeze(0)  # (P, M, 2)
    cov_inv = splats.cov_inv[sel]
    quad = (
        d[..., 0] * d[..., 0] * cov_inv[:, 0, 0]
        + 2.0 * d[..., 0] * d[..., 1] * cov_inv[:, 0, 1]
        + d[..., 1] * d[..., 1] * cov_inv[:, 1, 1]
    )
    g = torch.exp(-0.5 * quad)
    ag = splats.alphas[sel].unsqueeze(0) * g
    if not settings.exact:
        ag = ag * (ag >= settings.alpha_skip)
    trans = torch.cumprod(1.0 - ag, dim=1)
    ones = torch.ones_like(trans[:, :1])
    trans_in = torch.cat([ones, trans[:, :-1]], dim=1)  # transmittance entering each splat
    weights = ag * trans_in
    if not settings.exact:
        weights = weights * (trans_in >= settings.transmittance_min)
    return weights


def blend_weights(splats: SplatList, pixel, settings: RenderSettings = RenderSettings()) -> list[tuple[int, float]]:
    """Per-splat blend weights at one pixel, in depth order.

    Returns every splat's (primitive index, weight); skipped or terminated
    entries carry weight 0.
    """
    pix = torch.as_tensor(pixel, dtype=splats.depths.dtype).reshape(1, 2)
    sel = torch.arange(len(splats))
    w = _tile_weights(splats, sel, pix, settings)[0]
    return [(int(i), float(v)) for i, v in zip(splats.indices, w)]


def _tile_splat_matrix(splats: SplatList, tiles: torch.Tensor, exact: bool) -> torch.Tensor:
    """(T, M) bool: splat bounding circle intersects tile rect (x0, x1, y0, y1)."""
    if exact:
        return torch.ones(tiles.shape[0], len(splats), dtype=torch.bool)
    m2d = splats.means2d.detach()
    r = splats.radii.detach()
    x0, x1, y0, y1 = tiles[:, 0:1], tiles[:, 1:2], tiles[:, 2:3], tiles[:, 3:4]
    return (
        (m2d[None, :, 0] + r >= x0)
        & (m2d[None, :, 0] - r <= x1)
        & (m2d[None, :, 1] + r >= y0)
        & (m2d[None, :, 1] - r <= y1)
    )


def render(
    cloud: GaussianCloud,
    field: DeformationField | None,
    cam: Camera,
    settings: RenderSettings = RenderSettings(),
    flow_to: Camera | None = None,
    retain_ctx: bool = False,
) -> RenderOutput:
    """Rasterize one view; flow is produced when `flow_to` names the paired frame."""
    dtype = settings.dtype
    H, W = cam.height, cam.width
    splats = prepare_splats(cloud, field, cam, settings, flow_to=flow_to)
    bg = torch.as_tensor(settings.background, dtype=dtype)
    contributions = torch.zeros(len(cloud), dtype=dtype)

    ctx = None
    if retain_ctx:
        params = dict(cloud.parameters())
        if field is not None:
            params.update(field.parameters())
        ctx = RenderContext(params=params)

    if len(splats) == 0:
        out = RenderOutput(
            color=bg.expand(H, W, 3).clone(),
            depth=torch.zeros(H, W, dtype=dtype),
            uncertainty=torch.zeros(H, W, dtype=dtype),
            alpha=torch.zeros(H, W, dtype=dtype),
            flow=torch.zeros(H, W, 2, dtype=dtype) if flow_to is not None else None,
            contributions=contributions,
            ctx=ctx,
        )
        if ctx is not None:
            ctx.output = out
        return out

    # All tiles are processed in one padded batch: per tile, the culled splat
    # subset keeps its depth order; padded slots carry alpha 0, which is an
    # exact no-op in both the transmittance product and the weighted sums.
    ts = settings.tile_size
    ty = (H + ts - 1) // ts
    tx = (W + ts - 1) // ts
    tile_y0 = torch.arange(ty).repeat_interleave(tx) * ts
    tile_x0 = torch.arange(tx).repeat(ty) * ts
    tiles = torch.stack([tile_x0, tile_x0 + ts, tile_y0, tile_y0 + ts], dim=1)

    keep = _tile_splat_matrix(splats, tiles, settings.exact)  # (T, M)
    counts = keep.sum(dim=1)
    m_star = int(counts.max())
    if m_star == 0:
        empty = render(GaussianCloud.from_numpy(np.zeros((0, 3))), None, cam, settings, flow_to)
        empty.contributions = contributions
        empty.ctx = ctx
        if ctx is not None:
            ctx.output = empty
        return empty

    # Stable argsort pushes kept splats to the front, preserving depth order.
    order = torch.argsort(~keep, dim=1, stable=True)[:, :m_star]  # (T, M*)
    pad = keep.gather(1, order)  # True where a real splat sits

    # Padded full-size pixel blocks; edge excess is cropped at assembly.
    ys = (tile_y0.reshape(-1, 1) + torch.arange(ts)).reshape(-1, 1, ts, 1)
    xs = (tile_x0.reshape(-1, 1) + torch.arange(ts)).reshape(-1, 1, 1, ts)
    pix = torch.stack(
        torch.broadcast_tensors(xs.to(dtype) + 0.5, ys.to(dtype) + 0.5), dim=-1
    ).reshape(ty * tx, ts * ts, 2)  # (T, P, 2) as (u, v)

    means = splats.means2d[order]  # (T, M*, 2)
    cov_inv = splats.cov_inv[order]
    alphas = splats.alphas[order] * pad.to(dtype)

    # Contiguous per-component tensors; strided broadcast views fall off the
    # vectorized elementwise path and cost an order of magnitude more.
    mu_u = means[..., 0].contiguous().unsqueeze(1)  # (T, 1, M*)
    mu_v = means[..., 1].contiguous().unsqueeze(1)
    ci_a = cov_inv[..., 0, 0].contiguous().unsqueeze(1)
    ci_b = cov_inv[..., 0, 1].contiguous().unsqueeze(1)
    ci_c = cov_inv[..., 1, 1].contiguous().unsqueeze(1)
    px_u = pix[..., 0].contiguous().unsqueeze(2)  # (T, P, 1)
    px_v = pix[..., 1].contiguous().unsqueeze(2)
    du = px_u - mu_u  # (T, P, M*)
    dv = px_v - mu_v
    quad = du * du * ci_a + 2.0 * (du * dv) * ci_b + dv * dv * ci_c
    ag = alphas.unsqueeze(1) * torch.exp(-0.5 * quad)  # (T, P, M*)
    if not settings.exact:
        ag = ag * (ag >= settings.alpha_skip)
    trans = torch.cumprod(1.0 - ag, dim=2)
    trans_in = torch.cat([torch.ones_like(trans[:, :, :1]), trans[:, :, :-1]], dim=2)
    w = ag * trans_in
    if not settings.exact:
        w = w * (trans_in >= settings.transmittance_min)
    # Edge tiles extend past the image; those pixels are cropped from the
    # assembled maps but must not leak into the contribution sums either.
    in_image = (pix[..., 0] < W) & (pix[..., 1] < H)  # (T, P)
    w = w * in_image.unsqueeze(-1)

    with torch.no_grad():
        flat_idx = splats.indices[order].reshape(-1)
        contributions.index_add_(0, flat_idx, w.detach().sum(dim=1).reshape(-1))

    def assemble(tiled: torch.Tensor, channels: int) -> torch.Tensor:
        full = tiled.reshape(ty, tx, ts, ts, channels).permute(0, 2, 1, 3, 4)
        return full.reshape(ty * ts, tx * ts, channels)[:H, :W]

    a = w.sum(dim=2)
    alpha_img = assemble(a.unsqueeze(-1), 1).squeeze(-1)
    color = torch.einsum("tpm,tmc->tpc", w, splats.colors[order])
    color_img = assemble(color, 3) + (1.0 - alpha_img).unsqueeze(-1) * bg
    depth_img = assemble((w * splats.depths[order].unsqueeze(1)).sum(dim=2).unsqueeze(-1), 1).squeeze(-1)
    unc_img = assemble((w * splats.uncertainties[order].unsqueeze(1)).sum(dim=2).unsqueeze(-1), 1).squeeze(-1)
    flow_img = None
    if flow_to is not None:
        flow = torch.einsum("tpm,tmc->tpc", w, splats.flows[order])
        flow_img = assemble(flow, 2)

    out = RenderOutput(
        color=color_img,
        depth=depth_img,
        uncertainty=unc_img,
        alpha=alpha_img,
        flow=flow_img,
        contributions=contributions,
        ctx=ctx,
    )
    if ctx is not None:
        ctx.output = out
    return out


def render_flow_pair(
    cloud: GaussianCloud,
    field: DeformationField | None,
    cam_a: Camera,
    cam_b: Camera,
    settings: RenderSettings = RenderSettings(),
) -> torch.Tensor:
    """Flow map from frame A to frame B, blended with frame-A weights."""
    return render(cloud, field, cam_a, settings, flow_to=cam_b).flow


def render_backward(ctx: RenderContext, upstream: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Chain-rule gradients of the retained forward pass w.r.t. all parameters.

    `upstream` maps channel names to per-pixel gradient tensors of matching
    shape. Parameters a channel does not reach get zero gradients.
    """
    if ctx is None or ctx.output is None:
        raise ContractViolationError("render_backward needs a context from render(retain_ctx=True)")
    if ctx.consumed:
        raise ContractViolationError("render context already consumed by a previous backward pass")
    out = ctx.output
    total = None
    for name, grad in upstream.items():
        channel = getattr(out, name)
        if channel is None:
            raise ContractViolationError(f"channel {name!r} was not rendered in the forward pass")
        if tuple(grad.shape) != tuple(channel.shape):
            raise ContractViolationError(
                f"upstream gradient for {name!r} has shape {tuple(grad.shape)}, expected {tuple(channel.shape)}"
            )
        term = (channel * grad.to(channel.dtype)).sum()
        total = term if total is None else total + term
    if total is None:
        raise ContractViolationError("no upstream gradients supplied")
    ctx.consumed = True
    names = list(ctx.params)
    leaves = [ctx.params[n] for n in names]
    grads = torch.autograd.grad(total, leaves, allow_unused=True, retain_graph=False)
    return {n: (g if g is not None else torch.zeros_like(p)) for n, p, g in zip(names, leaves, grads)}
