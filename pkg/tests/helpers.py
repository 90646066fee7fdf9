"""Shared test machinery: micro-scene builders and finite-difference checks."""

import numpy as np
import torch

from splat4d.cameras import Camera, look_at
from splat4d.deform import DeformationField
from splat4d.gaussians import GaussianCloud
from splat4d.render import RenderSettings, render


def micro_scene(seed: int, n_prims=5, with_field=True, image=8):
    """Small float64 scene tuned to stay away from every non-smooth point
    (SH clamp, near plane, interpolation-box edges) so central differences
    are trustworthy."""
    rng = np.random.default_rng(seed)
    positions = rng.uniform(-0.9, 0.9, size=(n_prims, 3))
    rotations = rng.normal(size=(n_prims, 4))
    rotations /= np.linalg.norm(rotations, axis=-1, keepdims=True)
    log_scales = rng.uniform(np.log(0.15), np.log(0.45), size=(n_prims, 3))
    opacity_logits = rng.uniform(-1.0, 1.5, size=n_prims)
    features = np.zeros((n_prims, 4, 3))
    features[:, 0, :] = rng.uniform(-0.8, 0.8, size=(n_prims, 3))
    features[:, 1:, :] = rng.uniform(-0.1, 0.1, size=(n_prims, 3, 3))
    cloud = GaussianCloud.from_numpy(
        positions, rotations, log_scales, opacity_logits, features, dtype=torch.float64
    )
    cloud.uncertainty = torch.as_tensor(rng.uniform(0.1, 0.9, size=n_prims), dtype=torch.float64)

    field = None
    if with_field:
        field = DeformationField(
            box_min=(-2.0, -2.0, -2.0),
            box_max=(2.0, 2.0, 2.0),
            feature_dim=2,
            spatial_res=3,
            time_res=3,
            hidden_dim=4,
            seed=seed,
            dtype=torch.float64,
        )
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            field.w2.normal_(std=0.03, generator=gen)
            field.b2.normal_(std=0.01, generator=gen)
            # Keep ReLU pre-activations away from their kink: the zero-init
            # bias would leave every hidden unit at the non-smooth point,
            # which finite differences cannot handle.
            field.b1.uniform_(0.1, 0.4, generator=gen)

    cam = Camera(
        fx=float(image) * 1.3,
        fy=float(image) * 1.3,
        cx=image / 2,
        cy=image / 2,
        world_to_camera=look_at(np.array([0.2, -0.3, -3.6]), np.array([0.0, 0.0, 0.0])),
        width=image,
        height=image,
        t=float(rng.uniform(0.2, 0.8)),
    )
    cam_b = Camera(
        fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
        world_to_camera=look_at(np.array([0.5, -0.1, -3.4]), np.array([0.0, 0.0, 0.0])),
        width=image, height=image,
        t=float(rng.uniform(0.2, 0.8)),
    )
    return cloud, field, cam, cam_b


def scalar_render_loss(cloud, field, cam, cam_b, weights: dict) -> torch.Tensor:
    """Deterministic scalar probe: random-weighted sum of all channels."""
    settings = RenderSettings(dtype=torch.float64, exact=True)
    out = render(cloud, field, cam, settings, flow_to=cam_b)
    loss = (
        (out.color * weights["color"]).sum()
        + (out.depth * weights["depth"]).sum()
        + (out.uncertainty * weights["uncertainty"]).sum()
        + (out.alpha * weights["alpha"]).sum()
        + (out.flow * weights["flow"]).sum()
    )
    return loss


def channel_weights(seed: int, image: int) -> dict:
    gen = torch.Generator().manual_seed(seed + 1000)
    r = lambda *shape: torch.randn(*shape, generator=gen, dtype=torch.float64)
    return {
        "color": r(image, image, 3),
        "depth": r(image, image),
        "uncertainty": r(image, image),
        "alpha": r(image, image),
        "flow": r(image, image, 2),
    }


def finite_difference_check(params: dict, eval_fn, analytic: dict, h=1e-4, rel_tol=1e-4,
                            max_per_tensor=None, rng=None):
    """Central-difference every element (or a random subset) of every tensor.

    h = 1e-4 balances truncation against float64 roundoff for loss values
    of order 10 (roundoff floor eps*|loss|/h ~ 1e-10). Relative error uses
    max(|analytic|, |fd|) as the scale with a small-denominator floor so
    parameters with (near-)zero influence do not produce spurious failures.
    Returns the worst relative error observed.
    """
    worst = 0.0
    for name, p in params.items():
        flat = p.detach().reshape(-1)
        n = flat.numel()
        if max_per_tensor is not None and n > max_per_tensor:
            idx = rng.choice(n, size=max_per_tensor, replace=False)
        else:
            idx = range(n)
        ga = analytic[name].reshape(-1)
        for i in idx:
            with torch.no_grad():
                orig = flat[i].item()
                flat[i] = orig + h
                up = eval_fn()
                flat[i] = orig - h
                dn = eval_fn()
                flat[i] = orig
            fd = (up - dn) / (2 * h)
            a = float(ga[i])
            denom = max(abs(a), abs(fd), 1e-6)
            rel = abs(a - fd) / denom
            worst = max(worst, rel)
            assert rel < rel_tol, f"{name}[{i}]: analytic={a:.3e} fd={fd:.3e} rel={rel:.3e}"
    return worst


def run_gradient_suite(seed: int, max_per_tensor=None, rng=None) -> float:
    """One micro-scene: autograd vs finite differences over every parameter class."""
    cloud, field, cam, cam_b = micro_scene(seed)
    cloud.requires_grad_(True)
    field.requires_grad_(True)
    weights = channel_weights(seed, cam.width)
    params = dict(cloud.parameters())
    params.update(field.parameters())

    loss = scalar_render_loss(cloud, field, cam, cam_b, weights)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    analytic = {
        n: (g if g is not None else torch.zeros_like(p))
        for (n, p), g in zip(params.items(), grads)
    }

    def eval_fn():
        return float(scalar_render_loss(cloud, field, cam, cam_b, weights))

    return finite_difference_check(
        params, eval_fn, analytic, rel_tol=1e-4, max_per_tensor=max_per_tensor, rng=rng
    )
