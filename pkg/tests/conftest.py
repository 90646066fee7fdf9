import numpy as np
import pytest
import torch

from splat4d.cameras import Camera, look_at
from splat4d.gaussians import GaussianCloud


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def make_camera(
    width=32,
    height=32,
    fx=40.0,
    fy=40.0,
    eye=(0.0, 0.0, -4.0),
    target=(0.0, 0.0, 0.0),
    t=0.0,
) -> Camera:
    return Camera(
        fx=fx,
        fy=fy,
        cx=width / 2,
        cy=height / 2,
        world_to_camera=look_at(np.asarray(eye, dtype=np.float64), np.asarray(target, dtype=np.float64)),
        width=width,
        height=height,
        t=t,
    )


def random_cloud(rng: np.random.Generator, n=20, bands=4, spread=1.2, dtype=torch.float32) -> GaussianCloud:
    """Cloud of moderate random primitives in front of the default camera."""
    positions = rng.uniform(-spread, spread, size=(n, 3))
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=-1, keepdims=True)
    log_scales = rng.uniform(np.log(0.05), np.log(0.35), size=(n, 3))
    opacity_logits = rng.uniform(-1.5, 2.5, size=n)
    features = rng.normal(scale=0.3, size=(n, bands, 3))
    cloud = GaussianCloud.from_numpy(
        positions, rotations, log_scales, opacity_logits, features, dtype=dtype
    )
    cloud.uncertainty = torch.as_tensor(rng.uniform(0.0, 1.0, size=n), dtype=dtype)
    return cloud
