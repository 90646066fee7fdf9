"""Deterministic (eta = 0) DDIM over the blur-bank clean-image estimator.

Pipeline per image: encode to [-1, 1], perturb to timestep t with
Gaussian noise, then walk the timestep ladder t -> 0; each step predicts
the clean image, converts it to a noise estimate, and re-projects onto
the next timestep's signal/noise mix.
"""

from __future__ import annotations

import numpy as np

from .denoiser import BlurBankDenoiser
from .schedule import ALPHA_BAR, noise_sigma, sample_steps, strength_to_timestep, timestep_ladder


def encode(image: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(image, dtype=np.float64) - 1.0


def decode(latent: np.ndarray) -> np.ndarray:
    return np.clip((latent + 1.0) / 2.0, 0.0, 1.0)


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    ab = ALPHA_BAR[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def ddim_refine(
    image: np.ndarray,
    strength: float,
    rng: np.random.Generator,
    denoiser: BlurBankDenoiser | None = None,
) -> np.ndarray:
    """Refine one [0, 1] float image; strength 0 is exactly the identity."""
    if strength == 0.0:
        return np.asarray(image, dtype=np.float64).copy()
    denoiser = denoiser or BlurBankDenoiser()
    t = strength_to_timestep(strength)
    k = sample_steps(strength)
    x0 = encode(image)
    eps = rng.standard_normal(x0.shape)
    x = add_noise(x0, t, eps)

    ladder = timestep_ladder(t, k)  # always ends at 0, where abar == 1
    for tau, tau_next in zip(ladder[:-1], ladder[1:]):
        ab = ALPHA_BAR[tau]
        rescaled = x / np.sqrt(ab)
        x0_hat = denoiser.estimate_clean(rescaled, noise_sigma(int(tau)))
        eps_hat = (x - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
        ab_next = ALPHA_BAR[tau_next]
        x = np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps_hat
    return decode(x)
