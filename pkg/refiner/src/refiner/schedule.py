"""DDPM noise schedule shared by the noising step and the DDIM sampler."""

from __future__ import annotations

import numpy as np

TRAIN_STEPS = 1000
# Scaled-linear schedule (the latent-diffusion convention): betas are
# linear in sqrt space.
BETA_START = 0.00085
BETA_END = 0.012
MAX_SAMPLE_STEPS = 50  # sampler runs floor(50 * strength) steps


def alpha_bars() -> np.ndarray:
    """Cumulative signal fractions abar_t for t in [0, TRAIN_STEPS]."""
    betas = np.linspace(BETA_START**0.5, BETA_END**0.5, TRAIN_STEPS) ** 2
    abar = np.cumprod(1.0 - betas)
    return np.concatenate([[1.0], abar])  # abar[0] == 1: t == 0 is the identity


ALPHA_BAR = alpha_bars()


def strength_to_timestep(strength: float) -> int:
    """Noise strength in [0, 1] -> diffusion timestep t."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be in [0, 1], got {strength}")
    return int(round(strength * TRAIN_STEPS))


def sample_steps(strength: float) -> int:
    return int(np.floor(MAX_SAMPLE_STEPS * strength))


def timestep_ladder(t: int, k: int) -> np.ndarray:
    """Strictly decreasing integer timesteps from t to 0 in k steps."""
    if k <= 0:
        return np.array([t, 0], dtype=np.int64) if t > 0 else np.array([0], dtype=np.int64)
    return np.unique(np.round(np.linspace(t, 0, k + 1)).astype(np.int64))[::-1]


def noise_sigma(t: int) -> float:
    """Noise std of the rescaled estimate x_t / sqrt(abar_t)."""
    ab = ALPHA_BAR[t]
    return float(np.sqrt((1.0 - ab) / ab))
