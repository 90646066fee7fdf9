"""Training-free clean-image estimator used inside the DDIM loop.

The estimator blends a bank of Gaussian blurs of the rescaled noisy
input, with blend coefficients chosen per noise level. The default
coefficient table was fit offline by ridge regression on procedurally
generated smooth images (see scripts/fit_weights.py); a per-scene table
can be loaded from an .npz via --weights.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

# Basis: identity, four Gaussian blurs, and the global per-channel mean
# (shrinkage target for very high noise). inf encodes the mean element.
BLUR_SIGMAS = (0.0, 1.0, 2.0, 4.0, 8.0, np.inf)

# Noise std of the rescaled estimate -> blend over BLUR_SIGMAS. Rows were
# fit offline (scripts/fit_weights.py with --procedural) on smooth
# synthetic images; intermediate levels interpolate linearly.
DEFAULT_LEVEL_SIGMAS = (0.05, 0.15, 0.3, 0.6, 1.2, 2.4)
DEFAULT_COEFFS = (
    (0.7525, 0.2721, 0.0000, 0.0, 0.0000, 0.0000),
    (0.2040, 0.8691, 0.0000, 0.0, 0.0000, 0.0000),
    (0.0000, 1.0599, 0.0000, 0.0, 0.0000, 0.0000),
    (0.0000, 0.6481, 0.4026, 0.0, 0.0000, 0.0000),
    (0.0000, 0.1160, 0.8373, 0.0, 0.0000, 0.0076),
    (0.0000, 0.0000, 0.5114, 0.0, 0.2356, 0.1485),
)


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding; sigma 0 is the identity
    and sigma inf collapses to the global per-channel mean."""
    if sigma <= 0:
        return image.copy()
    if np.isinf(sigma):
        return np.broadcast_to(image.mean(axis=(0, 1), keepdims=True), image.shape).copy()
    radius = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()

    def conv_axis(arr, axis):
        padded = np.pad(
            arr,
            [(radius, radius) if a == axis else (0, 0) for a in range(arr.ndim)],
            mode="reflect",
        )
        out = np.zeros_like(arr)
        for i, kv in enumerate(kernel):
            sl = [slice(None)] * arr.ndim
            sl[axis] = slice(i, i + arr.shape[axis])
            out += kv * padded[tuple(sl)]
        return out

    return conv_axis(conv_axis(image, 0), 1)


class BlurBankDenoiser:
    def __init__(self, level_sigmas=DEFAULT_LEVEL_SIGMAS, coeffs=DEFAULT_COEFFS,
                 blur_sigmas=BLUR_SIGMAS):
        self.level_sigmas = np.asarray(level_sigmas, dtype=np.float64)
        self.coeffs = np.asarray(coeffs, dtype=np.float64)
        self.blur_sigmas = tuple(blur_sigmas)
        if self.coeffs.shape != (len(self.level_sigmas), len(self.blur_sigmas)):
            raise ValueError("coefficient table shape does not match level/blur banks")

    @staticmethod
    def load(path) -> "BlurBankDenoiser":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"denoiser weights not found: {path}")
        data = np.load(path)
        return BlurBankDenoiser(
            level_sigmas=data["level_sigmas"],
            coeffs=data["coeffs"],
            blur_sigmas=tuple(float(s) for s in data["blur_sigmas"]),
        )

    def save(self, path):
        np.savez(
            path,
            level_sigmas=self.level_sigmas,
            coeffs=self.coeffs,
            blur_sigmas=np.asarray(self.blur_sigmas),
        )

    def _level_coeffs(self, sigma: float) -> np.ndarray:
        ls = self.level_sigmas
        if sigma <= ls[0]:
            return self.coeffs[0]
        if sigma >= ls[-1]:
            return self.coeffs[-1]
        j = int(np.searchsorted(ls, sigma)) - 1
        u = (sigma - ls[j]) / (ls[j + 1] - ls[j])
        return (1 - u) * self.coeffs[j] + u * self.coeffs[j + 1]

    def estimate_clean(self, rescaled: np.ndarray, sigma: float) -> np.ndarray:
        """x0 estimate from the rescaled noisy image x_t / sqrt(abar_t)."""
        coeffs = self._level_coeffs(sigma)
        out = np.zeros_like(rescaled)
        for c, s in zip(coeffs, self.blur_sigmas):
            if c != 0.0:
                out += c * gaussian_blur(rescaled, s)
        return np.clip(out, -1.5, 1.5)
