"""Fit per-scene denoiser coefficients (the offline analogue of per-scene
model fine-tuning): non-negative least squares of clean images from noisy
ones over the blur basis, one row per noise level.

Usage:
    python fit_weights.py --images DIR_OR_GLOB --out weights.npz [--seed 0]
    python fit_weights.py --procedural --out weights.npz   # no scene needed
"""

from __future__ import annotations

import argparse
import glob
from pathlib import Path

import numpy as np

from refiner.denoiser import BLUR_SIGMAS, DEFAULT_LEVEL_SIGMAS, BlurBankDenoiser, gaussian_blur
from refiner.pipeline import read_image


def nnls(gram: np.ndarray, rhs: np.ndarray, iters=2000) -> np.ndarray:
    """Non-negative least squares by projected coordinate descent."""
    n = len(rhs)
    x = np.zeros(n)
    diag = np.diag(gram)
    for _ in range(iters):
        for i in range(n):
            if diag[i] <= 0:
                continue
            r = rhs[i] - gram[i] @ x + diag[i] * x[i]
            x[i] = max(0.0, r / diag[i])
    return x


def fit_level(images: list[np.ndarray], sigma: float, rng: np.random.Generator, draws=3) -> np.ndarray:
    n_basis = len(BLUR_SIGMAS)
    gram = np.zeros((n_basis, n_basis))
    rhs = np.zeros(n_basis)
    for img in images:
        clean = 2.0 * img - 1.0
        for _ in range(draws):
            noisy = clean + sigma * rng.standard_normal(clean.shape)
            basis = [gaussian_blur(noisy, s) for s in BLUR_SIGMAS]
            for i in range(n_basis):
                rhs[i] += float(np.sum(basis[i] * clean))
                for j in range(i, n_basis):
                    gram[i, j] += float(np.sum(basis[i] * basis[j]))
    gram = gram + gram.T - np.diag(np.diag(gram))
    gram += 1e-6 * np.trace(gram) / n_basis * np.eye(n_basis)
    return nnls(gram, rhs)


def procedural_images(count=8, h=48, w=64, seed=0) -> list[np.ndarray]:
    """Smooth sinusoid-textured images with an elliptical inset, the texture
    family the synthetic scenes use."""
    images = []
    for s in range(count):
        rng = np.random.default_rng(seed * 1000 + s)
        y, x = np.mgrid[0:h, 0:w].astype(np.float64)
        img = np.zeros((h, w, 3))
        for c in range(3):
            fx, fy = rng.uniform(0.02, 0.1, size=2)
            px, py = rng.uniform(0, 6, size=2)
            img[..., c] = 0.5 + 0.4 * np.sin(2 * np.pi * (fx * x + px)) * np.cos(2 * np.pi * (fy * y + py))
        cy, cx = h / 2 + rng.uniform(-5, 5), w / 2 + rng.uniform(-8, 8)
        ry, rx = rng.uniform(8, 14), rng.uniform(10, 18)
        inside = ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 < 1
        img[inside] = 0.5 + 0.45 * np.sin(rng.uniform(0, 6, size=3))
        images.append(np.clip(img, 0, 1))
    return images


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--images", default=None, help="directory or glob of training PNGs")
    parser.add_argument("--procedural", action="store_true", help="fit on generated smooth images")
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    if args.procedural:
        images = procedural_images(seed=args.seed)
    elif args.images:
        pattern = args.images if any(c in args.images for c in "*?[") else str(Path(args.images) / "*.png")
        paths = sorted(glob.glob(pattern))
        if not paths:
            raise SystemExit(f"no images match {pattern}")
        images = [read_image(p) for p in paths]
    else:
        raise SystemExit("need --images or --procedural")
    rng = np.random.default_rng(args.seed)
    coeffs = np.stack([fit_level(images, s, rng) for s in DEFAULT_LEVEL_SIGMAS])
    BlurBankDenoiser(level_sigmas=DEFAULT_LEVEL_SIGMAS, coeffs=coeffs).save(args.out)
    print(f"fit {coeffs.shape} coefficients from {len(images)} images -> {args.out}")
    np.set_printoptions(precision=4, suppress=True)
    print(coeffs)


if __name__ == "__main__":
    main()
