"""PSNR and SSIM with optional co-visibility masks.

SSIM follows the standard formulation: 11x11 Gaussian window, sigma 1.5,
C1 = 0.01^2, C2 = 0.03^2, data range 1. Only windows fully inside the
image count, and the masked variant averages over windows fully inside
the mask. The torch implementation is differentiable so the training
reconstruction loss can reuse it.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _gaussian_window(dtype: torch.dtype) -> torch.Tensor:
    half = SSIM_WINDOW // 2
    coords = torch.arange(-half, half + 1, dtype=dtype)
    g = torch.exp(-(coords**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    win = g.outer(g)
    return win.reshape(1, 1, SSIM_WINDOW, SSIM_WINDOW)


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float | None:
    """10 * log10(1 / MSE) over (masked) pixels, capped at 99 dB.

    Returns None for a masked call with an empty mask.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a - b) ** 2
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            return None
        sq = sq[m]
    mse = float(np.mean(sq))
    if mse <= 0.0:
        return PSNR_CAP
    return min(float(10.0 * np.log10(1.0 / mse)), PSNR_CAP)


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-window SSIM over valid positions: (C, H, W) -> (C, H-10, W-10)."""
    win = _gaussian_window(a.dtype)
    ac = a.unsqueeze(1)  # (C, 1, H, W)
    bc = b.unsqueeze(1)
    mu_a = F.conv2d(ac, win)
    mu_b = F.conv2d(bc, win)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = F.conv2d(ac * ac, win) - mu_aa
    var_b = F.conv2d(bc * bc, win) - mu_bb
    cov = F.conv2d(ac * bc, win) - mu_ab
    num = (2 * mu_ab + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_aa + mu_bb + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return (num / den).squeeze(1)


def ssim_torch(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor | None:
    """Differentiable SSIM for (H, W, C) or (H, W) tensors in [0, 1]."""
    if a.dim() == 2:
        a = a.unsqueeze(-1)
        b = b.unsqueeze(-1)
    at = a.permute(2, 0, 1)
    bt = b.permute(2, 0, 1)
    smap = ssim_map(at, bt)
    if mask is None:
        return smap.mean()
    m = torch.as_tensor(np.asarray(mask, dtype=np.float64) if isinstance(mask, np.ndarray) else mask)
    m = m.to(a.dtype).reshape(1, 1, *m.shape[-2:])
    win_all = torch.ones(1, 1, SSIM_WINDOW, SSIM_WINDOW, dtype=a.dtype)
    inside = F.conv2d(m, win_all).squeeze() >= SSIM_WINDOW**2 - 0.5  # window fully in mask
    if not bool(inside.any()):
        return None
    return smap[:, inside].mean()


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float | None:
    """SSIM for numpy images; None for a masked call with no interior window."""
    at = torch.as_tensor(np.asarray(a, dtype=np.float64))
    bt = torch.as_tensor(np.asarray(b, dtype=np.float64))
    out = ssim_torch(at, bt, mask)
    return None if out is None else float(out)
