"""Independent reference computations used by the tests.

Everything here is written directly from definitions with plain loops or
closed forms, without calling into the package, so agreement with the
package is a real check.
"""

from __future__ import annotations

import math

import numpy as np
import torch

# closed forms -------------------------------------------------------------

PSNR_OFFSET16 = 10.0 * math.log10(255.0**2 / 16.0**2)
C1 = (0.01 * 255) ** 2
SSIM_100_140 = (2 * 100 * 140 + C1) / (100**2 + 140**2 + C1)


def brute_conv_reflect(x: np.ndarray, w: np.ndarray, stride: int = 1, mod=None) -> np.ndarray:
    """Direct summation of a reflect-padded (optionally modulated) convolution.

    ``x``: (C, H, W), ``w``: (O, C, S, S), ``mod``: (S*S, Ho, Wo) or None.
    """
    c, h, wd = x.shape
    o, _, s, _ = w.shape
    p = s // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)), mode="reflect")
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((o, ho, wo))
    for oy in range(ho):
        for ox in range(wo):
            for ky in range(s):
                for kx in range(s):
                    f = xp[:, oy * stride + ky, ox * stride + kx]
                    m = 1.0 if mod is None else mod[ky * s + kx, oy, ox]
                    out[:, oy, ox] += m * (w[:, :, ky, kx] @ f)
    return out


def brute_mosaic(img: np.ndarray, block: int) -> np.ndarray:
    out = np.empty_like(img)
    h, w = img.shape[:2]
    for y in range(0, h, block):
        for x in range(0, w, block):
            tile = img[y : y + block, x : x + block]
            out[y : y + block, x : x + block] = tile.reshape(-1, img.shape[2]).mean(0)
    return out


def gaussian_samples_frechet(mu_shift: np.ndarray, n: int, dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, dim))
    b = rng.standard_normal((n, dim)) + mu_shift
    return a, b


# finite differences -------------------------------------------------------


def numeric_grad(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``x`` (modified in place)."""
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        fp = float(f())
        flat[i] = old - eps
        fm = float(f())
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_error(analytic: torch.Tensor, numeric: torch.Tensor, scale: float | None = None, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor * scale)``.

    ``scale`` defaults to the largest magnitude in either tensor; pass a
    shared value when comparing several tensors so that an exactly-zero
    gradient is judged against the overall gradient size.
    """
    if scale is None:
        scale = max(float(analytic.abs().max()), float(numeric.abs().max()))
    denom = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=floor * scale + 1e-300)
    return float(((analytic - numeric).abs() / denom).max())


def gradcheck_params(f, tensors, eps: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central differences over ``tensors``.

    ``f`` returns a scalar tensor.  With ``max_entries`` only a random subset of
    entries per tensor is probed (the analytic gradient is still complete).
    """
    for t in tensors:
        t.grad = None
    f().backward()
    rng = np.random.default_rng(seed)
    pairs = []
    for t in tensors:
        ana = (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)).view(-1)
        flat = t.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = rng.choice(flat.numel(), max_entries, replace=False)
        num = torch.zeros(len(idx), dtype=t.dtype)
        with torch.no_grad():
            for k, i in enumerate(idx):
                old = flat[i].item()
                flat[i] = old + eps
                fp = float(f())
                flat[i] = old - eps
                fm = float(f())
                flat[i] = old
                num[k] = (fp - fm) / (2 * eps)
        pairs.append((ana[idx], num))
    scale = max(max(float(a.abs().max()), float(n.abs().max())) for a, n in pairs)
    return max(max_rel_error(a, n, scale) for a, n in pairs)
