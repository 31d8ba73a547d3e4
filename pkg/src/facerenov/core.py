"""Image value type helpers, seeding, PNG/JPEG I/O and bicubic resampling.

Images are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in {1, 3}
and values in ``[0, 1]``.  Everything that degrades, scores or stores an image
uses this convention; conversion to the generator's ``[-1, 1]`` range happens
only at the model boundary (see :func:`to_model`, :func:`from_model`).
"""

from __future__ import annotations

import math
import os
from fractions import Fraction
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

__all__ = [
    "ImageError",
    "check_image",
    "as_image",
    "color_space",
    "make_rng",
    "derive_seed",
    "load_image",
    "save_image",
    "quantize",
    "resize_bicubic",
    "cubic_kernel",
    "to_gray",
    "to_model",
    "from_model",
    "image_grid",
]

SEED_MASK = (1 << 64) - 1
BICUBIC_A = -0.5


class ImageError(ValueError):
    """Raised for malformed images (shape, range, non-finite values)."""


def check_image(img: np.ndarray, *, name: str = "image") -> np.ndarray:
    """Validate the image invariants and return the array unchanged."""
    if not isinstance(img, np.ndarray):
        raise ImageError(f"{name} must be a numpy array, got {type(img).__name__}")
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageError(f"{name} must have shape (H, W, 1|3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError(f"{name} is empty: {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageError(f"{name} contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ImageError(f"{name} values outside [0, 1]: [{img.min()}, {img.max()}]")
    return img


def as_image(arr, dtype=np.float64) -> np.ndarray:
    """Coerce ``(H, W)`` or ``(H, W, C)`` data to a validated float image."""
    a = np.asarray(arr, dtype=dtype)
    if a.ndim == 2:
        a = a[:, :, None]
    return check_image(a)


def color_space(img: np.ndarray) -> str:
    return "GRAY" if img.shape[2] == 1 else "RGB"


def derive_seed(*parts: int) -> int:
    """Combine integers into one 64-bit seed (order-sensitive, platform independent)."""
    ss = np.random.SeedSequence([int(p) & SEED_MASK for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    """The only way stochastic code in this package obtains randomness."""
    if seed < 0 or seed > SEED_MASK:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


# ---------------------------------------------------------------------------
# file I/O


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Decode a PNG/JPEG file into a ``[0, 1]`` float image.

    Single-channel sources stay single-channel; everything else becomes RGB.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with PILImage.open(path) as im:
            fmt = im.format
            if fmt not in ("PNG", "JPEG"):
                raise ImageError(f"unsupported image format {fmt!r}: {path}")
            if im.mode in ("L", "I;16", "I", "1"):
                im = im.convert("L")
                arr = np.asarray(im, dtype=np.float64)[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Map ``[0, 1]`` floats to bytes by ``round(v * 255)`` with clamping."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write ``img`` losslessly as PNG.  Out-of-range values are clamped."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ImageError(f"cannot save array of shape {arr.shape}")
    parent = os.path.dirname(os.fspath(path)) or "."
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"parent directory does not exist: {parent}")
    q = quantize(np.nan_to_num(arr, nan=0.0))
    im = PILImage.fromarray(q[:, :, 0], mode="L") if q.shape[2] == 1 else PILImage.fromarray(q, mode="RGB")
    im.save(path, format="PNG")


# ---------------------------------------------------------------------------
# resampling


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    inner = (a + 2) * ax3 - (a + 3) * ax2 + 1
    outer = a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, inner, np.where(ax < 2, outer, 0.0))


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    # half-sample symmetric extension: ... 1 0 | 0 1 ... n-1 | n-1 n-2 ...
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx < n, idx, period - 1 - idx)


def _resize_matrix(n_in: int, n_out: int, scale: float, antialias: bool = True) -> np.ndarray:
    """Dense ``(n_out, n_in)`` interpolation matrix for one axis.

    Output sample ``i`` sits at input coordinate ``(i + 0.5) / scale - 0.5``.
    When shrinking, the kernel is stretched by ``1/scale`` (anti-aliasing).
    """
    k = min(scale, 1.0) if antialias else 1.0
    support = 2.0 / k
    u = (np.arange(n_out) + 0.5) / scale - 0.5
    left = np.floor(u - support).astype(np.int64)
    taps = int(math.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = k * cubic_kernel(k * (u[:, None] - idx))
    w /= w.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), _mirror_index(idx, n_in).ravel()), w.ravel())
    return mat


def resize_bicubic(
    img: np.ndarray,
    scale: float | Fraction | None = None,
    size: Sequence[int] | None = None,
) -> np.ndarray:
    """Catmull-Rom (``a = -0.5``) resampling with anti-aliased downscaling.

    Give either ``scale`` (output dims ``floor(H*scale)``) or an explicit
    ``size=(h, w)``.  Output is clamped to ``[0, 1]``.
    """
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if size is None:
        if scale is None:
            raise ValueError("resize_bicubic needs scale or size")
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        scale = Fraction(scale).limit_denominator(10_000)
        size = (int(math.floor(h * scale)), int(math.floor(w * scale)))
        sy = sx = float(scale)
    else:
        sy, sx = size[0] / h, size[1] / w
    oh, ow = int(size[0]), int(size[1])
    if oh < 1 or ow < 1:
        raise ValueError(f"output dims must be >= 1, got {(oh, ow)}")
    if (oh, ow) == (h, w):
        out = img.copy()
    else:
        my = _resize_matrix(h, oh, sy)
        mx = _resize_matrix(w, ow, sx)
        out = np.einsum("ij,jkc,lk->ilc", my, img, mx)
    out = np.clip(out, 0.0, 1.0)
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# conversions


def to_gray(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an image, shape ``(H, W)``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img[:, :, 0] * 0.299 + img[:, :, 1] * 0.587 + img[:, :, 2] * 0.114


def to_model(batch, dtype=None):
    """``(N, H, W, C)`` or ``(H, W, C)`` arrays in ``[0, 1]`` -> NCHW tensor in ``[-1, 1]``."""
    import torch

    arr = np.asarray(batch)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))
    t = t.to(dtype or torch.get_default_dtype())
    return t * 2.0 - 1.0


def from_model(t) -> np.ndarray:
    """NCHW tensor in ``[-1, 1]`` -> ``(N, H, W, C)`` float64 array in ``[0, 1]``."""
    arr = t.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
    return np.clip((arr + 1.0) * 0.5, 0.0, 1.0)


def image_grid(rows: Sequence[Sequence[np.ndarray]], pad: int = 0) -> np.ndarray:
    """Tile equally sized images into one ``rows x cols`` mosaic."""
    rows = [list(r) for r in rows]
    if not rows or not rows[0]:
        raise ValueError("empty grid")
    h, w, c = rows[0][0].shape
    ncol = max(len(r) for r in rows)
    out = np.ones((len(rows) * h + pad * (len(rows) - 1), ncol * w + pad * (ncol - 1), c))
    for i, r in enumerate(rows):
        for j, tile in enumerate(r):
            if tile.shape != (h, w, c):
                raise ValueError(f"grid tile shape {tile.shape} != {(h, w, c)}")
            y, x = i * (h + pad), j * (w + pad)
            out[y : y + h, x : x + w] = tile
    return out
