"""Procedural face images for hermetic, desk-scale experiments.

Each face is rendered at 4x supersampling with randomized geometry, skin
tone, hair, eyes, mouth, lighting and fine texture, then box-filtered down.
The set is deterministic in ``(seed, index)``.
"""

from __future__ import annotations

import os

import numpy as np
from scipy import ndimage

from .core import derive_seed, make_rng, save_image

__all__ = ["render_face", "synthetic_faces", "write_synthetic_faces"]

_SKIN = np.array(
    [[0.96, 0.80, 0.69], [0.91, 0.72, 0.58], [0.78, 0.57, 0.42], [0.62, 0.43, 0.30], [0.45, 0.31, 0.22]]
)
_HAIR = np.array([[0.08, 0.06, 0.05], [0.30, 0.18, 0.09], [0.55, 0.38, 0.20], [0.80, 0.68, 0.45], [0.50, 0.50, 0.52]])
_IRIS = np.array([[0.25, 0.15, 0.08], [0.20, 0.35, 0.55], [0.25, 0.45, 0.30], [0.40, 0.30, 0.20]])


def _ellipse(xx, yy, cx, cy, rx, ry, theta=0.0):
    c, s = np.cos(theta), np.sin(theta)
    u = ((xx - cx) * c + (yy - cy) * s) / rx
    v = (-(xx - cx) * s + (yy - cy) * c) / ry
    return u * u + v * v


def _blend(canvas, mask, color):
    m = np.clip(mask, 0.0, 1.0)[..., None]
    canvas *= 1 - m
    canvas += m * np.asarray(color)


def _soft(d, edge):
    # d < 1 inside; edge width in normalized units
    return np.clip((1.0 - d) / edge, 0.0, 1.0)


def _texture(rng, shape, sigma, amp):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    n /= n.std() + 1e-12
    return amp * n


def render_face(seed: int, size: int = 64, ss: int = 4) -> np.ndarray:
    """Render one ``(size, size, 3)`` face in ``[0, 1]``."""
    rng = make_rng(seed)
    n = size * ss
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n  # unit square

    # background: two-colour gradient plus blotches
    c0, c1 = rng.uniform(0.1, 0.9, 3), rng.uniform(0.1, 0.9, 3)
    ang = rng.uniform(0, 2 * np.pi)
    t = np.clip(0.5 + (xx - 0.5) * np.cos(ang) + (yy - 0.5) * np.sin(ang), 0, 1)[..., None]
    img = c0 * (1 - t) + c1 * t
    img += _texture(rng, (n, n), n / 16, 0.05)[..., None]

    cx = 0.5 + rng.uniform(-0.06, 0.06)
    cy = 0.54 + rng.uniform(-0.05, 0.05)
    rx = rng.uniform(0.24, 0.31)
    ry = rx * rng.uniform(1.15, 1.4)
    tilt = rng.uniform(-0.15, 0.15)
    skin = _SKIN[rng.integers(len(_SKIN))] * rng.uniform(0.92, 1.06, 3)
    hair = _HAIR[rng.integers(len(_HAIR))] * rng.uniform(0.85, 1.15, 3)
    edge = 0.04

    # hair mass behind the head
    hair_d = _ellipse(xx, yy, cx, cy - ry * rng.uniform(0.15, 0.3), rx * rng.uniform(1.08, 1.3), ry * rng.uniform(0.9, 1.1), tilt)
    hair_tex = hair * (1 + _texture(rng, (n, n), 1.2 * ss, 0.12)[..., None])
    m = _soft(hair_d, edge)
    img = img * (1 - m[..., None]) + m[..., None] * hair_tex

    # neck and head with directional shading
    neck = (np.abs(xx - cx) < rx * 0.45) & (yy > cy) & (yy < 1.0)
    _blend(img, neck.astype(float) * 0.95, skin * 0.8)
    head_d = _ellipse(xx, yy, cx, cy, rx, ry, tilt)
    la = rng.uniform(0, 2 * np.pi)
    shade = 1.0 + 0.22 * (((xx - cx) * np.cos(la) + (yy - cy) * np.sin(la)) / rx) - 0.18 * np.clip(head_d, 0, 1) ** 2
    skin_tex = skin * shade[..., None] * (1 + _texture(rng, (n, n), 0.8 * ss, 0.035)[..., None])
    m = _soft(head_d, edge)
    img = img * (1 - m[..., None]) + m[..., None] * skin_tex

    # fringe
    if rng.random() < 0.6:
        fringe = _ellipse(xx, yy, cx, cy - ry * 0.85, rx * 0.95, ry * rng.uniform(0.25, 0.4), tilt)
        m = _soft(fringe, edge) * (yy < cy - ry * 0.35)
        img = img * (1 - m[..., None]) + m[..., None] * hair_tex

    # eyes, brows
    ex = rx * rng.uniform(0.36, 0.46)
    ey = cy - ry * rng.uniform(0.08, 0.2)
    erx, ery = rx * rng.uniform(0.17, 0.22), ry * rng.uniform(0.07, 0.1)
    iris = _IRIS[rng.integers(len(_IRIS))]
    gaze = rng.uniform(-0.3, 0.3)
    for side in (-1, 1):
        px = cx + side * ex
        _blend(img, _soft(_ellipse(xx, yy, px, ey, erx, ery, tilt), 0.15), [0.95, 0.95, 0.93])
        ir = _ellipse(xx, yy, px + gaze * erx * 0.4, ey, erx * 0.45, erx * 0.45)
        inside = _ellipse(xx, yy, px, ey, erx, ery, tilt) < 1
        _blend(img, _soft(ir, 0.2) * inside, iris)
        _blend(img, _soft(_ellipse(xx, yy, px + gaze * erx * 0.4, ey, erx * 0.18, erx * 0.18), 0.3) * inside, [0.03, 0.03, 0.03])
        brow = _ellipse(xx, yy, px, ey - ery * rng.uniform(2.2, 3.2), erx * 1.2, ery * 0.45, tilt + side * rng.uniform(-0.25, 0.1))
        _blend(img, _soft(brow, 0.3) * 0.9, hair * 0.9)

    # nose shadow and mouth
    ny = cy + ry * rng.uniform(0.12, 0.22)
    _blend(img, _soft(_ellipse(xx, yy, cx + 0.01, ny, rx * 0.12, ry * 0.06), 0.6) * 0.35, skin * 0.6)
    my = cy + ry * rng.uniform(0.42, 0.55)
    mw = rx * rng.uniform(0.28, 0.42)
    smile = rng.uniform(-0.5, 1.0)
    lip = np.array([0.70, 0.30, 0.30]) * rng.uniform(0.8, 1.1)
    curve = my - smile * ry * 0.08 * (1 - ((xx - cx) / mw) ** 2)
    mouth_d = ((xx - cx) / mw) ** 2 + ((yy - curve) / (ry * rng.uniform(0.04, 0.07))) ** 2
    _blend(img, _soft(mouth_d, 0.25), lip)

    img = np.clip(img, 0.0, 1.0)
    return img.reshape(size, ss, size, ss, 3).mean(axis=(1, 3))


def synthetic_faces(n: int, size: int = 64, seed: int = 0) -> list[np.ndarray]:
    return [render_face(derive_seed(seed, i), size) for i in range(n)]


def write_synthetic_faces(out_dir: str | os.PathLike, n: int, size: int = 64, seed: int = 0) -> list[str]:
    """Render ``n`` faces to ``out_dir/face_XXXXX.png`` and return the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(n):
        p = os.path.join(out_dir, f"face_{i:05d}.png")
        save_image(render_face(derive_seed(seed, i), size), p)
        paths.append(p)
    return paths
