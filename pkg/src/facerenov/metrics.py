"""Evaluation metrics: PSNR, SSIM, MS-SSIM, NIQE and a Frechet feature distance.

All image inputs are ``[0, 1]`` arrays of shape ``(H, W, C)`` (or ``(H, W)``).
SSIM-family metrics run on BT.601 luma in byte units, matching the usual
reference implementations.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage, special

from .core import load_image, resize_bicubic, to_gray, to_model

__all__ = [
    "PSNR_IDENTICAL",
    "MetricError",
    "psnr",
    "ssim",
    "ssim_components",
    "ms_ssim",
    "MS_SSIM_WEIGHTS",
    "NiqeModel",
    "niqe_features",
    "niqe_fit",
    "niqe_score",
    "sqrtm_psd",
    "frechet_distance",
    "frechet_feature_distance",
    "MetricReport",
    "evaluate",
    "METRIC_ORDER",
]

PSNR_IDENTICAL = math.inf
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
FFD = "frechet_feature_distance"
METRIC_ORDER = ("psnr", "ssim", "ms_ssim", "fed", "lle", FFD, "niqe")
RESERVED = ("fed", "lle")


class MetricError(RuntimeError):
    """A metric could not be computed on the given input."""


def _same_shape(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """``10 log10(peak^2 / MSE)``; identical images give :data:`PSNR_IDENTICAL`."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# SSIM family


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    n = len(win)
    out = ndimage.correlate1d(img, win, axis=0, mode="constant")
    out = ndimage.correlate1d(out, win, axis=1, mode="constant")
    lo = n // 2
    hi_y = img.shape[0] - (n - 1 - lo)
    hi_x = img.shape[1] - (n - 1 - lo)
    return out[lo:hi_y, lo:hi_x]


def ssim_components(
    x: np.ndarray, y: np.ndarray, *, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, L: float = 255.0
) -> tuple[np.ndarray, np.ndarray]:
    """Local SSIM map and contrast-structure map over 2-D arrays in ``[0, L]``."""
    if min(x.shape) < win_size:
        raise ValueError(f"image {x.shape} smaller than the {win_size}x{win_size} SSIM window")
    win = _gauss_window(win_size, sigma)
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    mu_x, mu_y = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mu_x**2
    syy = _filter_valid(y * y, win) - mu_y**2
    sxy = _filter_valid(x * y, win) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return lum * cs, cs


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity of the luma channels (11x11 Gaussian, sigma 1.5)."""
    a, b = _same_shape(a, b)
    smap, _ = ssim_components(to_gray(a) * 255.0, to_gray(b) * 255.0)
    return float(smap.mean())


def _halve(img: np.ndarray) -> np.ndarray:
    # 2x2 box average then decimate; odd trailing row/col dropped
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ms_ssim(a: np.ndarray, b: np.ndarray, weights: Sequence[float] | None = None, win_size: int = 11) -> float:
    """Multi-scale SSIM.

    With default weights the number of scales is the largest ``M <= 5`` for
    which the coarsest scale still fits the window; the first ``M`` standard
    weights are renormalized to sum to one.  Explicit ``weights`` force
    ``len(weights)`` scales; ``weights=[1]`` reproduces :func:`ssim`.
    """
    a, b = _same_shape(a, b)
    x, y = to_gray(a) * 255.0, to_gray(b) * 255.0
    if weights is None:
        m = 0
        size = min(x.shape)
        while m < len(MS_SSIM_WEIGHTS) and size >= win_size:
            m += 1
            size //= 2
        if m == 0:
            raise ValueError(f"image {x.shape} too small for MS-SSIM (needs >= {win_size} px)")
        w = np.asarray(MS_SSIM_WEIGHTS[:m], dtype=np.float64)
        w = w / w.sum()
    else:
        w = np.asarray(weights, dtype=np.float64)
        if min(x.shape) // 2 ** (len(w) - 1) < win_size:
            raise ValueError(f"image {x.shape} too small for {len(w)} MS-SSIM scales")
    val = 1.0
    for j, wj in enumerate(w):
        smap, cs = ssim_components(x, y, win_size=win_size)
        if j == len(w) - 1:
            val *= max(float(smap.mean()), 0.0) ** wj
        else:
            val *= max(float(cs.mean()), 0.0) ** wj
            x, y = _halve(x), _halve(y)
    return float(val)


# ---------------------------------------------------------------------------
# NIQE

_GAM = np.arange(0.2, 10.001, 0.001)
_R_GAM = special.gamma(2.0 / _GAM) ** 2 / (special.gamma(1.0 / _GAM) * special.gamma(3.0 / _GAM))


def _aggd_params(block: np.ndarray) -> tuple[float, float, float]:
    """Asymmetric generalized Gaussian fit by moment matching (shape, left scale, right scale)."""
    v = block.ravel()
    left, right = v[v < 0], v[v > 0]
    left_std = math.sqrt(np.mean(left**2)) if left.size else 0.0
    right_std = math.sqrt(np.mean(right**2)) if right.size else 0.0
    m2 = float(np.mean(v**2))
    if left_std == 0.0 or right_std == 0.0 or m2 == 0.0:
        return float("nan"), 0.0, 0.0
    gammahat = left_std / right_std
    rhat = float(np.mean(np.abs(v))) ** 2 / m2
    rhatnorm = rhat * (gammahat**3 + 1) * (gammahat + 1) / (gammahat**2 + 1) ** 2
    alpha = float(_GAM[np.argmin((_R_GAM - rhatnorm) ** 2)])
    ratio = math.sqrt(special.gamma(1 / alpha) / special.gamma(3 / alpha))
    return alpha, left_std * ratio, right_std * ratio


def _patch_features(mscn: np.ndarray) -> list[float]:
    alpha, bl, br = _aggd_params(mscn)
    feat = [alpha, (bl + br) / 2.0]
    for shift in ((0, 1), (1, 0), (1, 1), (1, -1)):
        prod = mscn * np.roll(mscn, shift, axis=(0, 1))
        alpha, bl, br = _aggd_params(prod)
        mean = (br - bl) * (special.gamma(2 / alpha) / special.gamma(1 / alpha)) if np.isfinite(alpha) else float("nan")
        feat.extend([alpha, mean, bl, br])
    return feat


def _mscn(gray255: np.ndarray, c: float) -> tuple[np.ndarray, np.ndarray]:
    win = _gauss_window(7, 7.0 / 6.0)
    mu = ndimage.correlate1d(ndimage.correlate1d(gray255, win, 0, mode="nearest"), win, 1, mode="nearest")
    sq = ndimage.correlate1d(ndimage.correlate1d(gray255 * gray255, win, 0, mode="nearest"), win, 1, mode="nearest")
    sigma = np.sqrt(np.abs(sq - mu * mu))
    return (gray255 - mu) / (sigma + c), sigma


def niqe_features(img: np.ndarray, patch: int = 96, c: float = 1.0 / 255.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch NSS features (36 per patch over two scales) and patch sharpness.

    ``c`` is the MSCN stabilizer in ``[0, 1]`` units (``1/255`` == 1 grey level).
    """
    gray = to_gray(np.asarray(img, dtype=np.float64)) * 255.0
    c255 = c * 255.0
    h, w = gray.shape
    nh, nw = h // patch, w // patch
    if nh == 0 or nw == 0 or patch % 2:
        raise MetricError(f"image {h}x{w} holds no {patch}x{patch} patch")
    gray = gray[: nh * patch, : nw * patch]
    feats, sharp = [], []
    for scale in (1, 2):
        if scale == 1:
            g = gray
        else:
            g = resize_bicubic(gray / 255.0, size=(gray.shape[0] // 2, gray.shape[1] // 2)) * 255.0
        ps = patch // scale
        mscn, sigma = _mscn(g, c255)
        f_scale = []
        for i in range(nh):
            for j in range(nw):
                blk = mscn[i * ps : (i + 1) * ps, j * ps : (j + 1) * ps]
                f_scale.append(_patch_features(blk))
                if scale == 1:
                    sharp.append(float(sigma[i * ps : (i + 1) * ps, j * ps : (j + 1) * ps].mean()))
        feats.append(np.asarray(f_scale))
    return np.hstack(feats), np.asarray(sharp)


@dataclass(frozen=True)
class NiqeModel:
    mean_vec: np.ndarray
    covariance: np.ndarray
    patch: int = 96
    c: float = 1.0 / 255.0

    def save(self, path: str | os.PathLike) -> None:
        np.savez(path, mean_vec=self.mean_vec, covariance=self.covariance, patch=self.patch, c=self.c)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "NiqeModel":
        with np.load(path) as z:
            return cls(z["mean_vec"], z["covariance"], int(z["patch"]), float(z["c"]))


def niqe_fit(
    pristine: Iterable[np.ndarray],
    *,
    patch: int = 96,
    c: float = 1.0 / 255.0,
    sharpness: float = 0.75,
    min_images: int = 100,
    eps: float = 1e-6,
) -> NiqeModel:
    """Fit the pristine multivariate Gaussian over sharp-patch features.

    Per image, only patches whose mean local deviation exceeds
    ``sharpness * max`` survive, so flat (zero-deviation) patches never count.
    """
    pristine = list(pristine)
    if len(pristine) < min_images:
        raise ValueError(f"niqe_fit needs >= {min_images} pristine images, got {len(pristine)}")
    rows = []
    for img in pristine:
        f, s = niqe_features(img, patch, c)
        keep = s > sharpness * s.max()
        rows.append(f[keep])
    feats = np.vstack(rows)
    feats = feats[np.all(np.isfinite(feats), axis=1)]
    if feats.shape[0] < 2:
        raise MetricError("fewer than two usable pristine patches")
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False)
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov).min() < eps:
        warnings.warn("degenerate NIQE covariance; regularizing with eps * I", RuntimeWarning, stacklevel=2)
        cov = cov + eps * np.eye(cov.shape[0])
    return NiqeModel(mu, cov, patch, c)


def niqe_score(img: np.ndarray, m: NiqeModel) -> float:
    """Distance between the image's patch-feature Gaussian and the pristine model."""
    feats, _ = niqe_features(img, m.patch, m.c)
    feats = feats[np.all(np.isfinite(feats), axis=1)]
    if feats.shape[0] == 0:
        raise MetricError("no valid NIQE patches")
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False) if feats.shape[0] > 1 else np.zeros_like(m.covariance)
    d = m.mean_vec - mu
    inv = np.linalg.pinv((m.covariance + cov) / 2.0)
    return float(math.sqrt(max(float(d @ inv @ d), 0.0)))


# ---------------------------------------------------------------------------
# Frechet distance


def sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues are clamped to zero."""
    mat = 0.5 * (mat + mat.T)
    vals, vecs = np.linalg.eigh(mat)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """``||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    ra = sqrtm_psd(cov_a)
    cross = np.linalg.eigvalsh(0.5 * ((ra @ cov_b @ ra) + (ra @ cov_b @ ra).T))
    tr_cross = float(np.sqrt(np.clip(cross, 0.0, None)).sum())
    diff = mu_a - mu_b
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(val, 0.0)


def _gaussian_stats(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    cov = np.cov(feats, rowvar=False) if feats.shape[0] > 1 else np.zeros((feats.shape[1], feats.shape[1]))
    return feats.mean(axis=0), np.atleast_2d(cov)


def _embed(images: Sequence[np.ndarray], extractor, batch: int = 32) -> np.ndarray:
    import torch

    dtype = next(extractor.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            x = to_model(np.stack(images[i : i + batch]), dtype=dtype)
            out.append(extractor.embed(x).double().numpy())
    return np.concatenate(out)


def frechet_feature_distance(set_a: Sequence[np.ndarray], set_b: Sequence[np.ndarray], p) -> float:
    """Frechet distance between Gaussian fits of the extractor's pooled deepest tap."""
    if len(set_a) == 0 or len(set_b) == 0:
        raise ValueError("frechet_feature_distance needs two non-empty image sets")
    mu_a, cov_a = _gaussian_stats(_embed(list(set_a), p))
    mu_b, cov_b = _gaussian_stats(_embed(list(set_b), p))
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)


# ---------------------------------------------------------------------------
# reports


def _num(v: float):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return v


def _unnum(v):
    if isinstance(v, str):
        return float(v)
    return v


@dataclass
class MetricReport:
    """Per-image metrics plus ``(mean, std)`` aggregates and set-level values."""

    per_image: dict[str, dict[str, float]] = field(default_factory=dict)
    set_level: dict[str, float] = field(default_factory=dict)
    label: str = ""

    @property
    def aggregate(self) -> dict[str, tuple[float, float]]:
        names: list[str] = []
        for rec in self.per_image.values():
            names.extend(k for k in rec if k not in names)
        agg = {}
        for name in names:
            vals = np.asarray([rec[name] for rec in self.per_image.values() if name in rec], dtype=np.float64)
            if np.all(np.isinf(vals)) and np.all(vals > 0):
                agg[name] = (math.inf, 0.0)
            else:
                agg[name] = (float(vals.mean()), float(vals.std()))
        for name, v in self.set_level.items():
            agg[name] = (float(v), 0.0)
        return agg

    def mean(self, name: str) -> float:
        return self.aggregate[name][0]

    def to_lines(self) -> list[str]:
        lines = []
        for img_id in sorted(self.per_image):
            rec = {k: _num(v) for k, v in sorted(self.per_image[img_id].items())}
            lines.append(json.dumps({"type": "image", "id": img_id, "metrics": rec}, sort_keys=True))
        agg = {k: [_num(m), _num(s)] for k, (m, s) in sorted(self.aggregate.items())}
        lines.append(json.dumps({"type": "aggregate", "label": self.label, "metrics": agg}, sort_keys=True))
        return lines

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MetricReport":
        rep = cls()
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["type"] == "image":
                    rep.per_image[rec["id"]] = {k: _unnum(v) for k, v in rec["metrics"].items()}
                elif rec["type"] == "aggregate":
                    rep.label = rec.get("label", "")
                    per_image_names = {k for r in rep.per_image.values() for k in r}
                    for k, (m, _) in rec["metrics"].items():
                        if k not in per_image_names:
                            rep.set_level[k] = _unnum(m)
        return rep

    def table(self) -> str:
        return format_table({self.label or "result": self})


def _fmt(v: float | None) -> str:
    if v is None:
        return "-"
    if math.isinf(v):
        return "+inf" if v > 0 else "-inf"
    return f"{v:.4f}"


def format_table(reports: Mapping[str, MetricReport], metrics: Sequence[str] = METRIC_ORDER) -> str:
    """Aligned text table, one row per report, columns in statistical -> perceptual order."""
    heads = ["method"] + [m.upper() for m in metrics]
    rows = []
    for name, rep in reports.items():
        agg = rep.aggregate
        rows.append([name] + [_fmt(agg[m][0]) if m in agg else "-" for m in metrics])
    widths = [max(len(r[i]) for r in [heads] + rows) for i in range(len(heads))]
    line = lambda r: " | ".join(c.rjust(w) for c, w in zip(r, widths))  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(heads), sep] + [line(r) for r in rows])


def format_metric_columns(reports: Mapping[str, MetricReport], metrics: Sequence[str] = METRIC_ORDER) -> str:
    """Transposed table: one row per metric, one column per report (ablation layout)."""
    heads = ["metric"] + list(reports)
    rows = []
    for m in metrics:
        row = [m.upper()]
        for rep in reports.values():
            agg = rep.aggregate
            row.append(_fmt(agg[m][0]) if m in agg else "-")
        rows.append(row)
    widths = [max(len(r[i]) for r in [heads] + rows) for i in range(len(heads))]
    line = lambda r: " | ".join(c.rjust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([line(heads), "-+-".join("-" * w for w in widths)] + [line(r) for r in rows])


class EvaluationError(RuntimeError):
    def __init__(self, missing: Sequence[str]):
        self.missing = list(missing)
        super().__init__(f"missing outputs for {len(self.missing)} test records: {', '.join(self.missing[:20])}")


def score_images(
    pairs: Mapping[str, tuple[np.ndarray, np.ndarray]],
    extractor=None,
    niqe_model: NiqeModel | None = None,
    label: str = "",
) -> MetricReport:
    """Score ``{id: (output, ground_truth)}`` pairs."""
    rep = MetricReport(label=label)
    outs, gts = [], []
    for img_id in sorted(pairs):
        out, gt = pairs[img_id]
        rec = {"psnr": psnr(out, gt), "ssim": ssim(out, gt), "ms_ssim": ms_ssim(out, gt)}
        if niqe_model is not None:
            rec["niqe"] = niqe_score(out, niqe_model)
        rep.per_image[img_id] = rec
        outs.append(out)
        gts.append(gt)
    if extractor is not None and outs:
        rep.set_level[FFD] = frechet_feature_distance(outs, gts, extractor)
    return rep


def evaluate(
    records: Sequence[Mapping],
    model_out_dir: str | os.PathLike,
    niqe_model: NiqeModel | None = None,
    extractor=None,
    label: str = "",
) -> MetricReport:
    """Score generated images in ``model_out_dir`` (``<id>.png``) against the records' ground truth.

    ``records`` are TEST-split manifest records with ``id`` and ``hq_path``.
    """
    missing = [r["id"] for r in records if not os.path.exists(os.path.join(model_out_dir, f"{r['id']}.png"))]
    if missing:
        raise EvaluationError(missing)
    pairs = {
        r["id"]: (load_image(os.path.join(model_out_dir, f"{r['id']}.png")), load_image(r["hq_path"])) for r in records
    }
    return score_images(pairs, extractor, niqe_model, label)
