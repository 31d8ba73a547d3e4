"""Degradation operators and the randomized full-degradation composition.

Every operator maps a ``[0, 1]`` image to a ``[0, 1]`` image of the same
shape (except :func:`downsample`).  Stochastic operators take an explicit
seed so that a :class:`DegradationPipeline` record replays bit-exactly.
"""

from __future__ import annotations

import dataclasses
import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .core import check_image, derive_seed, make_rng, quantize, resize_bicubic

__all__ = [
    "Kind",
    "Family",
    "DegradationRanges",
    "DegradationSpec",
    "DegradationPipeline",
    "gaussian_kernel1d",
    "gaussian_blur",
    "motion_kernel",
    "motion_blur",
    "mosaic",
    "downsample",
    "add_noise",
    "jpeg_compress",
    "compose_full_degradation",
    "task_pipeline",
    "TASKS",
]


class Kind(str, enum.Enum):
    GAUSS_BLUR = "GAUSS_BLUR"
    MOTION_BLUR = "MOTION_BLUR"
    DOWNSAMPLE = "DOWNSAMPLE"
    MOSAIC = "MOSAIC"
    NOISE_GAUSS = "NOISE_GAUSS"
    NOISE_POISSON = "NOISE_POISSON"
    NOISE_LAPLACE = "NOISE_LAPLACE"
    JPEG = "JPEG"


class Family(str, enum.Enum):
    BLUR = "blur"
    DOWNSAMPLE = "downsample"
    NOISE = "noise"
    JPEG = "jpeg"
    MOSAIC = "mosaic"


FAMILY_OF = {
    Kind.GAUSS_BLUR: Family.BLUR,
    Kind.MOTION_BLUR: Family.BLUR,
    Kind.DOWNSAMPLE: Family.DOWNSAMPLE,
    Kind.MOSAIC: Family.MOSAIC,
    Kind.NOISE_GAUSS: Family.NOISE,
    Kind.NOISE_POISSON: Family.NOISE,
    Kind.NOISE_LAPLACE: Family.NOISE,
    Kind.JPEG: Family.JPEG,
}

FR_FAMILIES = (Family.BLUR, Family.DOWNSAMPLE, Family.NOISE, Family.JPEG)

TASKS = ("SR4X", "HALLUC16X", "DENOISE", "DEBLUR", "JPEG", "RENOVATION")


@dataclass(frozen=True)
class DegradationRanges:
    """Intensity -> parameter maps, all in one place so they can be retuned.

    Defaults target a 64x64 working scale.
    """

    sigma: tuple[float, float] = (0.5, 3.0)
    sigma_max: float = 3.0
    motion_length: tuple[int, int] = (3, 9)
    down_factors: tuple[int, ...] = (2, 4)
    noise_level: tuple[float, float] = (0.02, 0.12)
    jpeg_quality: tuple[int, int] = (10, 60)
    mosaic_block: tuple[int, int] = (2, 16)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DegradationRanges":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown degradation range keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _lerp(rng: tuple[float, float], t: float) -> float:
    return rng[0] + (rng[1] - rng[0]) * t


@dataclass(frozen=True)
class DegradationSpec:
    """One operator with its intensity in ``[0, 1]`` and its private seed.

    ``param`` pins the operator parameter explicitly (e.g. a fixed 4x factor
    for the super-resolution task); otherwise it is derived from intensity.
    """

    kind: Kind
    intensity: float
    seed: int
    param: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must lie in [0, 1], got {self.intensity}")

    def parameters(self, ranges: DegradationRanges = DegradationRanges()) -> dict[str, Any]:
        t = self.intensity
        k = self.kind
        p = self.param
        if k is Kind.GAUSS_BLUR:
            return {"sigma": p if p is not None else _lerp(ranges.sigma, t)}
        if k is Kind.MOTION_BLUR:
            lo, hi = ranges.motion_length
            length = int(p) if p is not None else lo + min(int(t * (hi - lo + 1)), hi - lo)
            angle = float(make_rng(self.seed).uniform(0.0, math.pi))
            return {"length": length, "angle": angle}
        if k is Kind.DOWNSAMPLE:
            fs = ranges.down_factors
            return {"factor": int(p) if p is not None else fs[min(int(t * len(fs)), len(fs) - 1)]}
        if k is Kind.MOSAIC:
            lo, hi = ranges.mosaic_block
            return {"block": int(p) if p is not None else int(round(_lerp((lo, hi), t)))}
        if k in (Kind.NOISE_GAUSS, Kind.NOISE_POISSON, Kind.NOISE_LAPLACE):
            return {"level": p if p is not None else _lerp(ranges.noise_level, t)}
        if k is Kind.JPEG:
            # higher intensity = stronger compression = lower quality
            lo, hi = ranges.jpeg_quality
            return {"quality": int(p) if p is not None else int(round(_lerp((hi, lo), t)))}
        raise ValueError(f"unhandled kind {k}")

    def apply(self, img: np.ndarray, ranges: DegradationRanges = DegradationRanges()) -> np.ndarray:
        prm = self.parameters(ranges)
        k = self.kind
        if k is Kind.GAUSS_BLUR:
            return gaussian_blur(img, prm["sigma"], sigma_max=max(ranges.sigma_max, prm["sigma"]))
        if k is Kind.MOTION_BLUR:
            length = min(prm["length"], max(1, min(img.shape[:2]) // 2))
            return motion_blur(img, length, prm["angle"])
        if k is Kind.DOWNSAMPLE:
            f = prm["factor"]
            small = downsample(img, f)
            return resize_bicubic(small, size=img.shape[:2])
        if k is Kind.MOSAIC:
            return mosaic(img, prm["block"])
        if k is Kind.JPEG:
            return jpeg_compress(img, prm["quality"])
        family = {Kind.NOISE_GAUSS: "GAUSS", Kind.NOISE_POISSON: "POISSON", Kind.NOISE_LAPLACE: "LAPLACE"}[k]
        return add_noise(img, family, prm["level"], self.seed)

    def to_record(self, ranges: DegradationRanges = DegradationRanges()) -> dict[str, Any]:
        rec = {"kind": self.kind.value, "intensity": self.intensity, "seed": self.seed}
        if self.param is not None:
            rec["param"] = self.param
        rec["parameters"] = self.parameters(ranges)
        return rec

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "DegradationSpec":
        return cls(Kind(rec["kind"]), float(rec["intensity"]), int(rec["seed"]), rec.get("param"))


@dataclass(frozen=True)
class DegradationPipeline:
    specs: tuple[DegradationSpec, ...]
    order_seed: int
    ranges: DegradationRanges = field(default_factory=DegradationRanges)

    def apply(self, img: np.ndarray) -> np.ndarray:
        out = np.asarray(img, dtype=np.float64)
        for spec in self.specs:
            out = spec.apply(out, self.ranges)
        return out

    @property
    def kinds(self) -> list[Kind]:
        return [s.kind for s in self.specs]

    @property
    def families(self) -> list[Family]:
        return [FAMILY_OF[s.kind] for s in self.specs]

    def to_record(self) -> dict[str, Any]:
        return {
            "order_seed": self.order_seed,
            "order": [f.value for f in self.families],
            "stages": [s.to_record(self.ranges) for s in self.specs],
            "ranges": dataclasses.asdict(self.ranges),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "DegradationPipeline":
        ranges = DegradationRanges.from_dict(rec["ranges"]) if "ranges" in rec else DegradationRanges()
        specs = tuple(DegradationSpec.from_record(s) for s in rec["stages"])
        return cls(specs, int(rec["order_seed"]), ranges)

    @classmethod
    def from_json(cls, text: str) -> "DegradationPipeline":
        return cls.from_record(json.loads(text))


# ---------------------------------------------------------------------------
# operators


def _filter_separable(img: np.ndarray, k1: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, k1, axis=0, mode="mirror")
    return ndimage.correlate1d(out, k1, axis=1, mode="mirror")


def gaussian_kernel1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = int(math.ceil(truncate * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float, *, sigma_max: float = 3.0) -> np.ndarray:
    """Separable Gaussian blur with mirror padding, radius ``ceil(4 sigma)``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if sigma > sigma_max:
        raise ValueError(f"sigma {sigma} exceeds sigma_max {sigma_max}")
    img = np.asarray(img, dtype=np.float64)
    return np.clip(_filter_separable(img, gaussian_kernel1d(sigma)), 0.0, 1.0)


def motion_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized line kernel: ``length`` unit-spaced samples splatted bilinearly."""
    if length < 1:
        raise ValueError(f"motion length must be >= 1, got {length}")
    half = (length - 1) / 2.0
    size = 2 * int(math.ceil(half)) + 3
    c = size // 2
    k = np.zeros((size, size))
    dx, dy = math.cos(angle), -math.sin(angle)
    for i in range(length):
        t = i - half
        x, y = c + t * dx, c + t * dy
        # snap numerically-integral coordinates so axis-aligned kernels stay exact
        x = round(x) if abs(x - round(x)) < 1e-9 else x
        y = round(y) if abs(y - round(y)) < 1e-9 else y
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
            for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                if wy * wx > 0:
                    k[yy, xx] += wy * wx
    k /= k.sum()
    nz = np.argwhere(k > 0)
    r = int(np.max(np.abs(nz - c)))
    return k[c - r : c + r + 1, c - r : c + r + 1]


def motion_blur(img: np.ndarray, length: int, angle: float | None = None, seed: int | None = None) -> np.ndarray:
    """Convolve with a line kernel.  ``angle`` in radians; drawn from ``seed`` if omitted."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if length < 1 or length > max(1, min(h, w) // 2):
        raise ValueError(f"motion length {length} outside [1, {min(h, w) // 2}]")
    if angle is None:
        if seed is None:
            raise ValueError("motion_blur needs an angle or a seed")
        angle = float(make_rng(seed).uniform(0.0, math.pi))
    if length == 1:
        return img.copy()
    k = motion_kernel(length, angle)
    out = np.empty_like(img)
    for ch in range(img.shape[2]):
        out[:, :, ch] = ndimage.convolve(img[:, :, ch], k, mode="mirror")
    return np.clip(out, 0.0, 1.0)


def mosaic(img: np.ndarray, block: int) -> np.ndarray:
    """Replace every ``block x block`` tile (ragged at the far edges) by its mean."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if block < 1 or block > min(h, w):
        raise ValueError(f"mosaic block {block} outside [1, {min(h, w)}]")
    if block == 1:
        return img.copy()
    out = np.empty_like(img)
    for y in range(0, h, block):
        for x in range(0, w, block):
            tile = img[y : y + block, x : x + block]
            out[y : y + block, x : x + block] = tile.mean(axis=(0, 1))
    return out


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic decimation to ``floor(H/factor) x floor(W/factor)``."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if factor < 2 or factor > min(h, w):
        raise ValueError(f"downsample factor {factor} outside [2, {min(h, w)}]")
    return resize_bicubic(img, size=(h // factor, w // factor))


def add_noise(img: np.ndarray, family: str, level: float, seed: int, *, level_max: float = 1.0) -> np.ndarray:
    """Additive Gaussian/Laplacian noise with std ``level``, or unbiased Poisson shot noise."""
    img = np.asarray(img, dtype=np.float64)
    if not 0.0 < level <= level_max:
        raise ValueError(f"noise level must be in (0, {level_max}], got {level}")
    rng = make_rng(seed)
    fam = str(family).upper()
    if fam == "GAUSS":
        out = img + rng.normal(0.0, level, size=img.shape)
    elif fam == "LAPLACE":
        out = img + rng.laplace(0.0, level / math.sqrt(2.0), size=img.shape)
    elif fam == "POISSON":
        out = rng.poisson(img / level) * level
    else:
        raise ValueError(f"unknown noise family {family!r}")
    return np.clip(out, 0.0, 1.0)


def jpeg_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """Round-trip through a baseline JPEG codec at ``quality`` (4:4:4 chroma, no subsampling)."""
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"JPEG quality must be in 1..100, got {quality}")
    img = np.asarray(img, dtype=np.float64)
    q = quantize(img)
    pil = PILImage.fromarray(q[:, :, 0], "L") if q.shape[2] == 1 else PILImage.fromarray(q, "RGB")
    buf = io.BytesIO()
    try:
        pil.save(buf, format="JPEG", quality=int(quality), subsampling=0, optimize=False, progressive=False)
        buf.seek(0)
        with PILImage.open(buf) as dec:
            out = np.asarray(dec, dtype=np.float64) / 255.0
    except OSError as exc:
        raise RuntimeError(f"JPEG codec failure: {exc}") from exc
    return out.reshape(img.shape)


# ---------------------------------------------------------------------------
# compositions

_NOISE_KINDS = (Kind.NOISE_GAUSS, Kind.NOISE_POISSON, Kind.NOISE_LAPLACE)
_BLUR_KINDS = (Kind.GAUSS_BLUR, Kind.MOTION_BLUR)


def _family_spec(family: Family, rng: np.random.Generator) -> DegradationSpec:
    if family is Family.BLUR:
        kind = _BLUR_KINDS[int(rng.integers(2))]
    elif family is Family.NOISE:
        kind = _NOISE_KINDS[int(rng.integers(3))]
    elif family is Family.DOWNSAMPLE:
        kind = Kind.DOWNSAMPLE
    elif family is Family.JPEG:
        kind = Kind.JPEG
    else:
        raise ValueError(f"family {family} is not part of the renovation composition")
    intensity = float(rng.uniform(0.0, 1.0))
    seed = int(rng.integers(0, 2**63))
    return DegradationSpec(kind, intensity, seed)


def sample_full_pipeline(seed: int, ranges: DegradationRanges = DegradationRanges()) -> DegradationPipeline:
    rng = make_rng(seed)
    order = [FR_FAMILIES[i] for i in rng.permutation(len(FR_FAMILIES))]
    specs = tuple(_family_spec(f, rng) for f in order)
    return DegradationPipeline(specs, seed, ranges)


def compose_full_degradation(
    img: np.ndarray, seed: int, ranges: DegradationRanges = DegradationRanges()
) -> tuple[np.ndarray, DegradationPipeline]:
    """Blur, downsample (re-upsampled), noise and JPEG in a random order.

    Mosaic is never part of this composition.  Returns the degraded image and
    the pipeline that reproduces it exactly via ``pipeline.apply(img)``.
    """
    check_image(np.asarray(img, dtype=np.float64))
    pipe = sample_full_pipeline(seed, ranges)
    return pipe.apply(img), pipe


def task_pipeline(
    task: str,
    seed: int,
    ranges: DegradationRanges = DegradationRanges(),
    *,
    mosaic_block: int = 2,
) -> DegradationPipeline:
    """The degradation used to build training pairs for one subtask."""
    task = task.upper()
    rng = make_rng(seed)
    if task == "RENOVATION":
        return sample_full_pipeline(seed, ranges)
    if task == "SR4X":
        specs = (DegradationSpec(Kind.DOWNSAMPLE, 1.0, derive_seed(seed, 1), param=4),)
    elif task == "HALLUC16X":
        specs = (DegradationSpec(Kind.MOSAIC, 1.0, derive_seed(seed, 1), param=mosaic_block),)
    elif task == "DENOISE":
        specs = (_family_spec(Family.NOISE, rng),)
    elif task == "DEBLUR":
        specs = (_family_spec(Family.BLUR, rng),)
    elif task == "JPEG":
        specs = (_family_spec(Family.JPEG, rng),)
    else:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return DegradationPipeline(specs, seed, ranges)
