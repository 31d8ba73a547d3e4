"""Nested suppression/replenishment generator.

The encoder (:class:`~facerenov.suppress.SuppressionEncoder`) turns the
degraded image into a feature hierarchy.  The decoder starts from a learned
constant tensor and runs one replenishment block per stage, consuming the
hierarchy deepest-first: block ``k`` works at ``r0 * 2**k`` and is guided by
encoder feature ``N - 1 - k``, which lives at exactly that resolution.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import from_model, image_grid, to_model
from .suppress import DEFAULT_CHANNELS, LEAK, ReflectConv2d, SuppressionEncoder

__all__ = [
    "instance_normalize",
    "SpadeNorm",
    "spade_normalize",
    "ReplenishBlock",
    "Generator",
    "generator_forward",
    "ablate_stage_forward",
    "ablation_grid",
    "prefix_active_sets",
]

NORM_EPS = 1e-5


def instance_normalize(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Per-sample, per-channel zero mean / unit variance over spatial dims."""
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class SpadeNorm(nn.Module):
    """Parameter-free normalization followed by guidance-predicted scale and shift."""

    def __init__(self, norm_ch: int, guide_ch: int, hidden: int = 64, kernel_size: int = 3):
        super().__init__()
        self.shared = ReflectConv2d(guide_ch, hidden, kernel_size)
        self.gamma = ReflectConv2d(hidden, norm_ch, kernel_size)
        self.beta = ReflectConv2d(hidden, norm_ch, kernel_size)

    def params(self, guidance: torch.Tensor, size) -> tuple[torch.Tensor, torch.Tensor]:
        if guidance.shape[2:] != tuple(size):
            guidance = F.interpolate(guidance, size=tuple(size), mode="nearest")
        actv = F.relu(self.shared(guidance))
        return self.gamma(actv), self.beta(actv)

    def forward(self, x: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.params(guidance, x.shape[2:])
        if gamma.shape != x.shape:
            raise RuntimeError(f"modulation shape {tuple(gamma.shape)} does not match features {tuple(x.shape)}")
        return instance_normalize(x) * (1 + gamma) + beta


def spade_normalize(x: torch.Tensor, guidance: torch.Tensor, block: SpadeNorm) -> torch.Tensor:
    return block(x, guidance)


class ReplenishBlock(nn.Module):
    """Guided residual unit followed by 2x nearest-neighbour upsampling."""

    def __init__(self, in_ch: int, out_ch: int, guide_ch: int, hidden: int = 64):
        super().__init__()
        mid = min(in_ch, out_ch)
        self.norm_0 = SpadeNorm(in_ch, guide_ch, hidden)
        self.conv_0 = ReflectConv2d(in_ch, mid)
        self.norm_1 = SpadeNorm(mid, guide_ch, hidden)
        self.conv_1 = ReflectConv2d(mid, out_ch)
        self.skip = nn.Conv2d(in_ch, out_ch, 1, bias=False) if in_ch != out_ch else None

    def forward(self, x: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        dx = self.conv_0(F.leaky_relu(self.norm_0(x, guidance), LEAK))
        dx = self.conv_1(F.leaky_relu(self.norm_1(dx, guidance), LEAK))
        xs = self.skip(x) if self.skip is not None else x
        return F.interpolate(xs + dx, scale_factor=2, mode="nearest")


class Generator(nn.Module):
    """Encoder + learned-constant decoder.

    ``guidance_mode``:
      * ``"encoder"`` - suppression features (the default architecture);
      * ``"image"`` - every block is guided by the degraded input image itself
        (or by an external guide map passed to :meth:`forward`).
    """

    def __init__(
        self,
        resolution: int = 64,
        channels: Sequence[int] = DEFAULT_CHANNELS,
        adaptive: bool = True,
        activation: str = "sigmoid",
        guidance_mode: str = "encoder",
        guide_ch: int = 3,
        spade_hidden: int = 64,
    ):
        super().__init__()
        n = len(channels)
        if n < 1:
            raise ValueError("need at least one stage")
        if resolution % (2**n):
            raise ValueError(f"resolution {resolution} not divisible by 2**{n}")
        if guidance_mode not in ("encoder", "image"):
            raise ValueError(f"unknown guidance_mode {guidance_mode!r}")
        self.resolution = resolution
        self.channels = tuple(channels)
        self.n_stages = n
        self.base = resolution // 2**n
        self.guidance_mode = guidance_mode
        self.encoder = SuppressionEncoder(3, channels, activation, adaptive)
        widths = list(reversed(self.channels))  # decoder width entering block k
        self.head_const = nn.Parameter(torch.randn(1, widths[0], self.base, self.base))
        blocks = []
        for k in range(n):
            out_ch = widths[k + 1] if k + 1 < n else widths[-1]
            g_ch = self.channels[n - 1 - k] if guidance_mode == "encoder" else guide_ch
            blocks.append(ReplenishBlock(widths[k], out_ch, g_ch, spade_hidden))
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = ReflectConv2d(widths[-1], 3)

    def set_adaptive(self, flag: bool) -> None:
        self.encoder.set_adaptive(flag)

    def guidance(self, x: torch.Tensor, guide: torch.Tensor | None = None) -> list[torch.Tensor]:
        """Guidance per decoder block, in decoder order (deepest feature first)."""
        if self.guidance_mode == "encoder":
            return list(reversed(self.encoder(x)))
        g = x if guide is None else guide
        return [g] * self.n_stages

    def decode(self, guides: Sequence[torch.Tensor], batch: int) -> torch.Tensor:
        h = self.head_const.expand(batch, -1, -1, -1)
        for block, g in zip(self.blocks, guides):
            h = block(h, g)
        return torch.tanh(self.to_rgb(F.leaky_relu(h, LEAK)))

    def _check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != (self.resolution, self.resolution):
            raise ValueError(
                f"expected (B, 3, {self.resolution}, {self.resolution}) input, got {tuple(x.shape)}"
            )

    def forward(self, x: torch.Tensor, guide: torch.Tensor | None = None, active: Iterable[int] | None = None) -> torch.Tensor:
        """``x`` in ``[-1, 1]`` (NCHW) -> restored image in ``[-1, 1]``.

        ``active`` restricts guidance to the listed stage indices (encoder
        numbering); the other stages get an all-zero tensor of the same shape.
        """
        self._check_input(x)
        guides = self.guidance(x, guide)
        if active is not None:
            active = set(int(i) for i in active)
            bad = [i for i in active if not 0 <= i < self.n_stages]
            if bad:
                raise ValueError(f"invalid stage index {bad}; valid range is 0..{self.n_stages - 1}")
            n = self.n_stages
            guides = [g if (n - 1 - k) in active else torch.zeros_like(g) for k, g in enumerate(guides)]
        return self.decode(guides, x.shape[0])


def _run(img_lq: np.ndarray, g: Generator, active=None) -> np.ndarray:
    p = next(g.parameters())
    with torch.no_grad():
        out = g(to_model(img_lq, dtype=p.dtype).to(p.device), active=active)
    return from_model(out)[0]


def generator_forward(img_lq: np.ndarray, g: Generator) -> np.ndarray:
    """Restore one ``[0, 1]`` image of the generator's working resolution."""
    return _run(img_lq, g)


def ablate_stage_forward(img_lq: np.ndarray, g: Generator, active: Iterable[int]) -> np.ndarray:
    """Forward with guidance only at the ``active`` stages (zeros elsewhere)."""
    return _run(img_lq, g, active=list(active))


def prefix_active_sets(n_stages: int) -> list[list[int]]:
    """``[], [N-1], [N-1, N-2], ..., all`` - deepest stages switched on first."""
    return [list(range(n_stages - 1, n_stages - 1 - k, -1)) for k in range(n_stages + 1)]


def ablation_grid(img_lq: np.ndarray, g: Generator, active_sets: Sequence[Sequence[int]] | None = None) -> np.ndarray:
    """One row: the input followed by one panel per active set."""
    sets = prefix_active_sets(g.n_stages) if active_sets is None else active_sets
    panels = [np.asarray(img_lq, dtype=np.float64)] + [ablate_stage_forward(img_lq, g, s) for s in sets]
    return image_grid([panels])
