"""Content-adaptive suppression convolution and the encoder built from it.

A suppression convolution is an ordinary ``S x S`` convolution whose kernel
tap ``w[j - i]`` is scaled, per output pixel ``i`` and neighbour ``j``, by a
learned symmetric correlation ``phi(f_i, f_j) = act(<G(f_i), G(f_j)>)``.
With ``phi == 1`` it is exactly :func:`conv2d`.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._backend import modulated_conv
from .core import to_model

__all__ = [
    "conv2d",
    "ReflectConv2d",
    "CorrelationHead",
    "correlation_phi",
    "correlation_map",
    "SuppressionConv",
    "suppression_conv",
    "SuppressionEncoder",
    "encode_hierarchy",
    "DEFAULT_CHANNELS",
]

DEFAULT_CHANNELS = (64, 128, 256, 512)
LEAK = 0.2


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1) -> torch.Tensor:
    """Content-agnostic convolution with reflect padding ("same" output size)."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"expected NCHW input and OIHW weight, got {tuple(x.shape)} / {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}")
    k = weight.shape[-1]
    if k % 2 == 0 or weight.shape[-2] != k:
        raise ValueError(f"kernel must be square with odd size, got {tuple(weight.shape[-2:])}")
    p = k // 2
    if p:
        x = F.pad(x, (p, p, p, p), mode="reflect")
    return F.conv2d(x, weight, bias, stride=stride)


class ReflectConv2d(nn.Module):
    """An ``S x S`` kernel plus bias, applied with reflect padding."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, stride: int = 1, bias: bool = True):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_ch)) if bias else None
        _init_conv(self.weight, self.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.weight, self.bias, self.stride)


def _init_conv(weight: nn.Parameter, bias: nn.Parameter | None) -> None:
    # same scheme as torch.nn.Conv2d
    nn.init.kaiming_uniform_(weight, a=math.sqrt(5))
    if bias is not None:
        fan_in = weight[0].numel()
        bound = 1 / math.sqrt(fan_in) if fan_in else 0
        nn.init.uniform_(bias, -bound, bound)


_ACTIVATIONS = {"sigmoid": torch.sigmoid, "tanh": torch.tanh}


class CorrelationHead(nn.Module):
    """Per-pixel projection ``G: R^C -> R^D`` feeding the correlation ``phi``.

    ``G`` is a two-layer perceptron (as 1x1 convolutions) with a tanh between
    the layers; ``D = max(C // 8, 4)`` unless given.
    """

    def __init__(self, in_ch: int, dim_d: int | None = None, activation: str = "sigmoid", bias: bool = True):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}, got {activation!r}")
        self.dim_d = dim_d or max(in_ch // 8, 4)
        if self.dim_d < 1:
            raise ValueError("dim_d must be >= 1")
        self.activation = activation
        self.project = nn.Sequential(
            nn.Conv2d(in_ch, self.dim_d, 1, bias=bias),
            nn.Tanh(),
            nn.Conv2d(self.dim_d, self.dim_d, 1, bias=bias),
        )

    def act(self, s: torch.Tensor) -> torch.Tensor:
        return _ACTIVATIONS[self.activation](s)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(x)


def correlation_phi(f_i: torch.Tensor, f_j: torch.Tensor, head: CorrelationHead) -> torch.Tensor:
    """``phi`` for a single pair of C-vectors."""
    gi = head(f_i.reshape(1, -1, 1, 1)).flatten()
    gj = head(f_j.reshape(1, -1, 1, 1)).flatten()
    return head.act(torch.dot(gi, gj))


def correlation_map(g: torch.Tensor, act, kernel_size: int = 3, stride: int = 1) -> torch.Tensor:
    """``phi`` between each (strided) output centre and each of its ``S*S`` neighbours.

    Returns ``(B, S*S, Ho, Wo)`` where channel ``ky*S + kx`` is the tap at
    offset ``(ky - S//2, kx - S//2)``.  Neighbours outside the map are the
    reflect-padded features, matching the convolution's padding.
    """
    p = kernel_size // 2
    gpad = F.pad(g, (p, p, p, p), mode="reflect") if p else g
    h, w = g.shape[2:]
    centre = g[:, :, ::stride, ::stride]
    ho, wo = centre.shape[2:]
    taps = []
    for ky in range(kernel_size):
        for kx in range(kernel_size):
            nb = gpad[:, :, ky : ky + (ho - 1) * stride + 1 : stride, kx : kx + (wo - 1) * stride + 1 : stride]
            taps.append((nb * centre).sum(1))
    return act(torch.stack(taps, 1))


class SuppressionConv(nn.Module):
    """Suppression convolution (one encoder stage's kernel + correlation head).

    ``adaptive=False`` drops the modulation and runs the plain convolution;
    the head's parameters still exist so both variants initialize identically.
    """

    def __init__(
        self,
        in_ch: int,
        out_ch: int,
        kernel_size: int = 3,
        downsample: bool = False,
        activation: str = "sigmoid",
        dim_d: int | None = None,
        adaptive: bool = True,
    ):
        super().__init__()
        self.kernel = ReflectConv2d(in_ch, out_ch, kernel_size)
        self.head = CorrelationHead(in_ch, dim_d, activation)
        self.downsample = downsample
        self.adaptive = adaptive
        self.backend: str | None = None

    @property
    def stride(self) -> int:
        return 2 if self.downsample else 1

    def modulation(self, x: torch.Tensor) -> torch.Tensor:
        k = self.kernel.weight.shape[-1]
        return correlation_map(self.head(x), self.head.act, k, self.stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.kernel.weight.shape[1]:
            raise ValueError(f"expected (B, {self.kernel.weight.shape[1]}, H, W) input, got {tuple(x.shape)}")
        if not self.adaptive:
            return conv2d(x, self.kernel.weight, self.kernel.bias, self.stride)
        return self.modulated(x, self.modulation(x))

    def modulated(self, x: torch.Tensor, mod: torch.Tensor) -> torch.Tensor:
        """The convolution under an explicit ``(B, S*S, Ho, Wo)`` modulation."""
        w = self.kernel.weight
        p = w.shape[-1] // 2
        xpad = F.pad(x, (p, p, p, p), mode="reflect") if p else x
        out = modulated_conv(xpad, mod, w, self.stride, backend=self.backend)
        return out + self.kernel.bias.view(1, -1, 1, 1)


def suppression_conv(x: torch.Tensor, stage: SuppressionConv) -> torch.Tensor:
    return stage(x)


class SuppressionEncoder(nn.Module):
    """Cascade of downsampling suppression stages emitting one feature per stage.

    Feature ``s`` has ``channels[s]`` channels at ``H / 2**(s+1)``.
    """

    def __init__(
        self,
        in_ch: int = 3,
        channels: Sequence[int] = DEFAULT_CHANNELS,
        activation: str = "sigmoid",
        adaptive: bool = True,
        kernel_size: int = 3,
    ):
        super().__init__()
        self.channels = tuple(channels)
        chans = (in_ch,) + self.channels
        self.stages = nn.ModuleList(
            SuppressionConv(chans[i], chans[i + 1], kernel_size, downsample=True, activation=activation, adaptive=adaptive)
            for i in range(len(self.channels))
        )

    def set_adaptive(self, flag: bool) -> None:
        for st in self.stages:
            st.adaptive = flag

    def set_backend(self, backend: str | None) -> None:
        for st in self.stages:
            st.backend = backend

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        n = len(self.stages)
        h, w = x.shape[2:]
        if h < 2**n or w < 2**n:
            raise ValueError(f"input {h}x{w} too small for {n} stages (needs >= {2**n})")
        feats = []
        for st in self.stages:
            x = F.leaky_relu(st(x), LEAK)
            feats.append(x)
        return feats


def encode_hierarchy(img: np.ndarray, encoder: SuppressionEncoder) -> list[torch.Tensor]:
    """Encode one ``[0, 1]`` image; returns the per-stage features (batch of one)."""
    p = next(encoder.parameters())
    x = to_model(img, dtype=p.dtype).to(p.device)
    return encoder(x)
