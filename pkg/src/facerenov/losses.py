"""Training objectives: least-squares adversarial terms, feature matching,
perceptual distance and the weighted generator total."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import to_model

__all__ = [
    "LossWeights",
    "lsgan_d_loss",
    "lsgan_g_loss",
    "feature_distance",
    "feature_matching_loss",
    "PerceptualExtractor",
    "perceptual_loss",
    "total_g_loss",
]


@dataclass(frozen=True)
class LossWeights:
    lambda_fm: float = 10.0
    lambda_perc: float = 10.0

    def __post_init__(self):
        for name in ("lambda_fm", "lambda_perc"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def _as_tensor_list(logits) -> list[torch.Tensor]:
    if isinstance(logits, torch.Tensor):
        return [logits]
    return list(logits)


def lsgan_d_loss(logits_real, logits_fake) -> torch.Tensor:
    """Mean over scales of ``mean((real - 1)^2)`` plus mean over scales of ``mean(fake^2)``."""
    real, fake = _as_tensor_list(logits_real), _as_tensor_list(logits_fake)
    if not real or not fake:
        raise ValueError("lsgan_d_loss needs at least one logit map on each side")
    loss_real = sum(((r - 1) ** 2).mean() for r in real) / len(real)
    loss_fake = sum((f**2).mean() for f in fake) / len(fake)
    return loss_real + loss_fake


def lsgan_g_loss(logits_fake) -> torch.Tensor:
    fake = _as_tensor_list(logits_fake)
    if not fake:
        raise ValueError("lsgan_g_loss needs at least one logit map")
    return sum(((f - 1) ** 2).mean() for f in fake) / len(fake)


def feature_distance(feats_a: Sequence[torch.Tensor], feats_b: Sequence[torch.Tensor]) -> torch.Tensor:
    """``sum_i ||a_i - b_i||^2 / (H_i W_i C_i)``, averaged over the batch."""
    if len(feats_a) != len(feats_b):
        raise ValueError(f"layer count mismatch: {len(feats_a)} vs {len(feats_b)}")
    total = None
    for a, b in zip(feats_a, feats_b):
        if a.shape != b.shape:
            raise ValueError(f"feature shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
        term = ((a - b) ** 2).mean()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no features to compare")
    return total


def feature_matching_loss(feats_real, feats_fake) -> torch.Tensor:
    """Feature distance summed over discriminator scales.

    Both arguments are nested ``[scale][layer]`` lists of activations.
    Real-side activations are treated as constants.
    """
    if len(feats_real) != len(feats_fake):
        raise ValueError(f"scale count mismatch: {len(feats_real)} vs {len(feats_fake)}")
    return sum(
        feature_distance([f.detach() for f in fr], ff) for fr, ff in zip(feats_real, feats_fake)
    )


class PerceptualExtractor(nn.Module):
    """Frozen convolutional feature stack with one tap after each block.

    Block ``i`` (``i > 0``) halves the resolution with 2x2 average pooling,
    then applies a 3x3 convolution and ReLU.  Weights are either drawn from
    a fixed seed or loaded from a ``torch.save``'d state dict.
    """

    def __init__(self, widths: Sequence[int] = (32, 64, 128, 128), seed: int = 1234, weights_path: str | None = None):
        super().__init__()
        self.widths = tuple(widths)
        chans = [3, *self.widths]
        self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(len(self.widths)))
        if weights_path:
            if not os.path.exists(weights_path):
                raise FileNotFoundError(weights_path)
            self.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
            self.weights_source = ("LOADED", str(weights_path))
        else:
            gen = torch.Generator().manual_seed(int(seed))
            with torch.no_grad():
                for conv in self.convs:
                    fan_in = conv.weight[0].numel()
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                    conv.bias.zero_()
            self.weights_source = ("FIXED_RANDOM", int(seed))
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen: never leaves eval mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for i, conv in enumerate(self.convs):
            if i:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x))
            taps.append(x)
        return taps

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Spatially pooled deepest tap, ``(B, widths[-1])``."""
        return self.forward(x)[-1].mean(dim=(2, 3))


def perceptual_loss(i_gt, i_gen, p: PerceptualExtractor) -> torch.Tensor:
    """Feature distance over the extractor taps.

    Accepts NCHW tensors in ``[-1, 1]`` or ``(H, W, C)`` numpy images in ``[0, 1]``.
    """
    dtype = next(p.parameters()).dtype
    if isinstance(i_gt, np.ndarray):
        i_gt = to_model(i_gt, dtype=dtype)
    if isinstance(i_gen, np.ndarray):
        i_gen = to_model(i_gen, dtype=dtype)
    if i_gt.shape != i_gen.shape:
        raise ValueError(f"resolution mismatch: {tuple(i_gt.shape)} vs {tuple(i_gen.shape)}")
    with torch.no_grad():
        ref = p(i_gt)
    return feature_distance(ref, p(i_gen))


def total_g_loss(parts: dict, w: LossWeights = LossWeights(), l1_weight: float = 0.0) -> torch.Tensor:
    """``gan + lambda_fm * fm + lambda_perc * perc + l1_weight * l1``.

    ``parts`` maps ``"gan"``, ``"fm"``, ``"perc"`` and (when ``l1_weight > 0``)
    ``"l1"`` to scalar losses; missing optional terms count as zero.
    """
    if l1_weight < 0:
        raise ValueError("l1_weight must be >= 0")
    total = parts["gan"]
    if w.lambda_fm:
        total = total + w.lambda_fm * parts["fm"]
    if w.lambda_perc:
        total = total + w.lambda_perc * parts["perc"]
    if l1_weight:
        total = total + l1_weight * parts["l1"]
    return total


def l1_pixel_loss(i_gt: torch.Tensor, i_gen: torch.Tensor) -> torch.Tensor:
    """Mean absolute error in ``[0, 1]`` pixel space (inputs in ``[-1, 1]``)."""
    return (0.5 * (i_gt - i_gen)).abs().mean()
