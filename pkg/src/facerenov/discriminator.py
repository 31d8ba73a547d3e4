"""Multi-scale patch discriminator.

Scale ``k`` sees the input average-pooled ``2**k`` times and runs a stack of
stride-2 4x4 convolutions ending in a one-channel logit map.  No sigmoid: the
least-squares objective consumes raw logits.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import to_model

__all__ = ["PatchDiscriminator", "MultiScaleDiscriminator", "discriminate"]


class PatchDiscriminator(nn.Module):
    def __init__(self, in_ch: int = 3, widths: Sequence[int] = (64, 128, 256), instance_norm: bool = False):
        super().__init__()
        if len(widths) < 2:
            raise ValueError("a patch discriminator needs at least 3 conv layers")
        chans = [in_ch, *widths]
        self.layers = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 4, stride=2, padding=1) for i in range(len(widths)))
        self.norms = nn.ModuleList(
            nn.InstanceNorm2d(chans[i + 1]) if (instance_norm and i > 0) else nn.Identity() for i in range(len(widths))
        )
        self.logit = nn.Conv2d(chans[-1], 1, 4, stride=2, padding=1)

    @property
    def depth(self) -> int:
        return len(self.layers) + 1

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        feats = []
        for conv, norm in zip(self.layers, self.norms):
            x = F.leaky_relu(norm(conv(x)), 0.2)
            feats.append(x)
        logit = self.logit(x)
        feats.append(logit)
        return logit, feats


class MultiScaleDiscriminator(nn.Module):
    def __init__(
        self,
        num_scales: int = 2,
        in_ch: int = 3,
        widths: Sequence[int] = (64, 128, 256),
        instance_norm: bool = False,
    ):
        super().__init__()
        if num_scales < 1:
            raise ValueError("need at least one discriminator scale")
        self.scales = nn.ModuleList(PatchDiscriminator(in_ch, widths, instance_norm) for _ in range(num_scales))

    def min_resolution(self) -> int:
        depth = self.scales[0].depth
        return 2 ** (depth + len(self.scales) - 1)

    def forward(self, x: torch.Tensor) -> list[tuple[torch.Tensor, list[torch.Tensor]]]:
        h, w = x.shape[2:]
        need = self.min_resolution()
        if min(h, w) < need:
            raise ValueError(f"input {h}x{w} too small for {len(self.scales)} scales of depth {self.scales[0].depth} (need >= {need})")
        out = []
        for k, d in enumerate(self.scales):
            if k:
                x = F.avg_pool2d(x, 2)
            out.append(d(x))
        return out


def discriminate(img: np.ndarray, d: MultiScaleDiscriminator):
    """Score one ``[0, 1]`` image: per scale, ``(logit_map, features)``."""
    p = next(d.parameters())
    return d(to_model(img, dtype=p.dtype).to(p.device))
