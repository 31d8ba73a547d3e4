"""Dispatch for the modulated convolution kernel.

The compiled extension (``facerenov._kernels``) is used when it imports and
the tensors live on the CPU; otherwise a pure-torch implementation runs.
Set ``FACERENOV_BACKEND=python`` to force the fallback, or ``compiled`` to
fail loudly when the extension is missing.
"""

from __future__ import annotations

import os

import torch
import torch.nn.functional as F
from torch.autograd.function import once_differentiable

try:
    from . import _kernels
except ImportError:  # pragma: no cover - depends on the build
    _kernels = None

_requested = os.environ.get("FACERENOV_BACKEND", "auto").lower()
if _requested not in ("auto", "python", "compiled"):
    raise ImportError(f"FACERENOV_BACKEND must be auto|python|compiled, got {_requested!r}")
if _requested == "compiled" and _kernels is None:
    raise ImportError("FACERENOV_BACKEND=compiled but facerenov._kernels is not built")

BACKEND = "compiled" if (_kernels is not None and _requested != "python") else "python"


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _kernels is not None else [])


def modulated_conv_python(xpad: torch.Tensor, mod: torch.Tensor, weight: torch.Tensor, stride: int = 1) -> torch.Tensor:
    """Reference path: unfold, modulate, matmul.  Autograd supplies the backward."""
    b, c = xpad.shape[:2]
    o, _, k, _ = weight.shape
    ho, wo = mod.shape[2:]
    cols = F.unfold(xpad, k, stride=stride).view(b, c, k * k, ho * wo)
    cols = cols * mod.reshape(b, 1, k * k, ho * wo)
    out = weight.reshape(o, c * k * k) @ cols.view(b, c * k * k, ho * wo)
    return out.view(b, o, ho, wo)


class _CompiledModulatedConv(torch.autograd.Function):
    @staticmethod
    def forward(ctx, xpad, mod, weight, stride):
        xn = xpad.detach().contiguous().numpy()
        mn = mod.detach().contiguous().numpy()
        wn = weight.detach().contiguous().numpy()
        ctx.save_for_backward(xpad, mod, weight)
        ctx.stride = stride
        return torch.from_numpy(_kernels.modulated_conv_forward(xn, mn, wn, stride))

    @staticmethod
    @once_differentiable
    def backward(ctx, grad_out):
        xpad, mod, weight = ctx.saved_tensors
        gx, gm, gw = _kernels.modulated_conv_backward(
            grad_out.contiguous().numpy(),
            xpad.contiguous().numpy(),
            mod.contiguous().numpy(),
            weight.contiguous().numpy(),
            ctx.stride,
        )
        return torch.from_numpy(gx), torch.from_numpy(gm), torch.from_numpy(gw), None


def modulated_conv_compiled(xpad: torch.Tensor, mod: torch.Tensor, weight: torch.Tensor, stride: int = 1) -> torch.Tensor:
    if _kernels is None:
        raise RuntimeError("compiled backend is not available")
    return _CompiledModulatedConv.apply(xpad, mod, weight, stride)


def modulated_conv(
    xpad: torch.Tensor,
    mod: torch.Tensor,
    weight: torch.Tensor,
    stride: int = 1,
    backend: str | None = None,
) -> torch.Tensor:
    """``out[b,o,y,x] = sum_{c,k} w[o,c,k] * mod[b,k,y,x] * xpad[b,c,y*s+ky,x*s+kx]``."""
    backend = backend or BACKEND
    usable = (
        backend == "compiled"
        and _kernels is not None
        and xpad.device.type == "cpu"
        and xpad.dtype in (torch.float32, torch.float64)
        and xpad.dtype == mod.dtype == weight.dtype
    )
    if usable:
        return modulated_conv_compiled(xpad, mod, weight, stride)
    return modulated_conv_python(xpad, mod, weight, stride)
