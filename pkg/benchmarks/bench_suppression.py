"""Time the modulated convolution on both backends.

    python benchmarks/bench_suppression.py [--repeat 20] [--dtype float32]

Prints forward and forward+backward wall time per call for a few
encoder-sized shapes, plus the max abs difference between backends.
"""

from __future__ import annotations

import argparse
import time

import torch

from facerenov import _backend

SHAPES = [
    # batch, channels in, channels out, size, stride
    (8, 3, 32, 64, 2),
    (8, 32, 64, 32, 2),
    (8, 64, 64, 16, 2),
    (8, 64, 64, 32, 1),
]


def _inputs(b, c, o, size, stride, dtype):
    g = torch.Generator().manual_seed(0)
    xpad = torch.randn(b, c, size + 2, size + 2, generator=g, dtype=dtype)
    ho = (size - 1) // stride + 1
    mod = torch.rand(b, 9, ho, ho, generator=g, dtype=dtype)
    w = torch.randn(o, c, 3, 3, generator=g, dtype=dtype)
    return xpad, mod, w


def _time(fn, repeat):
    fn()
    t = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t) / repeat


def bench(backend, shape, repeat, dtype):
    b, c, o, size, stride = shape
    xpad, mod, w = _inputs(b, c, o, size, stride, dtype)

    def fwd():
        with torch.no_grad():
            return _backend.modulated_conv(xpad, mod, w, stride, backend=backend)

    def fwd_bwd():
        leaves = [t.detach().requires_grad_(True) for t in (xpad, mod, w)]
        _backend.modulated_conv(*leaves, stride, backend=backend).sum().backward()

    return _time(fwd, repeat), _time(fwd_bwd, repeat), fwd()


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    torch.set_num_threads(args.threads)
    dtype = getattr(torch, args.dtype)
    backends = _backend.available_backends()
    print(f"backends: {', '.join(backends)} (default {_backend.BACKEND}), dtype {args.dtype}, threads {args.threads}")
    header = f"{'shape (B,C,O,S,stride)':<24}" + "".join(f"{bk + ' fwd':>14}{bk + ' f+b':>14}" for bk in backends)
    print(header + f"{'max |diff|':>12}")
    for shape in SHAPES:
        row, outs = f"{str(shape):<24}", []
        for bk in backends:
            tf, tb, out = bench(bk, shape, args.repeat, dtype)
            row += f"{tf * 1e3:>11.2f} ms{tb * 1e3:>11.2f} ms"
            outs.append(out)
        diff = float((outs[0] - outs[-1]).abs().max()) if len(outs) > 1 else 0.0
        print(row + f"{diff:>12.1e}")


if __name__ == "__main__":
    main()
