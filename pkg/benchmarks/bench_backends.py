"""Kernel and training-step timings, pure-numpy fallback vs compiled core.

    python benchmarks/bench_backends.py [--repeat 30] [--output results.json]

Kernel rows time each backend entry point on the reduced desk-scale widths
used by configs/ and on the full default widths; step rows time one
training iteration of each method via ``bench_step_time``.
"""

import argparse
import json
import time

import numpy as np

from codats import data as D
from codats import experiment as E
from codats import kernels
from codats import train as T
from codats.net import NetConfig

SHAPES = {
    # (batch, length, in channels, kernel, filters)
    "reduced conv1": (128, 64, 16, 5, 32),
    "full conv1": (128, 64, 128, 5, 256),
}


def timeit(f, repeat):
    f()
    t0 = time.perf_counter()
    for _ in range(repeat):
        f()
    return (time.perf_counter() - t0) / repeat


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for label, (B, H, C, k, F) in SHAPES.items():
        x = rng.normal(size=(B, H, C)).astype(np.float32)
        w = rng.normal(size=(k, C, F)).astype(np.float32)
        y = rng.normal(size=(B * H, F)).astype(np.float32)
        g = np.ones(F, np.float32)
        for name in kernels.available():
            be = kernels.use(name)
            out, cols = be.conv1d_forward(x, w)
            _, xhat, inv, _, _ = be.batchnorm_train_forward(y, g, 0 * g, 1e-3)
            cases = {
                "conv forward": lambda: be.conv1d_forward(x, w),
                "conv backward": lambda: be.conv1d_backward(out, x.shape, w, cols, True),
                "bn forward": lambda: be.batchnorm_train_forward(y, g, 0 * g, 1e-3),
                "bn backward": lambda: be.batchnorm_train_backward(y, xhat, inv, g),
            }
            for op, f in cases.items():
                rows.append({"shape": label, "op": op, "backend": name, "ms": 1e3 * timeit(f, repeat)})
    return rows


def step_rows(measured):
    spec = D.SynthSpec(domains={0: {"amplitude": 1.6, "phase": 0.8}})
    splits, _ = E.prepare_splits({d: D.synth_generate(spec, d, 0) for d in (0, 1)}, 0, [1], 0, T.NONE)
    nets = {"reduced": NetConfig(3, 4, 1, filters=(16, 32, 16), domain_widths=(64, 64, 64)),
            "full": NetConfig(3, 4, 1)}
    rows = []
    for label, net in nets.items():
        for name in kernels.available():
            kernels.use(name)
            for m in T.NONE, T.CODATS, T.CODATS_WS:
                mean, std = T.bench_step_time(T.TrainConfig(method=m), [splits[1]], splits[0], net,
                                              warmup=3, measured=measured)
                rows.append({"net": label, "method": m, "backend": name, "ms": 1e3 * mean, "std_ms": 1e3 * std})
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=30)
    ap.add_argument("--measured", type=int, default=20)
    ap.add_argument("--output")
    args = ap.parse_args()
    prev = kernels.backend
    try:
        kr, sr = kernel_rows(args.repeat), step_rows(args.measured)
    finally:
        kernels.backend = prev
    for r in kr:
        print(f"{r['shape']:14s} {r['op']:14s} {r['backend']:7s} {r['ms']:8.2f} ms")
    for r in sr:
        print(f"{r['net']:8s} step {r['method']:10s} {r['backend']:7s} {r['ms']:8.1f} ms +- {r['std_ms']:.1f}")
    if args.output:
        with open(args.output, "w") as fh:
            json.dump({"kernels": kr, "steps": sr}, fh, indent=1)


if __name__ == "__main__":
    main()
