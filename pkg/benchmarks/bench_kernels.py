"""Compare the compiled and numpy convolution kernels.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times each kernel on the shapes the toy policy uses (a training minibatch
and a single attribution call), then one full dtd attribution per backend.
"""
import argparse
import timeit

import numpy as np

from pxray import _kernels_py, attribution, kernels
from pxray.env import DEFAULT_STARTS, DEFAULT_TARGETS, make_scene, observe
from pxray.nn import build_network
from pxray.training import default_arch

try:
    from pxray import _ckernels
except ImportError:
    _ckernels = None

SHAPES = {
    # name: (N, Hp, Wp, Ci, kh, kw, Co, stride)
    "conv1 batch64": (64, 32, 32, 1, 5, 5, 8, 2),
    "conv2 batch64": (64, 14, 14, 8, 3, 3, 8, 1),
    "conv1 single": (1, 32, 32, 1, 5, 5, 8, 2),
    "conv2 single": (1, 14, 14, 8, 3, 3, 8, 1),
}


def best(fn, repeat):
    n = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, (n, hp, wp, ci, kh, kw, co, s) in SHAPES.items():
        xp = rng.normal(size=(n, hp, wp, ci))
        w = rng.normal(size=(kh, kw, ci, co))
        gy = rng.normal(size=(n, (hp - kh) // s + 1, (wp - kw) // s + 1, co))
        ops = {
            "forward": lambda m: m.conv_forward(xp, w, s),
            "grad_input": lambda m: m.conv_backward_input(gy, w, s, hp, wp),
            "grad_weights": lambda m: m.conv_backward_weights(xp, gy, s, kh, kw),
        }
        for op, call in ops.items():
            t_py = best(lambda: call(_kernels_py), repeat)
            t_c = best(lambda: call(_ckernels), repeat) if _ckernels else float("nan")
            rows.append((name, op, t_py, t_c))
    return rows


def bench_attribution(repeat):
    net = build_network(default_arch(2), np.random.default_rng(0))
    obs = observe(make_scene(DEFAULT_TARGETS[0], DEFAULT_STARTS[0]))
    alpha = np.array([0.6, 0.4])
    out = {}
    saved = kernels._impl
    for label, impl in (("python", _kernels_py), ("cython", _ckernels)):
        if impl is None:
            continue
        kernels._impl = impl
        out[label] = best(lambda: attribution.attribute_dtd(net, obs.image, obs.config, alpha), repeat)
    kernels._impl = saved
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy backend is timed")
    print(f"{'shape':16s} {'op':13s} {'numpy us':>10s} {'cython us':>10s} {'speedup':>8s}")
    for name, op, t_py, t_c in bench_kernels(args.repeat):
        print(f"{name:16s} {op:13s} {t_py * 1e6:10.1f} {t_c * 1e6:10.1f} {t_py / t_c:7.2f}x")
    att = bench_attribution(args.repeat)
    line = "  ".join(f"{k} {v * 1e3:.2f} ms" for k, v in att.items())
    print(f"\ndtd attribution, 32x32 policy: {line}")


if __name__ == "__main__":
    main()
