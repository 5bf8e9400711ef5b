"""Wall-clock comparison of the compiled and pure-Python render kernels.

    python3 benchmarks/bench_kernels.py [--primitives K] [--size PX] [--repeats N]
"""
import argparse
import time

import numpy as np

from texavatar.camera import Camera
from texavatar.primitives import PrimitiveSet
from texavatar.raymarch import RenderConfig, available_backends, render, render_backward, use_backend
from texavatar.rotations import so3_exp


def scene(K, S, rng):
    pos = rng.normal(scale=0.6, size=(K, 3))
    rot = so3_exp(rng.normal(size=(K, 3)))
    scale = rng.uniform(0.08, 0.25, size=(K, 3))
    rgb = rng.uniform(size=(K, 3, S, S, S))
    alpha = rng.uniform(0.0, 4.0, size=(K, S, S, S))
    return PrimitiveSet(pos, rot, scale, rgb, alpha, np.arange(K))


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--primitives", type=int, default=256)
    ap.add_argument("--voxels", type=int, default=8)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--step", type=float, default=0.01)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    prims = scene(args.primitives, args.voxels, rng)
    cam = Camera.look_at((0.0, 0.5, 3.5), (0, 0, 0), (0, 1, 0), 40.0, args.size, args.size)
    cfg = RenderConfig(step_size=args.step)
    g = rng.normal(size=(args.size, args.size, 3))

    results = {}
    for name in available_backends():
        with use_backend(name):
            fwd = best_of(lambda: render(prims, cam, cfg), args.repeats)
            bwd = best_of(lambda: render_backward(prims, cam, cfg, g), args.repeats)
            results[name] = (fwd, bwd, render(prims, cam, cfg).rgb)
        print(f"{name:>8}  forward {fwd * 1e3:9.1f} ms  backward {bwd * 1e3:9.1f} ms")
    if len(results) == 2:
        (cf, cb, ci), (pf, pb, pi) = results["compiled"], results["python"]
        print(f"speedup  forward {pf / cf:6.1f}x  backward {pb / cb:6.1f}x  max |image diff| {np.abs(ci - pi).max():.1e}")


if __name__ == "__main__":
    main()
