"""Compiled vs pure-Python kernel timings.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both backends are checked for identical outputs before timing.
"""
import argparse
import time

import numpy as np

from omniseg import _kernels
from omniseg.scenedata import SceneConfig, generate_scene, simulate_depth_holes


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    for m in (200, 1000, 4000):
        pts = rng.uniform(0, 2, size=(m, 3))
        yield f"knn_hash M={m} k=8", "knn_hash", (pts, 8)
    scene = simulate_depth_holes(generate_scene(0, SceneConfig(width=128, height=128)), 0.5, 0)
    yield "fill_holes 128x128", "fill_holes", (scene.frames[0].depth,)
    depth = scene.frames[0].depth.copy()
    depth[32:96, 32:96] = 0
    yield "fill_holes 128x128 big hole", "fill_holes", (depth,)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels.compiled is None:
        print("compiled kernels unavailable (extension not built or OMNISEG_PURE_PYTHON set); timing python only")
    print(f"{'case':<30} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for label, name, inputs in cases():
        py = getattr(_kernels.python, name)
        t_py = best_of(lambda: py(*inputs), args.repeat)
        if _kernels.compiled is None:
            print(f"{label:<30} {1e3 * t_py:>10.2f} {'-':>10} {'-':>8}")
            continue
        cy = getattr(_kernels.compiled, name)
        if not np.array_equal(py(*inputs), cy(*inputs)):
            raise SystemExit(f"{label}: backends disagree")
        t_cy = best_of(lambda: cy(*inputs), args.repeat)
        print(f"{label:<30} {1e3 * t_py:>10.2f} {1e3 * t_cy:>10.2f} {t_py / t_cy:>7.1f}x")


if __name__ == "__main__":
    main()
