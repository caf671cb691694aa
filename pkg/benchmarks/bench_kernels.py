"""Time the numba kernels against their pure-numpy fallbacks.

Each kernel is swapped in through the ``covermap._kernels`` dispatch names and
exercised through the public function that uses it, so the numbers include
the surrounding numpy work a real run pays for.

Usage::

    python benchmarks/bench_kernels.py [--size 1024] [--repeat 3]
"""
import argparse
import time

import numpy as np

from covermap import _kernels as K
from covermap.synthetic import builtin_predictor, generate_scene
from covermap.vector import connected_components, simplify, trace_rings

KERNELS = ("ccl", "walk_rings", "dp_keep", "oracle")


def _use(path):
    for name in KERNELS:
        setattr(K, name, getattr(K, f"{name}_{path}"))


def _best(fn, repeat):
    fn()  # warm-up, also triggers jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(size):
    rng = np.random.default_rng(0)
    mask = rng.random((size, size)) < 0.45
    lab, _ = connected_components(mask, 8)
    t = np.sort(rng.uniform(0, 2 * np.pi, 20_000))
    r = 50 + rng.normal(0, 1, t.size)
    ring = np.column_stack([r * np.cos(t), r * np.sin(t)])
    ring = np.vstack([ring, ring[:1]])
    scene = generate_scene(0, size)
    pred = builtin_predictor("oracle", classes=scene.heat.bands)
    return {
        "ccl": lambda: connected_components(mask, 8),
        "walk_rings": lambda: trace_rings(lab),
        "dp_keep": lambda: simplify(ring, 0.5),
        "oracle": lambda: pred(scene.image),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=1024)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    fns = cases(args.size)
    print(f"{'kernel':<12}{'numba s':>10}{'numpy s':>10}{'speedup':>9}")
    for name, fn in fns.items():
        res = {}
        for path in ("numba", "numpy"):
            _use(path)
            res[path] = _best(fn, args.repeat)
        print(f"{name:<12}{res['numba']:>10.4f}{res['numpy']:>10.4f}{res['numpy'] / res['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
