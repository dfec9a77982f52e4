"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 3] [--quick]

Each case runs through the public API with BRAINMARKERS_NUMBA set to 1 and
then 0; outputs are compared before timings are reported. The first numba
call pays JIT compilation (cached on disk afterwards), so it is run once as
a warm-up and excluded.
"""

import argparse
import os
import time

import numpy as np

from brainmarkers import _accel
from brainmarkers.gbt import GBTConfig, gbt_predict, gbt_train
from brainmarkers.radiomics import connected_components
from brainmarkers.texture import local_statistics
from brainmarkers.thickness import ThicknessParams, line_integral_thickness, skeletonize


def _components(n):
    m = np.random.default_rng(0).random((n, n, n)) < 0.3
    return lambda: connected_components(m).component_ids


def _entropy(n):
    img = np.floor(np.random.default_rng(1).random((n, n, 8)) * 256)
    return lambda: local_statistics(img)["local_entropy"]


def _thickness(n):
    m = np.zeros((n, n, n), bool)
    m[:, :, n // 2 - 2:n // 2 + 3] = True
    sk = skeletonize(m)
    return lambda: line_integral_thickness(m, sk, ThicknessParams()).values


def _gbt(n):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(n, 200))
    y = (x[:, 0] + x[:, 1] * x[:, 2] > 0).astype(int)
    cfg = GBTConfig(max_depth=3, n_estimators=20)
    return lambda: gbt_predict(gbt_train(x, y, cfg), x)


CASES = {
    "components (n^3 mask)": (_components, 64, 24),
    "local entropy (n^2 x 8)": (_entropy, 96, 32),
    "thickness (n^3 slab)": (_thickness, 32, 16),
    "gbt split search (n x 200)": (_gbt, 400, 100),
}


def _time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="small problem sizes")
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'case':30s} {'numba s':>10s} {'numpy s':>10s} {'speedup':>8s}  outputs")
    for name, (make, size, quick_size) in CASES.items():
        fn = make(quick_size if args.quick else size)
        os.environ[_accel.ENV_FLAG] = "1"
        fn()  # compile
        t_nb, a = _time(fn, args.repeat)
        os.environ[_accel.ENV_FLAG] = "0"
        t_np, b = _time(fn, args.repeat)
        same = np.allclose(a, b, rtol=0, atol=1e-9, equal_nan=True)
        print(f"{name:30s} {t_nb:10.4f} {t_np:10.4f} {t_np / t_nb:7.1f}x  {'agree' if same else 'DIFFER'}")
    os.environ.pop(_accel.ENV_FLAG, None)


if __name__ == "__main__":
    main()
