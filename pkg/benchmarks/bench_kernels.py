"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Both implementations are imported directly, so this works without setting
LGDEA_PURE_PYTHON.  Outputs are checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from lgdea._kernels import _pykernels

try:
    from lgdea._kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    sim = rng.normal(size=(256, 256))
    np.fill_diagonal(sim, 1.0)
    masks = rng.integers(1, 256, size=256)
    out = np.zeros((500, 32))
    index = rng.integers(0, 500, size=4000)
    rows = rng.normal(size=(4000, 32))
    return {
        "knn_topk 256x256 k=5": lambda m: m.knn_topk(sim, 5),
        "precision_hits 256x256 k=10": lambda m: m.precision_hits(sim, masks, masks, 10),
        "scatter_add_rows 4000->500": lambda m: m.scatter_add_rows(out.copy(), index, rows),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; run `pip install -e . --no-build-isolation` first")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        assert np.array_equal(fn(_pykernels), fn(_ckernels)), name
        t_py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat)) * 1e3
        t_c = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:32s} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
