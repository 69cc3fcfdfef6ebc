import importlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgdea import _kernels
from lgdea._kernels import _pykernels

try:
    from lgdea._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def brute_topk(sim, k):
    out = []
    for i in range(sim.shape[0]):
        cand = sorted((j for j in range(sim.shape[1]) if j != i), key=lambda j: (-sim[i, j], j))
        out.append(cand[:k])
    return np.array(out)


def test_knn_topk_excludes_self_and_breaks_ties_low():
    sim = np.array([[1.0, 0.5, 0.5, 0.1],
                    [0.5, 1.0, 0.2, 0.2],
                    [0.5, 0.2, 1.0, 0.9],
                    [0.1, 0.2, 0.9, 1.0]])
    idx = _kernels.knn_topk(sim, 2)
    assert idx.tolist() == [[1, 2], [0, 2], [3, 0], [2, 1]]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_knn_topk_matches_sorting_oracle(n, seed):
    rng = np.random.default_rng(seed)
    # coarse values force plenty of ties
    sim = rng.integers(-3, 4, size=(n, n)) / 3.0
    k = int(rng.integers(1, n))
    for impl in filter(None, (_pykernels, _ckernels)):
        assert np.array_equal(impl.knn_topk(sim, k), brute_topk(sim, k))


def test_scatter_add_rows_repeated_index():
    out = np.zeros((3, 2))
    _kernels.scatter_add_rows(out, np.array([2, 0, 2]), np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    assert out.tolist() == [[3.0, 4.0], [0.0, 0.0], [6.0, 8.0]]


def test_precision_hits_counts_intersections():
    sim = np.array([[0.9, 0.1, 0.5], [0.2, 0.8, 0.8]])
    img = np.array([0b01, 0b10])
    rep = np.array([0b01, 0b11, 0b100])
    assert _kernels.precision_hits(sim, img, rep, 2).tolist() == [1, 1]


@needs_ext
@settings(max_examples=60, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_compiled_matches_fallback(n, m, seed):
    rng = np.random.default_rng(seed)
    sim = np.round(rng.normal(size=(n, m)), 1)
    img = rng.integers(1, 16, size=n)
    rep = rng.integers(1, 16, size=m)
    k = int(rng.integers(1, m + 1))
    assert np.array_equal(_ckernels.precision_hits(sim, img, rep, k),
                          _pykernels.precision_hits(sim, img, rep, k))
    rows = rng.normal(size=(m, 3))
    index = rng.integers(0, n, size=m)
    a, b = np.zeros((n, 3)), np.zeros((n, 3))
    _ckernels.scatter_add_rows(a, index, rows)
    _pykernels.scatter_add_rows(b, index, rows)
    assert np.array_equal(a, b)


def test_pure_python_switch():
    code = "from lgdea import _kernels; print(_kernels.BACKEND)"
    env = dict(os.environ, LGDEA_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "python"
    assert importlib.import_module("lgdea._kernels").BACKEND in ("python", "cython")
