"""Hot kernels: compiled core with a numpy fallback chosen at import.

Set ``LGDEA_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("LGDEA_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def scatter_add_rows(out, index, rows):
    out = np.ascontiguousarray(out, dtype=np.float64)
    index = np.ascontiguousarray(index, dtype=np.int64)
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    return _impl.scatter_add_rows(out, index, rows)


def knn_topk(sim, k):
    return _impl.knn_topk(np.ascontiguousarray(sim, dtype=np.float64), int(k))


def precision_hits(sim, image_masks, report_masks, k):
    return _impl.precision_hits(
        np.ascontiguousarray(sim, dtype=np.float64),
        np.ascontiguousarray(image_masks, dtype=np.int64),
        np.ascontiguousarray(report_masks, dtype=np.int64),
        int(k),
    )
