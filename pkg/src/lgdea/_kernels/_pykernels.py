"""Numpy implementations of the hot kernels.

Used whenever the compiled module is missing or ``LGDEA_PURE_PYTHON`` is set.
Signatures and outputs match ``_ckernels`` exactly.
"""
import numpy as np


def scatter_add_rows(out, index, rows):
    """out[index[i]] += rows[i], in place, in index order."""
    np.add.at(out, index, rows)
    return out


def knn_topk(sim, k):
    """Indices of the k largest entries per row, self excluded.

    Ordering is by descending similarity, ties broken by lower column index.
    """
    n = sim.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    cols = np.arange(n)
    for i in range(n):
        row = sim[i].copy()
        row[i] = -np.inf
        # lexsort: last key is primary
        order = np.lexsort((cols, -row))
        out[i] = order[:k]
    return out


def precision_hits(sim, image_masks, report_masks, k):
    """Per query row, how many of the top-k columns share a class bit.

    Ranking is descending similarity with ties broken by lower column index.
    Class sets are given as integer bitmasks.
    """
    n, m = sim.shape
    cols = np.arange(m)
    hits = np.zeros(n, dtype=np.int64)
    for i in range(n):
        order = np.lexsort((cols, -sim[i]))[:k]
        hits[i] = int(np.count_nonzero(report_masks[order] & image_masks[i]))
    return hits
