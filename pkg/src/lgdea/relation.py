"""Cross-modal relation inference and the contrastive objectives.

Sparse known pairings ``Y`` are spread over image-image and report-report
similarity graphs, ``P <- S_I P S_T + Y``, giving soft image/report relations
that weight a contrastive loss between the evidence aggregates.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nm
from .errors import DimensionError


def aggregate(rows, lengths=None):
    """Normalised mean of row segments (one output row per segment)."""
    lengths = [rows.shape[0]] if lengths is None else lengths
    return nm.l2_normalize_rows(nm.segment_mean(rows, lengths))


def aggregate_report(z, lengths=None):
    """H_R from the phrase embeddings of each report."""
    return aggregate(z, lengths)


def aggregate_image(v_phi, n_lesions=None):
    """H_I from the projected lesion rows of each image."""
    n_lesions = n_lesions or v_phi.shape[0]
    return aggregate(v_phi, [n_lesions] * (v_phi.shape[0] // n_lesions))


def evidence_graph(h, tau_g: float = 0.1):
    """Row-stochastic propagation matrix over ``h`` rows, self-loops excluded.

    Returns None for fewer than two rows.
    """
    h = h.value if isinstance(h, nm.DiffNode) else nm.as_matrix(h)
    n = h.shape[0]
    if n < 2:
        return None
    a = nm.cosine_rows(h, h) / tau_g
    a[np.diag_indices(n)] = -np.inf
    a -= a.max(axis=1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=1, keepdims=True)


def build_graphs(h_images, h_reports, tau_g: float = 0.1):
    """(S_I, S_T); either is None when its side has fewer than two rows."""
    return evidence_graph(h_images, tau_g), evidence_graph(h_reports, tau_g)


def row_normalize(p):
    p = np.array(p, dtype=np.float64)
    s = p.sum(axis=1, keepdims=True)
    nz = s[:, 0] > 0
    p[nz] /= s[nz]
    return p


def propagate(y, s_i, s_t, steps: int = 2, normalize: bool = True):
    """Iterate P <- S_I P S_T + Y from P = Y, then (optionally) row-normalise.

    All-zero rows stay zero.  If either graph is missing, propagation is
    skipped and only Y is normalised.
    """
    y = nm.as_matrix(y)
    if steps < 0:
        raise ValueError("steps must be non-negative")
    p = y.copy()
    if s_i is not None and s_t is not None:
        if s_i.shape != (y.shape[0], y.shape[0]) or s_t.shape != (y.shape[1], y.shape[1]):
            raise DimensionError(f"propagate: Y {y.shape}, S_I {s_i.shape}, S_T {s_t.shape}")
        for _ in range(steps):
            p = s_i @ p @ s_t + y
    return row_normalize(p) if normalize else p


def seed_relations(n_images, n_reports, n_paired):
    """Y with the paired prefix on the diagonal."""
    y = np.zeros((n_images, n_reports))
    y[np.arange(n_paired), np.arange(n_paired)] = 1.0
    return y


def infer_relations(h_images, h_reports, n_paired, tau_g=0.1, steps=2):
    """Y, S_I, S_T and the normalised P for one batch."""
    y = seed_relations(h_images.shape[0], h_reports.shape[0], n_paired)
    s_i, s_t = build_graphs(h_images, h_reports, tau_g)
    return y, s_i, s_t, propagate(y, s_i, s_t, steps)


def _soft_ce(logits, target, tau):
    """-(1/n) sum_ij target_ij log softmax_j(logits_i / tau)."""
    logp = nm.row_log_softmax(logits, tau)
    return nm.scale(nm.sum_all(nm.mul(logp, nm.constant(target))), -1.0 / logits.shape[0])


def loss_evidence_align(h_images, h_reports, p, tau2: float = 0.07):
    """Soft-target contrastive loss in both directions; P is fixed supervision.

    Image->report uses rows of P, report->image uses rows of P^T.  Rows
    without mass contribute nothing.
    """
    p = nm.as_matrix(p)
    if p.shape != (h_images.shape[0], h_reports.shape[0]):
        raise DimensionError(f"P {p.shape} vs {h_images.shape[0]} images, {h_reports.shape[0]} reports")
    sim = nm.matmul(h_images, nm.transpose(h_reports))
    i2r = _soft_ce(sim, p, tau2)
    r2i = _soft_ce(nm.transpose(sim), p.T, tau2)
    return nm.add(i2r, r2i)


def loss_global(img_global, rep_global, tau1: float = 0.07):
    """Symmetric InfoNCE over normalised global embeddings, i-th matches i-th."""
    if img_global.shape[0] != rep_global.shape[0]:
        raise DimensionError("loss_global needs matched image/report batches")
    a = nm.l2_normalize_rows(img_global)
    b = nm.l2_normalize_rows(rep_global)
    eye = nm.constant(np.eye(a.shape[0]))
    n = a.shape[0]
    sim = nm.matmul(a, nm.transpose(b))
    r_from_i = nm.sum_all(nm.mul(nm.row_log_softmax(sim, tau1), eye))
    i_from_r = nm.sum_all(nm.mul(nm.row_log_softmax(nm.transpose(sim), tau1), eye))
    return nm.scale(nm.add(r_from_i, i_from_r), -1.0 / n)
