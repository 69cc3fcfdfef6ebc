"""Shared diagnostic evidence space.

A bank of K learnable prototypes; report phrases and projected lesion rows are
both expressed as softmax assignments over it.  The losses here tie the two
modalities together inside that space:

* reconstruction of phrase embeddings from their prototype mixture
* KL from the (detached) report distribution to the paired image distribution
* similarity-weighted KL between each lesion and its visual nearest neighbours
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import numerics as nm
from .errors import ConfigError, DimensionError, InputError

log = logging.getLogger(__name__)


@dataclass
class PrototypeBank:
    mu: nm.DiffNode  # K x d
    tau_t: float = 0.1
    tau_p: float = 0.1

    @classmethod
    def create(cls, n_prototypes, dim, rng, init_scale=0.05, tau_t=0.1, tau_p=0.1):
        if n_prototypes < 1:
            raise ConfigError("need at least one prototype")
        mu = rng.uniform(-init_scale, init_scale, size=(n_prototypes, dim))
        return cls(nm.parameter(mu, "prototypes.mu"), tau_t, tau_p)

    @property
    def size(self):
        return self.mu.shape[0]

    def parameters(self):
        return {"prototypes.mu": self.mu}

    def renormalize(self):
        """Project prototype rows back to the unit sphere (in place)."""
        v = self.mu.value
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)


def _logits(x, bank):
    if x.shape[1] != bank.mu.shape[1]:
        raise DimensionError(f"embedding dim {x.shape[1]} != prototype dim {bank.mu.shape[1]}")
    return nm.matmul(x, nm.transpose(bank.mu))


def soft_assign(z, bank: PrototypeBank):
    """p(k | z) for each row of z, temperature tau_t."""
    z = z if isinstance(z, nm.DiffNode) else nm.constant(z)
    if np.any(np.linalg.norm(z.value, axis=1) == 0):
        raise InputError("soft_assign: zero-norm evidence embedding")
    return nm.row_softmax(_logits(z, bank), bank.tau_t)


def loss_rec(z, bank: PrototypeBank, lambda_reg: float = 1e-2):
    """sum_n |z_n - sum_k p(k|z_n) mu_k|^2 + lambda_reg * sum_k |mu_k|^2."""
    reg = nm.scale(nm.sum_all(nm.square(bank.mu)), lambda_reg)
    if z is None or z.shape[0] == 0:
        log.debug("loss_rec: no evidence in batch, regulariser only")
        return reg
    recon = nm.matmul(soft_assign(z, bank), bank.mu)
    return nm.add(nm.sum_all(nm.square(nm.sub(z, recon))), reg)


def lesion_distributions(v_phi, bank: PrototypeBank):
    """Q_I: one prototype distribution per projected lesion row, temperature tau_p."""
    return nm.row_softmax(_logits(v_phi, bank), bank.tau_p)


def aggregate_image_distribution(q_lesion, n_lesions=None):
    """Mean of lesion rows; with ``n_lesions`` the rows are split per image."""
    n_lesions = n_lesions or q_lesion.shape[0]
    n_images = q_lesion.shape[0] // n_lesions
    return nm.segment_mean(q_lesion, [n_lesions] * n_images)


def report_distribution(z, bank: PrototypeBank, lengths=None):
    """Mean phrase assignment per report (``lengths`` = phrases per report)."""
    if z.shape[0] == 0:
        raise InputError("report has no evidence phrases")
    lengths = [z.shape[0]] if lengths is None else lengths
    return nm.segment_mean(soft_assign(z, bank), lengths)


def loss_paired_evidence(q_report, q_image, cache: nm.DetachCache | None = None):
    """Mean over pairs of KL(Q_R || Q_I) with the report side as fixed teacher."""
    teacher = cache.detach("teacher", q_report) if cache else nm.stopgrad(q_report)
    if teacher.shape != q_image.shape:
        raise DimensionError(f"teacher {teacher.shape} vs student {q_image.shape}")
    return nm.scale(nm.kl_divergence(teacher, q_image), 1.0 / q_image.shape[0])


def knn_neighbors(v, k: int, cache: nm.DetachCache | None = None):
    """k most cosine-similar other lesions per lesion, with softmax weights.

    Returns (index: N x k, weights: N x k).  Ties go to the lower index.
    """
    v = v.value if isinstance(v, nm.DiffNode) else nm.as_matrix(v)
    n = v.shape[0]
    if k >= n:
        raise ConfigError(f"k={k} must be smaller than the number of lesions {n}")
    if k < 1:
        raise ConfigError("k must be positive")
    if cache is not None and cache.replay:
        return cache.value("knn", None)
    sim = nm.cosine_rows(v, v)
    idx = _kernels.knn_topk(sim, k)
    w = nm.softmax(np.take_along_axis(sim, idx, axis=1))
    if cache is not None:
        cache.value("knn", (idx, w))
    return idx, w


def effective_k(k: int, n_lesions: int) -> int:
    if n_lesions <= k:
        shrunk = max(n_lesions - 1, 1)
        warnings.warn(f"only {n_lesions} lesions in batch, shrinking k from {k} to {shrunk}",
                      stacklevel=2)
        return shrunk
    return k


def loss_unpaired_evidence(q, index, weights, cache: nm.DetachCache | None = None,
                           eps: float = nm.KL_EPS):
    """(1/N) sum_i sum_j w_ij KL(Q_i || stopgrad(Q_j)) over the kNN structure.

    KL(Q_i||Q_j) = sum_k Q_ik log Q_ik - sum_k Q_ik log Q_jk, so the
    neighbour terms collapse to one dense product with a weight matrix.
    """
    n = q.shape[0]
    target = cache.detach("knn_targets", q) if cache else nm.stopgrad(q)
    w = np.zeros((n, n))
    np.put_along_axis(w, index, weights, axis=1)
    cross = w @ np.log(target.value + eps)
    row_w = np.broadcast_to(w.sum(axis=1, keepdims=True), q.shape)
    self_term = nm.sum_all(nm.mul(nm.mul(q, nm.log(q, eps)), nm.constant(row_w)))
    cross_term = nm.sum_all(nm.mul(q, nm.constant(cross)))
    return nm.scale(nm.sub(self_term, cross_term), 1.0 / n)
