"""Toy trainable encoders with the global/local output interface.

* text:  token table lookup -> linear map gives token rows R^l, their mean R^g
* image: linear patch projection + one residual self-attention block gives
  patch rows I^l; a linear head on their mean gives I^g
* lesion queries attend over I^l (learned key projection, raw patch values)
* the evidence projection maps lesion rows into the prototype space

All encoders work on whole batches: sequences and images are stacked row-wise
and split again with segment means or block attention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError, InputError


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_pix: int = 16
    n_patches: int = 49
    d: int = 32
    d_v: int = 32
    n_lesions: int = 8
    init_scale: float = 0.05


def init_uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


class TextEncoder:
    def __init__(self, embedding: nm.DiffNode, projection: nm.DiffNode):
        self.embedding = embedding
        self.projection = projection

    @classmethod
    def create(cls, cfg: EncoderConfig, rng):
        return cls(nm.parameter(init_uniform(rng, (cfg.vocab_size, cfg.d), cfg.init_scale), "text.embedding"),
                   nm.parameter(init_uniform(rng, (cfg.d, cfg.d), cfg.init_scale), "text.projection"))

    def parameters(self):
        return {"text.embedding": self.embedding, "text.projection": self.projection}

    def _check(self, tokens):
        if len(tokens) == 0:
            raise InputError("cannot encode an empty token sequence")
        vocab = self.embedding.shape[0]
        for t in tokens:
            if not 0 <= t < vocab:
                raise InputError(f"token id {t} outside vocabulary of size {vocab}")

    def encode_batch(self, sequences):
        """Global rows (n x d) and the stacked token rows of all sequences."""
        for s in sequences:
            self._check(s)
        flat = np.fromiter((t for s in sequences for t in s), dtype=np.int64)
        local = nm.matmul(nm.gather_rows(self.embedding, flat), self.projection)
        return nm.segment_mean(local, [len(s) for s in sequences]), local

    def encode(self, tokens):
        """(R^g: 1 x d, R^l: T x d) for one sequence."""
        return self.encode_batch([list(tokens)])


def encode_text(text: TextEncoder, tokens):
    return text.encode(tokens)


def encode_evidence(text: TextEncoder, phrases) -> nm.DiffNode:
    """Unit-norm evidence embeddings, one row per phrase."""
    seqs = [p.tokens if hasattr(p, "tokens") else p for p in phrases]
    g, _ = text.encode_batch(seqs)
    return nm.l2_normalize_rows(g)


class ImageEncoder:
    def __init__(self, patch_proj, patch_bias, w_q, w_k, w_v, head, n_patches):
        self.patch_proj = patch_proj
        self.patch_bias = patch_bias
        self.w_q, self.w_k, self.w_v = w_q, w_k, w_v
        self.head = head
        self.n_patches = n_patches

    @classmethod
    def create(cls, cfg: EncoderConfig, rng):
        s = cfg.init_scale
        p = lambda shape, name: nm.parameter(init_uniform(rng, shape, s), name)  # noqa: E731
        return cls(p((cfg.d_pix, cfg.d_v), "image.patch_proj"),
                   nm.parameter(np.zeros((1, cfg.d_v)), "image.patch_bias"),
                   p((cfg.d_v, cfg.d_v), "image.mix_q"),
                   p((cfg.d_v, cfg.d_v), "image.mix_k"),
                   p((cfg.d_v, cfg.d_v), "image.mix_v"),
                   p((cfg.d_v, cfg.d), "image.head"),
                   cfg.n_patches)

    def parameters(self):
        return {"image.patch_proj": self.patch_proj, "image.patch_bias": self.patch_bias,
                "image.mix_q": self.w_q, "image.mix_k": self.w_k, "image.mix_v": self.w_v,
                "image.head": self.head}

    def local_batch(self, patch_list):
        """Stacked I^l for n images: (n*P) x d_v."""
        for x in patch_list:
            if x.shape[0] != self.n_patches:
                raise InputError(f"expected {self.n_patches} patches, got {x.shape[0]}")
            if x.shape[1] != self.patch_proj.shape[0]:
                raise DimensionError(f"patch width {x.shape[1]} != {self.patch_proj.shape[0]}")
        n = len(patch_list)
        x = nm.add_row(nm.matmul(nm.constant(np.concatenate(patch_list, axis=0)), self.patch_proj),
                       self.patch_bias)
        tau = math.sqrt(self.w_q.shape[1])
        mixed = nm.block_attention(nm.matmul(x, self.w_q), nm.matmul(x, self.w_k),
                                   nm.matmul(x, self.w_v), n, tau)
        return nm.add(x, mixed)

    def global_from_local(self, local, n):
        return nm.matmul(nm.segment_mean(local, [self.n_patches] * n), self.head)

    def encode_batch(self, patch_list):
        local = self.local_batch(patch_list)
        return self.global_from_local(local, len(patch_list)), local

    def encode(self, patches):
        """(I^g: 1 x d, I^l: P x d_v) for one image."""
        return self.encode_batch([nm.as_matrix(patches)])


def encode_image(image: ImageEncoder, patches):
    return image.encode(patches)


class LesionQueries:
    def __init__(self, queries, key_proj):
        self.queries = queries
        self.key_proj = key_proj

    @classmethod
    def create(cls, cfg: EncoderConfig, rng):
        return cls(nm.parameter(init_uniform(rng, (cfg.n_lesions, cfg.d_v), cfg.init_scale), "lesion.queries"),
                   nm.parameter(init_uniform(rng, (cfg.d_v, cfg.d_v), cfg.init_scale), "lesion.key_proj"))

    def parameters(self):
        return {"lesion.queries": self.queries, "lesion.key_proj": self.key_proj}

    @property
    def n_lesions(self):
        return self.queries.shape[0]

    def attend(self, local, n_images):
        """Lesion rows (n_images*L) x d_v; weights in ``out.info['weights']``."""
        if local.shape[1] != self.queries.shape[1]:
            raise DimensionError(f"patch dim {local.shape[1]} != query dim {self.queries.shape[1]}")
        q = nm.tile_rows(self.queries, n_images)
        keys = nm.matmul(local, self.key_proj)
        return nm.block_attention(q, keys, local, n_images, math.sqrt(self.queries.shape[1]))


def lesion_attend(queries: LesionQueries, local):
    """Single-image form: V (L x d_v) for I^l (P x d_v)."""
    return queries.attend(local, 1)


class EvidenceProjection:
    def __init__(self, phi):
        self.phi = phi

    @classmethod
    def create(cls, cfg: EncoderConfig, rng):
        return cls(nm.parameter(init_uniform(rng, (cfg.d_v, cfg.d), cfg.init_scale), "evidence.phi"))

    def parameters(self):
        return {"evidence.phi": self.phi}

    def __call__(self, v):
        """Unit-norm projected rows; zero rows stay zero (``info['degenerate']``)."""
        if v.shape[1] != self.phi.shape[0]:
            raise DimensionError(f"lesion dim {v.shape[1]} != {self.phi.shape[0]}")
        return nm.l2_normalize_rows(nm.matmul(v, self.phi))


def project_evidence(projection: EvidenceProjection, v):
    return projection(v)
