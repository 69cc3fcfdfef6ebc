"""All trainable blocks plus the batched forward pass for both training modes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .encoders import (EncoderConfig, EvidenceProjection, ImageEncoder, LesionQueries,
                       TextEncoder, encode_evidence)
from .evidence import (PrototypeBank, aggregate_image_distribution, effective_k,
                       knn_neighbors, lesion_distributions, loss_paired_evidence, loss_rec,
                       loss_unpaired_evidence, report_distribution)
from .relation import aggregate, infer_relations, loss_evidence_align, loss_global

LOSS_TERMS = ("rec", "paired", "unpaired", "align", "global")


class Model:
    def __init__(self, enc_cfg: EncoderConfig, n_prototypes: int, seed: int = 0,
                 tau_t: float = 0.1, tau_p: float = 0.1):
        rng = np.random.default_rng([seed, 3])
        self.cfg = enc_cfg
        self.text = TextEncoder.create(enc_cfg, rng)
        self.image = ImageEncoder.create(enc_cfg, rng)
        self.lesions = LesionQueries.create(enc_cfg, rng)
        self.projection = EvidenceProjection.create(enc_cfg, rng)
        self.bank = PrototypeBank.create(n_prototypes, enc_cfg.d, rng, enc_cfg.init_scale,
                                         tau_t, tau_p)

    def parameters(self) -> dict:
        out = {}
        for part in (self.text, self.image, self.lesions, self.projection, self.bank):
            out.update(part.parameters())
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    # ------------------------------------------------------------ encoding

    def text_units(self, reports, evidence):
        """Token sequences for the text side of a batch.

        Reports with evidence contribute one unit per phrase; reports without
        fall back to their full token sequence (used for H_R only).
        """
        units, lengths, phrase_rows, has_evidence = [], [], [], []
        for r in reports:
            phrases = evidence.get(r.id, [])
            if phrases:
                phrase_rows.extend(range(len(units), len(units) + len(phrases)))
                units.extend(p.tokens for p in phrases)
                lengths.append(len(phrases))
                has_evidence.append(True)
            else:
                units.append(tuple(r.tokens))
                lengths.append(1)
                has_evidence.append(False)
        return units, lengths, np.array(phrase_rows, dtype=np.int64), has_evidence

    def image_evidence(self, images):
        """Patch rows, lesion rows, projected lesion rows and H_I for a batch."""
        n = len(images)
        local = self.image.local_batch([im.patches for im in images])
        v = self.lesions.attend(local, n)
        v_phi = self.projection(v)
        return local, v, v_phi, aggregate(v_phi, [self.lesions.n_lesions] * n)

    def report_evidence(self, reports, evidence):
        units, lengths, _, _ = self.text_units(reports, evidence)
        z = encode_evidence(self.text, units)
        return aggregate(z, lengths)

    # ------------------------------------------------------------ losses

    def lgdea_losses(self, batch, evidence, cfg, cache=None):
        """Per-term loss nodes for one mixed batch, plus relation diagnostics."""
        L = self.lesions.n_lesions
        units, lengths, phrase_rows, has_ev = self.text_units(batch.reports, evidence)
        z_units = encode_evidence(self.text, units)
        h_rep = aggregate(z_units, lengths)
        z_phr = nm.gather_rows(z_units, phrase_rows) if phrase_rows.size else None
        terms = {"rec": loss_rec(z_phr, self.bank, cfg.lambda_reg)}

        _, v, v_phi, h_img = self.image_evidence(batch.images)
        q = lesion_distributions(v_phi, self.bank)
        q_img = aggregate_image_distribution(q, L)

        # paired distillation over pairs whose report yielded evidence
        starts = np.concatenate([[0], np.cumsum(lengths)])
        pairs = [i for i in range(batch.n_paired) if has_ev[i]]
        if pairs:
            rows = np.concatenate([np.arange(starts[i], starts[i + 1]) for i in pairs])
            teacher = report_distribution(nm.gather_rows(z_units, rows), self.bank,
                                          [lengths[i] for i in pairs])
            student = nm.gather_rows(q_img, np.array(pairs))
            terms["paired"] = loss_paired_evidence(teacher, student, cache)
        else:
            terms["paired"] = nm.constant(0.0)

        k = effective_k(cfg.k_nn, q.shape[0])
        idx, w = knn_neighbors(v, k, cache)
        terms["unpaired"] = loss_unpaired_evidence(q, idx, w, cache)

        def relations():
            return infer_relations(h_img.value, h_rep.value, batch.n_paired,
                                   cfg.tau_g, cfg.propagation_steps)

        if cache is not None and cache.replay:
            y, s_i, s_t, p = cache.value("relations", None)
        else:
            y, s_i, s_t, p = relations()
            if cache is not None:
                cache.value("relations", (y, s_i, s_t, p))
        if p.any():
            terms["align"] = loss_evidence_align(h_img, h_rep, p, cfg.tau2)
        else:
            terms["align"] = nm.constant(0.0)
        terms["global"] = nm.constant(0.0)
        return terms, RelationInfo(y, s_i, s_t, p)

    def global_losses(self, batch, cfg):
        img_g, _ = self.image.encode_batch([im.patches for im in batch.images])
        rep_g, _ = self.text.encode_batch([r.tokens for r in batch.reports])
        terms = {t: nm.constant(0.0) for t in LOSS_TERMS}
        terms["global"] = loss_global(img_g, rep_g, cfg.tau1)
        return terms, None


@dataclass
class RelationInfo:
    y: np.ndarray
    s_i: np.ndarray | None
    s_t: np.ndarray | None
    p: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def zero_rows(self) -> int:
        return int((self.p.sum(axis=1) == 0).sum())
