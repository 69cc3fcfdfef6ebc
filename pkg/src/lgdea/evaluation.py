"""Downstream metrics: retrieval Precision@K, zero-shot accuracy, grounding CNR."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from . import numerics as nm
from .encoders import encode_evidence
from .errors import InputError
from .extraction import make_extractor

PREC_KS = (1, 2, 5, 10)
CNR_EPS = 1e-8


def class_masks(classes) -> np.ndarray:
    """Integer bitmask per sample from an int label or an iterable of labels."""
    out = []
    for c in classes:
        labels = [c] if np.isscalar(c) else list(c)
        m = 0
        for lab in labels:
            m |= 1 << int(lab)
        out.append(m)
    return np.array(out, dtype=np.int64)


def retrieval_precision(image_emb, report_emb, image_classes, report_classes, k: int) -> float:
    """Mean over images of the share of top-k reports that share a class.

    Reports are ranked by cosine similarity, ties to the lower index.
    """
    image_emb, report_emb = nm.as_matrix(image_emb), nm.as_matrix(report_emb)
    m = report_emb.shape[0]
    if not 1 <= k <= m:
        raise InputError(f"K={k} must lie in [1, {m}]")
    sim = nm.cosine_rows(image_emb, report_emb)
    hits = _kernels.precision_hits(sim, class_masks(image_classes), class_masks(report_classes), k)
    return float(hits.sum() / (k * image_emb.shape[0]))


def zero_shot_classify(image_emb, prompts) -> int:
    """Index of the most cosine-similar class prompt (lowest index on ties)."""
    prompts = nm.as_matrix(prompts)
    if prompts.shape[0] < 2:
        raise InputError("zero-shot classification needs at least two classes")
    return int(np.argmax(nm.cosine_rows(image_emb, prompts)[0]))


def cnr(activation, mask) -> float:
    """(mean_in - mean_out) / sqrt(var_in + var_out + eps), population variances."""
    a = np.asarray(activation, dtype=np.float64).reshape(-1)
    inside = np.zeros(a.size, dtype=bool)
    inside[list(mask)] = True
    if not inside.any() or inside.all():
        raise InputError("CNR mask must be a non-empty proper subset of patches")
    a_in, a_out = a[inside], a[~inside]
    return float((a_in.mean() - a_out.mean()) / np.sqrt(a_in.var() + a_out.var() + CNR_EPS))


def minmax(values):
    """Scale to [0, 1]; returns (scaled, degenerate) with constant maps flagged."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(v), True
    return (v - lo) / (hi - lo), False


def grounding_map(model, image, phrase_tokens, mode="lgdea"):
    """Per-patch activation of a phrase on an image, min-max normalised.

    In lgdea mode the patch rows are passed through the evidence projection
    and compared with the phrase's evidence embedding; the global baseline
    uses its global image head instead.  Returns (map, degenerate).
    """
    local = model.image.local_batch([image.patches])
    z = encode_evidence(model.text, [tuple(phrase_tokens)]).value
    if mode == "lgdea":
        patches = nm.matmul(local, model.projection.phi).value
    else:
        patches = nm.matmul(local, model.image.head).value
    return minmax(nm.cosine_rows(patches, z)[:, 0])


@dataclass
class EvalReport:
    precision_at_k: dict
    zero_shot_accuracy: float
    cnr_per_concept: dict
    config_fingerprint: str
    seed: int
    mode: str = "lgdea"
    extra: dict = field(default_factory=dict)

    @property
    def mean_cnr(self) -> float:
        return float(np.mean(list(self.cnr_per_concept.values()))) if self.cnr_per_concept else 0.0

    def to_dict(self):
        return {"precision_at_k": {str(k): v for k, v in self.precision_at_k.items()},
                "zero_shot_accuracy": self.zero_shot_accuracy,
                "cnr_per_concept": {str(k): v for k, v in self.cnr_per_concept.items()},
                "mean_cnr": self.mean_cnr,
                "config_fingerprint": self.config_fingerprint,
                "seed": self.seed, "mode": self.mode, "extra": self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls({int(k): v for k, v in d["precision_at_k"].items()},
                   d["zero_shot_accuracy"],
                   {int(k): v for k, v in d["cnr_per_concept"].items()},
                   d["config_fingerprint"], d["seed"], d.get("mode", "lgdea"), d.get("extra", {}))

    def summary(self) -> str:
        prec = "  ".join(f"P@{k}={v:.3f}" for k, v in sorted(self.precision_at_k.items()))
        return (f"[{self.mode}] {prec}  zero-shot={self.zero_shot_accuracy:.3f}  "
                f"mean CNR={self.mean_cnr:.3f}")


def config_fingerprint(cfg) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def embed(model, images, reports, evidence, mode):
    """Image and report embeddings used for retrieval in the given mode."""
    if mode == "lgdea":
        _, _, _, h_img = model.image_evidence(images)
        h_rep = model.report_evidence(reports, evidence)
        return h_img.value, h_rep.value
    img_g, _ = model.image.encode_batch([im.patches for im in images])
    rep_g, _ = model.text.encode_batch([r.tokens for r in reports])
    return nm.l2_normalize_rows(img_g).value, nm.l2_normalize_rows(rep_g).value


def class_prompts(model, world, mode):
    """One prompt per concept: its whole vocabulary as a single phrase."""
    seqs = [tuple(world.concept_tokens(c)) for c in range(world.n_concepts)]
    if mode == "lgdea":
        return encode_evidence(model.text, seqs).value
    g, _ = model.text.encode_batch(seqs)
    return nm.l2_normalize_rows(g).value


def evaluate(state, eval_corpus, extractor="ground_truth", chunk=64) -> EvalReport:
    """Run all three protocols on the paired samples of ``eval_corpus``."""
    model, cfg = state.model, state.config
    mode = cfg.mode
    ext = make_extractor(extractor, eval_corpus.world)
    images = [im for im, _ in eval_corpus.paired]
    reports = [r for _, r in eval_corpus.paired]
    evidence = {r.id: ext(r) for r in reports}

    img_rows, rep_rows = [], []
    for s in range(0, len(images), chunk):
        a, b = embed(model, images[s:s + chunk], reports[s:s + chunk], evidence, mode)
        img_rows.append(a)
        rep_rows.append(b)
    img_emb, rep_emb = np.concatenate(img_rows), np.concatenate(rep_rows)

    img_cls = [im.true_concepts for im in images]
    rep_cls = [r.true_concepts for r in reports]
    prec = {k: retrieval_precision(img_emb, rep_emb, img_cls, rep_cls, k)
            for k in PREC_KS if k <= len(reports)}

    prompts = class_prompts(model, eval_corpus.world, mode)
    correct = sum(zero_shot_classify(img_emb[i:i + 1], prompts) in img_cls[i]
                  for i in range(len(images)))

    per_concept = {}
    degenerate = 0
    gt = make_extractor("ground_truth", eval_corpus.world)
    for im, rep in eval_corpus.paired:
        phrases = {p.concept: p for p in gt(rep)}
        for c, blob in sorted(im.lesion_mask.items()):
            if c not in phrases:
                continue
            amap, flat = grounding_map(model, im, phrases[c].tokens, mode)
            if flat:
                degenerate += 1
                value = 0.0
            else:
                value = cnr(amap, blob)
            per_concept.setdefault(c, []).append(value)
    cnr_means = {c: float(np.mean(v)) for c, v in sorted(per_concept.items())}
    return EvalReport(prec, correct / len(images), cnr_means, config_fingerprint(cfg), cfg.seed,
                      mode, {"n_images": len(images), "degenerate_maps": degenerate,
                             "step": state.step})
