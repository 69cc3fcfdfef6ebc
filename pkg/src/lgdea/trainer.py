"""Training loop: batch assembly, the four-stage step, AdamW and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .corpus import Corpus
from .encoders import EncoderConfig
from .errors import ConfigError, FormatError, NumericError
from .extraction import make_extractor
from .model import LOSS_TERMS, Model

log = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
CHECKPOINT_SCHEMA_VERSION = 1
MODES = ("lgdea", "global_baseline")
WEIGHT_KEYS = ("rec", "paired", "unpaired", "align")
WARMUP_KEYS = ("rec", "unpaired")


@dataclass
class TrainConfig:
    mode: str = "lgdea"
    batch_size: int = 32
    paired_fraction_per_batch: float = 0.25
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    epochs: int = 20
    max_steps: int | None = None
    # (epochs, learning_rate, batch_size) per phase; empty means one phase
    phases: list = field(default_factory=list)
    seed: int = 0
    loss_weights: dict = field(default_factory=lambda: {k: 1.0 for k in WEIGHT_KEYS})
    # linear ramp from 0 for the clustering-type terms (rec, unpaired)
    warmup_steps: int = 0
    tau_t: float = 0.1
    tau_p: float = 0.1
    tau_g: float = 0.1
    tau1: float = 0.07
    tau2: float = 0.07
    n_prototypes: int = 64
    n_lesions: int = 64
    k_nn: int = 5
    propagation_steps: int = 2
    lambda_reg: float = 1e-2
    renormalize_prototypes: bool = False
    d: int = 32
    d_v: int = 32
    init_scale: float = 0.05
    extractor: str = "ground_truth"
    dump_relations: bool = False

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if not 0 < self.paired_fraction_per_batch <= 1:
            raise ConfigError("paired_fraction_per_batch must lie in (0, 1]")
        for name in ("learning_rate", "tau_t", "tau_p", "tau_g", "tau1", "tau2", "init_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0 or self.lambda_reg < 0:
            raise ConfigError("weight_decay and lambda_reg must be non-negative")
        if min(self.n_prototypes, self.n_lesions, self.k_nn, self.d, self.d_v) < 1:
            raise ConfigError("sizes must be positive")
        if self.propagation_steps < 0 or self.epochs < 0 or self.warmup_steps < 0:
            raise ConfigError("counts must be non-negative")
        if set(self.loss_weights) != set(WEIGHT_KEYS):
            raise ConfigError(f"loss_weights needs exactly the keys {WEIGHT_KEYS}")
        for ph in self.phases:
            if len(ph) != 3 or ph[0] < 0 or ph[1] <= 0 or ph[2] < 2:
                raise ConfigError(f"bad phase {ph}; expected (epochs, lr, batch_size)")
        return self

    def weights_at(self, step):
        """Loss weights in effect at a 0-based optimiser step."""
        w = dict(self.loss_weights)
        if self.warmup_steps and step < self.warmup_steps:
            ramp = step / self.warmup_steps
            for key in WARMUP_KEYS:
                w[key] *= ramp
        return w

    def phase_list(self):
        if self.phases:
            return [tuple(p) for p in self.phases]
        return [(self.epochs, self.learning_rate, self.batch_size)]

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["phases"] = [list(p) for p in self.phases]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known - {"schema_version"}
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        d = {k: v for k, v in d.items() if k in known}
        return cls(**d).validate()


PRESETS = {
    "small": dict(n_prototypes=16, n_lesions=8),
    "paper-shape": dict(n_prototypes=64, n_lesions=64,
                        phases=[[2, 5e-5, 128], [5, 1e-4, 64]]),
    # fixed step budget so both modes see the same number of updates; the
    # reconstruction term is a sum over ~50 phrases per batch while the other
    # terms are means, so it is scaled down to a per-phrase weight
    "reference": dict(n_prototypes=16, n_lesions=8, learning_rate=1e-2, max_steps=2000,
                      epochs=100_000, loss_weights={"rec": 0.02, "paired": 1.0, "unpaired": 1.0, "align": 1.0}),
}


def preset_config(name, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides}).validate()


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if data.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"config schema_version must be {CONFIG_SCHEMA_VERSION}")
    return TrainConfig.from_dict(data)


def save_config(cfg: TrainConfig, path):
    Path(path).write_text(json.dumps({"schema_version": CONFIG_SCHEMA_VERSION, **cfg.to_dict()},
                                     indent=2) + "\n")


# ---------------------------------------------------------------- batches

@dataclass
class Batch:
    images: list
    reports: list
    n_paired: int

    @property
    def ids(self):
        return [im.id for im in self.images] + [r.id for r in self.reports]


def batch_counts(batch_size, paired_fraction, n_unpaired_images, n_unpaired_reports):
    """(paired, unpaired images, unpaired reports) per batch.

    The non-paired remainder is split evenly, the odd one going to images; an
    empty pool hands its share to the other unpaired pool, then to pairs.
    """
    n_p = int(round(paired_fraction * batch_size))
    n_p = max(1, min(n_p, batch_size))
    rem = batch_size - n_p
    n_i = (rem + 1) // 2
    n_r = rem - n_i
    if n_unpaired_images == 0:
        n_r, n_i = n_r + n_i, 0
    if n_unpaired_reports == 0:
        n_i, n_r = n_i + n_r, 0
    if n_unpaired_images == 0 and n_unpaired_reports == 0:
        n_p, n_i, n_r = batch_size, 0, 0
    return n_p, n_i, n_r


def _cycle(rng, n, total):
    """``total`` indices drawn from fresh permutations of range(n)."""
    out = []
    while len(out) < total:
        out.extend(rng.permutation(n).tolist())
    return out[:total]


def make_batches(corpus: Corpus, cfg: TrainConfig, epoch_seed, batch_size=None):
    """Deterministic list of batches for one epoch.

    The largest pool (relative to its per-batch share) sets the epoch length;
    smaller pools are cycled through reshuffled passes.  Global-baseline mode
    uses paired samples only.
    """
    bs = batch_size or cfg.batch_size
    rng = np.random.default_rng(epoch_seed)
    if cfg.mode == "global_baseline":
        n = len(corpus.paired)
        if n < bs:
            raise ConfigError(f"need at least {bs} paired samples, corpus has {n}")
        order = rng.permutation(n).tolist()
        return [Batch([corpus.paired[i][0] for i in order[s:s + bs]],
                      [corpus.paired[i][1] for i in order[s:s + bs]], bs)
                for s in range(0, n - bs + 1, bs)]

    pools = (corpus.paired, corpus.unpaired_images, corpus.unpaired_reports)
    if sum(len(p) for p in pools) < bs:
        raise ConfigError(f"corpus has fewer than batch_size={bs} samples")
    counts = batch_counts(bs, cfg.paired_fraction_per_batch, len(pools[1]), len(pools[2]))
    if not pools[0]:
        raise ConfigError("corpus has no paired samples")
    n_batches = max(len(p) // c for p, c in zip(pools, counts) if c)
    if n_batches == 0:
        raise ConfigError("not enough data for a single batch")
    draws = [_cycle(rng, len(p), c * n_batches) if c else [] for p, c in zip(pools, counts)]
    batches = []
    for b in range(n_batches):
        sl = [d[b * c:(b + 1) * c] for d, c in zip(draws, counts)]
        pairs = [corpus.paired[i] for i in sl[0]]
        images = [im for im, _ in pairs] + [corpus.unpaired_images[i] for i in sl[1]]
        reports = [r for _, r in pairs] + [corpus.unpaired_reports[i] for i in sl[2]]
        batches.append(Batch(images, reports, len(pairs)))
    return batches


# ---------------------------------------------------------------- optimiser

class AdamW:
    """Adam with decoupled weight decay (beta1=0.9, beta2=0.999, eps=1e-8)."""

    beta1, beta2, eps = 0.9, 0.999, 1e-8

    def __init__(self, names, weight_decay=0.0, no_decay=()):
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, params: dict, lr: float):
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad
            if self.m[name] is None:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if self.weight_decay and name not in self.no_decay:
                p.value -= lr * self.weight_decay * p.value
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(params, grads, moments, lr, weight_decay=0.0, t=1,
                   beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional AdamW update on plain arrays; returns (params, moments).

    ``moments`` is a list of (m, v) pairs and ``t`` the 1-based step count.
    """
    new_p, new_m = [], []
    for p, g, (m, v) in zip(params, grads, moments):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p = p - lr * weight_decay * p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_p.append(p)
        new_m.append((m, v))
    return new_p, new_m


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    model: Model
    optimizer: AdamW
    config: TrainConfig
    step: int = 0
    world_fingerprint: str = ""

    @property
    def params(self):
        return self.model.parameters()


def init_state(cfg: TrainConfig, corpus: Corpus) -> TrainState:
    cfg.validate()
    enc = EncoderConfig(vocab_size=corpus.world.vocab_size, d_pix=corpus.world.d_pix,
                        n_patches=corpus.config.n_patches, d=cfg.d, d_v=cfg.d_v,
                        n_lesions=cfg.n_lesions, init_scale=cfg.init_scale)
    model = Model(enc, cfg.n_prototypes, cfg.seed, cfg.tau_t, cfg.tau_p)
    if cfg.renormalize_prototypes:
        model.bank.renormalize()
    no_decay = ["prototypes.mu"] if cfg.renormalize_prototypes else []
    opt = AdamW(list(model.parameters()), cfg.weight_decay, no_decay)
    return TrainState(model, opt, cfg, 0, corpus.world.fingerprint())


def extract_all(corpus: Corpus, backend="ground_truth", **kwargs) -> dict:
    ext = make_extractor(backend, corpus.world, **kwargs)
    return {r.id: ext(r) for r in corpus.all_reports()}


class NonFiniteLoss(NumericError):
    def __init__(self, message, batch_ids=None, terms=None):
        super().__init__(message)
        self.batch_ids = batch_ids
        self.terms = terms


def compute_losses(state: TrainState, batch: Batch, evidence: dict, cache=None):
    """(weighted total node, per-term nodes, relation info) for one batch."""
    cfg = state.config
    model = state.model
    try:
        if cfg.mode == "global_baseline":
            terms, rel = model.global_losses(batch, cfg)
            total = terms["global"]
        else:
            terms, rel = model.lgdea_losses(batch, evidence, cfg, cache)
            total = None
            weights = cfg.weights_at(state.step)
            for key in WEIGHT_KEYS:
                t = nm.scale(terms[key], weights[key])
                total = t if total is None else nm.add(total, t)
    except NumericError as exc:
        raise NonFiniteLoss(f"non-finite value during forward pass: {exc}; batch={batch.ids}",
                            batch.ids) from exc
    values = {k: v.item() for k, v in terms.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLoss(f"non-finite loss terms {values}; batch={batch.ids}", batch.ids, values)
    return total, terms, rel


def train_step(state: TrainState, batch: Batch, evidence: dict, lr=None):
    """One optimiser step; returns the per-term loss record."""
    cfg = state.config
    state.model.zero_grad()
    total, terms, rel = compute_losses(state, batch, evidence)
    nm.backward(total)
    params = state.params
    state.optimizer.step(params, cfg.learning_rate if lr is None else lr)
    if cfg.renormalize_prototypes:
        state.model.bank.renormalize()
    state.step += 1
    record = {"step": state.step, "mode": cfg.mode,
              "losses": {k: terms[k].item() for k in LOSS_TERMS},
              "total": total.item()}
    if rel is not None:
        record["relation"] = relation_stats(rel, batch)
        if cfg.dump_relations:
            record["relation"]["dump"] = relation_dump(rel)
    return record


def relation_stats(rel, batch):
    """Summary of the propagated relations, including a ground-truth check."""
    p = rel.p
    mass = p.sum()
    share = np.array([[bool(set(im.true_concepts) & set(r.true_concepts)) for r in batch.reports]
                      for im in batch.images], dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    ent = -(p * np.log(safe)).sum(axis=1)
    live = p.sum(axis=1) > 0
    return {"zero_rows": rel.zero_rows,
            "mean_row_entropy": float(ent[live].mean()) if live.any() else 0.0,
            "concept_agreement": float((p * share).sum() / mass) if mass > 0 else 0.0}


def relation_dump(rel):
    return {"Y": rel.y.tolist(),
            "S_I": None if rel.s_i is None else rel.s_i.tolist(),
            "S_T": None if rel.s_t is None else rel.s_t.tolist(),
            "P": rel.p.tolist()}


def schedule(corpus: Corpus, cfg: TrainConfig):
    """Yield (epoch, lr, batch_size, n_batches) for every epoch of every phase."""
    epoch = 0
    for n_epochs, lr, bs in cfg.phase_list():
        for _ in range(n_epochs):
            n = len(make_batches(corpus, cfg, [cfg.seed, epoch], bs))
            yield epoch, lr, bs, n
            epoch += 1


def train(corpus: Corpus, cfg: TrainConfig | None = None, state: TrainState | None = None,
          evidence: dict | None = None, metrics=None, max_steps=None, callback=None):
    """Run (or resume) training; returns (state, list of step records).

    ``metrics`` may be an open text file receiving one JSON line per step.
    Resuming picks up at ``state.step`` in the same deterministic schedule.
    """
    cfg = (cfg or (state.config if state else TrainConfig())).validate()
    state = state or init_state(cfg, corpus)
    if evidence is None:
        evidence = extract_all(corpus, cfg.extractor)
    limit = max_steps if max_steps is not None else cfg.max_steps
    history = []
    done = 0
    for epoch, lr, bs, n in schedule(corpus, cfg):
        if done + n <= state.step:
            done += n
            continue
        batches = make_batches(corpus, cfg, [cfg.seed, epoch], bs)
        for b_idx in range(state.step - done, n):
            if limit is not None and state.step >= limit:
                return state, history
            rec = train_step(state, batches[b_idx], evidence, lr)
            rec["epoch"] = epoch
            history.append(rec)
            if metrics is not None:
                metrics.write(json.dumps(rec, sort_keys=True) + "\n")
            if callback is not None:
                callback(rec)
        done += n
    return state, history


# ---------------------------------------------------------------- checkpoints

def _block(a):
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def _unblock(d, name):
    try:
        return np.array(d["data"], dtype=np.float64).reshape(d["shape"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint block {name!r} is malformed: {exc}") from exc


def save_checkpoint(state: TrainState, path):
    opt = state.optimizer
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": "lgdea-checkpoint",
        "config": state.config.to_dict(),
        "encoder": dataclasses.asdict(state.model.cfg),
        "world_fingerprint": state.world_fingerprint,
        "step": state.step,
        "params": {k: _block(p.value) for k, p in state.params.items()},
        "optimizer": {"t": opt.t,
                      "m": {k: None if v is None else _block(v) for k, v in opt.m.items()},
                      "v": {k: None if v is None else _block(v) for k, v in opt.v.items()}},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_checkpoint(path, corpus: Corpus | None = None, cfg: TrainConfig | None = None) -> TrainState:
    """Restore a TrainState; ``cfg`` (if given) must match the stored shapes."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("kind") != "lgdea-checkpoint":
        raise FormatError(f"{path} is not a checkpoint")
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise FormatError(f"checkpoint schema_version {doc.get('schema_version')} "
                          f"!= {CHECKPOINT_SCHEMA_VERSION}")
    stored = TrainConfig.from_dict(doc["config"])
    cfg = cfg or stored
    enc = EncoderConfig(**doc["encoder"])
    enc = dataclasses.replace(enc, d=cfg.d, d_v=cfg.d_v, n_lesions=cfg.n_lesions)
    model = Model(enc, cfg.n_prototypes, cfg.seed, cfg.tau_t, cfg.tau_p)
    params = model.parameters()
    if set(params) != set(doc["params"]):
        raise FormatError(f"checkpoint blocks {sorted(doc['params'])} do not match model")
    for name, p in params.items():
        arr = _unblock(doc["params"][name], name)
        if arr.shape != p.value.shape:
            raise FormatError(f"block {name!r}: checkpoint shape {arr.shape} "
                              f"!= configured {p.value.shape}")
        p.value[...] = arr
    no_decay = ["prototypes.mu"] if cfg.renormalize_prototypes else []
    opt = AdamW(list(params), cfg.weight_decay, no_decay)
    opt.t = doc["optimizer"]["t"]
    for slot in ("m", "v"):
        store = getattr(opt, slot)
        for name, blk in doc["optimizer"][slot].items():
            store[name] = None if blk is None else _unblock(blk, name)
    if corpus is not None and corpus.world.fingerprint() != doc["world_fingerprint"]:
        log.warning("checkpoint was trained on a different concept world")
    return TrainState(model, opt, cfg, doc["step"], doc["world_fingerprint"])


# ---------------------------------------------------------------- gradient suite

def gradient_suite(seed=0, n_prototypes=16, n_lesions=8, batch_size=4, max_coords=15,
                   step=1e-5, jitter=0.3):
    """Finite-difference check of every loss term and the weighted total.

    Builds a tiny corpus and one mixed batch of ``batch_size`` images and
    reports, jitters the parameters away from their near-symmetric init and
    returns {term: max relative error} for the LGDEA terms, the total, and
    the global contrastive loss.
    """
    from .corpus import GenConfig, generate_corpus

    corpus = generate_corpus(GenConfig(n_images=40, pairing_ratio=0.5), seed=seed)
    out = {}
    for mode in MODES:
        cfg = TrainConfig(mode=mode, batch_size=batch_size, paired_fraction_per_batch=0.5,
                          k_nn=3, n_prototypes=n_prototypes, n_lesions=n_lesions, seed=seed)
        state = init_state(cfg, corpus)
        evidence = extract_all(corpus)
        batch = make_batches(corpus, cfg, [seed, 0])[0]
        rng = np.random.default_rng([seed, 5])
        for p in state.params.values():
            p.value += rng.normal(scale=jitter, size=p.value.shape)
        terms = ("rec", "paired", "unpaired", "align", "total") if mode == "lgdea" else ("global",)
        for term in terms:
            cache = nm.DetachCache()
            compute_losses(state, batch, evidence, cache)
            cache.freeze()

            def loss_fn(term=term, cache=cache):
                total, parts, _ = compute_losses(state, batch, evidence, cache)
                return total if term in ("total", "global") else parts[term]

            out[term] = float(nm.check_gradients(loss_fn, state.params.values(), step=step,
                                                 max_coords=max_coords, seed=seed))
    return out
