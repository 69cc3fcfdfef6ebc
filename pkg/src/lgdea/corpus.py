"""Synthetic image/report world with planted lesions and known pairings.

Each latent concept owns a disjoint block of token ids and a lesion signature
in pixel-feature space.  Images are grids of patch feature vectors: noise
everywhere, plus the concept signature on the patches of each planted lesion.
Reports are sentences whose concept tokens name the same findings.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FORMAT_KIND = "lgdea-corpus"


@dataclass(frozen=True)
class GenConfig:
    n_images: int = 1000
    n_reports: int | None = None  # defaults to n_images
    pairing_ratio: float = 0.10
    n_concepts: int = 8
    d_pix: int = 16
    grid: int = 7
    vocab_per_concept: int = 40
    n_background: int = 200
    noise_sigma: float = 0.3
    lesion_strength: float = 1.0
    phrase_len: tuple = (3, 6)
    sentence_background: tuple = (1, 3)
    background_sentences: tuple = (0, 2)
    concepts_per_sample: tuple = (1, 3)
    lesion_patches: tuple = (1, 4)
    max_signature_cosine: float = 0.5
    world_seed: int = 0
    cross_domain: bool = False
    domain_shift: float = 0.3
    domain_noise_scale: float = 1.5

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def validate(self):
        if not 0 < self.pairing_ratio <= 1:
            raise ConfigError(f"pairing_ratio must lie in (0, 1], got {self.pairing_ratio}")
        if self.n_concepts < 2:
            raise ConfigError("need at least two concepts")
        if self.n_images < 1 or (self.n_reports is not None and self.n_reports < 1):
            raise ConfigError("image and report counts must be positive")
        if min(self.d_pix, self.grid, self.vocab_per_concept, self.n_background) < 1:
            raise ConfigError("sizes must be positive")
        for name in ("phrase_len", "sentence_background", "background_sentences",
                     "concepts_per_sample", "lesion_patches"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"bad range {name}={lo, hi}")
        if self.concepts_per_sample[0] < 1 or self.concepts_per_sample[1] > self.n_concepts:
            raise ConfigError("concepts_per_sample out of range")
        if self.phrase_len[0] < 1 or self.lesion_patches[0] < 1:
            raise ConfigError("phrases and lesions need at least one element")
        if self.concepts_per_sample[1] * self.lesion_patches[1] > self.n_patches:
            raise ConfigError("lesions cannot fit on the patch grid")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


# The two limited-pairing regimes are presets on top of the reference world.
PRESETS = {
    "small": GenConfig(n_images=200, pairing_ratio=0.10),
    "reference": GenConfig(n_images=1000, pairing_ratio=0.10),
    "pair5": GenConfig(n_images=1000, pairing_ratio=0.05),
    "pair10": GenConfig(n_images=1000, pairing_ratio=0.10),
    "pair10-cross": GenConfig(n_images=1000, pairing_ratio=0.10, cross_domain=True),
}


@dataclass(eq=False)
class ConceptWorld:
    n_concepts: int
    vocab_per_concept: int
    n_background: int
    signatures: np.ndarray  # n_concepts x d_pix
    noise_sigma: float
    background_mean: float = 0.0

    @property
    def d_pix(self) -> int:
        return self.signatures.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.n_concepts * self.vocab_per_concept + self.n_background

    @property
    def background_start(self) -> int:
        return self.n_concepts * self.vocab_per_concept

    def concept_tokens(self, c: int) -> np.ndarray:
        lo = c * self.vocab_per_concept
        return np.arange(lo, lo + self.vocab_per_concept)

    def background_tokens(self) -> np.ndarray:
        return np.arange(self.background_start, self.vocab_size)

    def concept_of(self, token: int) -> int:
        """Concept owning a token id, or -1 for background."""
        return -1 if token >= self.background_start else token // self.vocab_per_concept

    def word(self, token: int) -> str:
        c = self.concept_of(token)
        if c < 0:
            return f"bg{token - self.background_start}"
        return f"c{c}w{token - c * self.vocab_per_concept}"

    def token(self, word: str) -> int:
        """Inverse of :meth:`word`; raises KeyError for unknown words."""
        try:
            if word.startswith("bg"):
                j = int(word[2:])
                if 0 <= j < self.n_background:
                    return self.background_start + j
            elif word.startswith("c") and "w" in word:
                c, j = (int(s) for s in word[1:].split("w", 1))
                if 0 <= c < self.n_concepts and 0 <= j < self.vocab_per_concept:
                    return c * self.vocab_per_concept + j
        except ValueError:
            pass
        raise KeyError(word)

    def shifted(self, shift: float, noise_scale: float) -> "ConceptWorld":
        """Same vocabulary and signatures, different background statistics."""
        return dataclasses.replace(self, noise_sigma=self.noise_sigma * noise_scale,
                                   background_mean=self.background_mean + shift)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(json.dumps(self.to_dict(), sort_keys=True).encode())
        return h.hexdigest()[:16]

    def to_dict(self):
        return {
            "n_concepts": self.n_concepts,
            "vocab_per_concept": self.vocab_per_concept,
            "n_background": self.n_background,
            "signatures": self.signatures.tolist(),
            "noise_sigma": self.noise_sigma,
            "background_mean": self.background_mean,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["n_concepts"], d["vocab_per_concept"], d["n_background"],
                   np.array(d["signatures"], dtype=np.float64).reshape(d["n_concepts"], -1),
                   d["noise_sigma"], d["background_mean"])

    def __eq__(self, other):
        if not isinstance(other, ConceptWorld):
            return NotImplemented
        return (self.n_concepts == other.n_concepts
                and self.vocab_per_concept == other.vocab_per_concept
                and self.n_background == other.n_background
                and self.noise_sigma == other.noise_sigma
                and self.background_mean == other.background_mean
                and np.array_equal(self.signatures, other.signatures))


@dataclass(frozen=True)
class Report:
    id: str
    sentences: tuple  # tuple of tuples of token ids
    true_concepts: tuple

    @property
    def tokens(self) -> list:
        return [t for s in self.sentences for t in s]

    def to_dict(self):
        return {"id": self.id, "sentences": [list(s) for s in self.sentences],
                "true_concepts": list(self.true_concepts)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["id"], tuple(tuple(int(t) for t in s) for s in d["sentences"]),
                   tuple(int(c) for c in d["true_concepts"]))


@dataclass(eq=False)
class ImageSample:
    id: str
    patches: np.ndarray  # P x d_pix
    lesion_mask: dict  # concept -> tuple of patch indices
    true_concepts: tuple

    def to_dict(self):
        return {"id": self.id, "patches": self.patches.tolist(),
                "lesion_mask": {str(c): list(m) for c, m in self.lesion_mask.items()},
                "true_concepts": list(self.true_concepts)}

    @classmethod
    def from_dict(cls, d):
        patches = np.array(d["patches"], dtype=np.float64)
        if patches.ndim != 2:
            raise FormatError(f"image {d.get('id')}: patches must be 2-D")
        return cls(d["id"], patches,
                   {int(c): tuple(int(i) for i in m) for c, m in d["lesion_mask"].items()},
                   tuple(int(c) for c in d["true_concepts"]))

    def __eq__(self, other):
        if not isinstance(other, ImageSample):
            return NotImplemented
        return (self.id == other.id and self.true_concepts == other.true_concepts
                and self.lesion_mask == other.lesion_mask
                and self.patches.shape == other.patches.shape
                and np.array_equal(self.patches, other.patches))


@dataclass(frozen=True)
class EvidencePhrase:
    tokens: tuple
    source_report: str
    concept: int | None = None  # known only for the ground-truth backend


@dataclass
class Corpus:
    paired: list
    unpaired_images: list
    unpaired_reports: list
    world: ConceptWorld
    pairing_ratio: float
    seed: int
    config: GenConfig = field(default_factory=GenConfig)

    @property
    def n_images(self) -> int:
        return len(self.paired) + len(self.unpaired_images)

    def all_images(self) -> list:
        return [im for im, _ in self.paired] + list(self.unpaired_images)

    def all_reports(self) -> list:
        return [r for _, r in self.paired] + list(self.unpaired_reports)


# ---------------------------------------------------------------- generation

def make_world(cfg: GenConfig) -> ConceptWorld:
    """Draw lesion signatures by rejection until pairwise cosines stay low."""
    rng = np.random.default_rng([cfg.world_seed, 7])
    sigs = []
    tries = 0
    while len(sigs) < cfg.n_concepts:
        tries += 1
        if tries > 100_000:
            raise ConfigError("could not draw separated lesion signatures; raise d_pix")
        v = rng.normal(size=cfg.d_pix)
        v /= np.linalg.norm(v)
        if all(abs(v @ s) < cfg.max_signature_cosine for s in sigs):
            sigs.append(v)
    # unit signatures scaled so a lesion stands out against per-patch noise
    scale = cfg.lesion_strength * cfg.noise_sigma * np.sqrt(cfg.d_pix)
    return ConceptWorld(cfg.n_concepts, cfg.vocab_per_concept, cfg.n_background,
                        np.array(sigs) * scale, cfg.noise_sigma)


def _draw_concepts(rng, cfg):
    n = int(rng.integers(cfg.concepts_per_sample[0], cfg.concepts_per_sample[1] + 1))
    return tuple(sorted(int(c) for c in rng.choice(cfg.n_concepts, size=n, replace=False)))


def _grow_blob(rng, grid, free, size):
    start = int(rng.choice(sorted(free)))
    blob = [start]
    free.discard(start)
    while len(blob) < size:
        cand = set()
        for p in blob:
            r, c = divmod(p, grid)
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < grid and 0 <= cc < grid and rr * grid + cc in free:
                    cand.add(rr * grid + cc)
        if not cand:
            break
        p = int(rng.choice(sorted(cand)))
        blob.append(p)
        free.discard(p)
    return tuple(sorted(blob))


def make_image(rng, world: ConceptWorld, cfg: GenConfig, concepts, ident) -> ImageSample:
    P = cfg.n_patches
    patches = world.background_mean + world.noise_sigma * rng.normal(size=(P, world.d_pix))
    free = set(range(P))
    mask = {}
    for c in concepts:
        size = int(rng.integers(cfg.lesion_patches[0], cfg.lesion_patches[1] + 1))
        blob = _grow_blob(rng, cfg.grid, free, size)
        mask[c] = blob
        patches[list(blob)] += world.signatures[c]
    return ImageSample(ident, patches, mask, tuple(concepts))


def make_report(rng, world: ConceptWorld, cfg: GenConfig, concepts, ident) -> Report:
    bg = world.background_tokens()
    sentences = []
    for c in concepts:
        vocab = world.concept_tokens(c)
        n = int(rng.integers(cfg.phrase_len[0], cfg.phrase_len[1] + 1))
        m = int(rng.integers(cfg.sentence_background[0], cfg.sentence_background[1] + 1))
        toks = list(rng.choice(vocab, size=n)) + list(rng.choice(bg, size=m))
        rng.shuffle(toks)
        sentences.append(tuple(int(t) for t in toks))
    n_bg = int(rng.integers(cfg.background_sentences[0], cfg.background_sentences[1] + 1))
    for _ in range(n_bg):
        n = int(rng.integers(cfg.phrase_len[0], cfg.phrase_len[1] + 1))
        sentences.append(tuple(int(t) for t in rng.choice(bg, size=n)))
    order = rng.permutation(len(sentences))
    return Report(ident, tuple(sentences[i] for i in order), tuple(concepts))


def generate_corpus(cfg: GenConfig | None = None, seed: int = 0) -> Corpus:
    """Build a corpus; identical (cfg, seed) give bit-identical output."""
    cfg = (cfg or GenConfig()).validate()
    world = make_world(cfg)
    rng = np.random.default_rng([seed, 11])
    n_reports = cfg.n_images if cfg.n_reports is None else cfg.n_reports
    n_paired = int(round(cfg.pairing_ratio * cfg.n_images))
    n_paired = max(1, min(n_paired, cfg.n_images, n_reports))
    image_world = world.shifted(cfg.domain_shift, cfg.domain_noise_scale) if cfg.cross_domain else world

    paired = []
    for i in range(n_paired):
        cs = _draw_concepts(rng, cfg)
        paired.append((make_image(rng, world, cfg, cs, f"p{i}-img"),
                       make_report(rng, world, cfg, cs, f"p{i}-rep")))
    images = [make_image(rng, image_world, cfg, _draw_concepts(rng, cfg), f"u{i}-img")
              for i in range(cfg.n_images - n_paired)]
    reports = [make_report(rng, world, cfg, _draw_concepts(rng, cfg), f"u{i}-rep")
               for i in range(n_reports - n_paired)]
    return Corpus(paired, images, reports, world, cfg.pairing_ratio, seed, cfg)


def generate_eval_set(cfg: GenConfig | None = None, per_concept: int = 25,
                      seed: int = 10_000) -> Corpus:
    """Held-out, fully paired, class-balanced single-concept corpus.

    Shares the world of ``cfg`` (same ``world_seed``), so a model trained on a
    corpus from ``cfg`` can be evaluated on it.
    """
    cfg = (cfg or GenConfig()).validate()
    world = make_world(cfg)
    rng = np.random.default_rng([seed, 13])
    paired = []
    for c in range(cfg.n_concepts):
        for i in range(per_concept):
            ident = f"e{c}-{i}"
            paired.append((make_image(rng, world, cfg, (c,), ident + "-img"),
                           make_report(rng, world, cfg, (c,), ident + "-rep")))
    order = rng.permutation(len(paired))
    paired = [paired[i] for i in order]
    ev_cfg = dataclasses.replace(cfg, n_images=len(paired), n_reports=len(paired),
                                 pairing_ratio=1.0, concepts_per_sample=(1, 1))
    return Corpus(paired, [], [], world, 1.0, seed, ev_cfg)


# ---------------------------------------------------------------- file format

def save_corpus(corpus: Corpus, path) -> None:
    """Line-delimited JSON: one header line, then one record per sample."""
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": FORMAT_KIND,
        "seed": corpus.seed,
        "pairing_ratio": corpus.pairing_ratio,
        "config": corpus.config.to_dict(),
        "world": corpus.world.to_dict(),
        "counts": {"paired": len(corpus.paired),
                   "unpaired_images": len(corpus.unpaired_images),
                   "unpaired_reports": len(corpus.unpaired_reports)},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for im, rep in corpus.paired:
            fh.write(json.dumps({"type": "paired", "image": im.to_dict(), "report": rep.to_dict()}) + "\n")
        for im in corpus.unpaired_images:
            fh.write(json.dumps({"type": "image", "image": im.to_dict()}) + "\n")
        for rep in corpus.unpaired_reports:
            fh.write(json.dumps({"type": "report", "report": rep.to_dict()}) + "\n")
    tmp.replace(path)


def load_corpus(path) -> Corpus:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read corpus {path}: {exc}") from exc
    if not lines:
        raise FormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
        if header.get("kind") != FORMAT_KIND:
            raise FormatError(f"{path}: not a corpus file")
        if header.get("schema_version") != SCHEMA_VERSION:
            raise FormatError(f"{path}: schema_version {header.get('schema_version')} "
                              f"!= {SCHEMA_VERSION}")
        paired, images, reports = [], [], []
        for ln in lines[1:]:
            rec = json.loads(ln)
            kind = rec["type"]
            if kind == "paired":
                paired.append((ImageSample.from_dict(rec["image"]), Report.from_dict(rec["report"])))
            elif kind == "image":
                images.append(ImageSample.from_dict(rec["image"]))
            elif kind == "report":
                reports.append(Report.from_dict(rec["report"]))
            else:
                raise FormatError(f"{path}: unknown record type {kind!r}")
        counts = header["counts"]
        got = {"paired": len(paired), "unpaired_images": len(images), "unpaired_reports": len(reports)}
        if got != counts:
            raise FormatError(f"{path}: truncated or corrupt, expected {counts}, found {got}")
        return Corpus(paired, images, reports, ConceptWorld.from_dict(header["world"]),
                      header["pairing_ratio"], header["seed"], GenConfig.from_dict(header["config"]))
    except FormatError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed corpus ({exc})") from exc
