"""Evidence extraction backends: report -> list of evidence phrases.

``ground_truth`` uses the generator's vocabulary to recover each finding
exactly, ``rule`` keeps sentences that mention anything besides filler, and
``llm`` asks an HTTP completion endpoint (``LGDEA_LLM_ENDPOINT``, optional
``LGDEA_LLM_API_KEY``) and parses one phrase per response line.
"""
from __future__ import annotations

import hashlib
import os
import re
import threading
import urllib.error
import urllib.request
from importlib import resources
from pathlib import Path

from .corpus import ConceptWorld, EvidencePhrase, Report
from .errors import ConfigError, ExtractionError, InputError

BACKENDS = ("ground_truth", "rule", "llm")
_BULLET = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def render_report(report: Report, world: ConceptWorld) -> str:
    return " ".join(" ".join(world.word(t) for t in s) + " ." for s in report.sentences)


class GroundTruthExtractor:
    name = "ground_truth"

    def __init__(self, world: ConceptWorld):
        self.world = world

    def __call__(self, report: Report) -> list:
        out = []
        for sent in report.sentences:
            owners = {self.world.concept_of(t) for t in sent} - {-1}
            if len(owners) != 1:
                continue
            (c,) = owners
            toks = tuple(t for t in sent if self.world.concept_of(t) == c)
            out.append(EvidencePhrase(toks, report.id, c))
        return out


class RuleExtractor:
    name = "rule"

    def __init__(self, world: ConceptWorld):
        self.world = world

    def __call__(self, report: Report) -> list:
        return [EvidencePhrase(tuple(s), report.id) for s in report.sentences
                if any(self.world.concept_of(t) >= 0 for t in s)]


class LLMExtractor:
    """Completion-endpoint backend with a content-addressed disk cache."""

    name = "llm"

    def __init__(self, world: ConceptWorld, endpoint=None, api_key=None,
                 cache_dir=None, template=None, timeout=30.0):
        self.world = world
        self.endpoint = endpoint or os.environ.get("LGDEA_LLM_ENDPOINT")
        self.api_key = api_key or os.environ.get("LGDEA_LLM_API_KEY")
        if not self.endpoint:
            raise ConfigError("llm backend needs an endpoint (LGDEA_LLM_ENDPOINT)")
        self.template = template or resources.files("lgdea").joinpath(
            "assets/evidence_prompt.txt").read_text()
        self.cache_dir = Path(cache_dir or os.environ.get("LGDEA_LLM_CACHE", ".lgdea_llm_cache"))
        self.timeout = timeout
        self._lock = threading.Lock()

    def prompt(self, report: Report) -> str:
        return self.template.format(report=render_report(report, self.world))

    def _cached(self, key):
        path = self.cache_dir / f"{key}.txt"
        return path.read_text() if path.exists() else None

    def _store(self, key, text):
        with self._lock:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            tmp = self.cache_dir / f"{key}.tmp"
            tmp.write_text(text)
            tmp.replace(self.cache_dir / f"{key}.txt")

    def complete(self, prompt: str) -> str:
        key = hashlib.sha256(prompt.encode()).hexdigest()
        hit = self._cached(key)
        if hit is not None:
            return hit
        headers = {"Content-Type": "text/plain; charset=utf-8"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        req = urllib.request.Request(self.endpoint, data=prompt.encode(), headers=headers,
                                     method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                text = resp.read().decode("utf-8")
        except urllib.error.HTTPError as exc:
            raw = exc.read().decode("utf-8", errors="replace")
            raise ExtractionError(f"llm endpoint returned HTTP {exc.code}", raw=raw) from exc
        except (urllib.error.URLError, OSError, UnicodeDecodeError) as exc:
            raise ExtractionError(f"llm request failed: {exc}") from exc
        self._store(key, text)
        return text

    def parse(self, text: str, report: Report) -> list:
        out = []
        for line in text.splitlines():
            line = _BULLET.sub("", line).strip().rstrip(".").strip()
            if not line:
                continue
            try:
                toks = tuple(self.world.token(w) for w in line.split())
            except KeyError as exc:
                raise ExtractionError(f"unparseable evidence line {line!r}", raw=text) from exc
            out.append(EvidencePhrase(toks, report.id))
        return out

    def __call__(self, report: Report) -> list:
        return self.parse(self.complete(self.prompt(report)), report)


def make_extractor(backend: str, world: ConceptWorld, **kwargs):
    if backend == "ground_truth":
        return GroundTruthExtractor(world)
    if backend == "rule":
        return RuleExtractor(world)
    if backend == "llm":
        return LLMExtractor(world, **kwargs)
    raise ConfigError(f"unknown extraction backend {backend!r}; choose from {BACKENDS}")


def extract_evidence(report: Report, backend) -> list:
    """Evidence phrases of ``report``; ``backend`` is an extractor instance."""
    if not report.sentences or not any(report.sentences):
        raise InputError(f"report {report.id} is empty")
    return backend(report)
