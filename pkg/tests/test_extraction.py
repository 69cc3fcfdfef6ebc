import http.server
import threading

import pytest

from lgdea.corpus import GenConfig, Report, make_world
from lgdea.errors import ConfigError, ExtractionError, InputError
from lgdea.extraction import (LLMExtractor, extract_evidence, make_extractor, render_report)

WORLD = make_world(GenConfig())


def _tok(word):
    return WORLD.token(word)


def _report():
    return Report("r1", (
        tuple(map(_tok, ["c0w1", "bg3", "c0w7"])),
        tuple(map(_tok, ["bg1", "bg2"])),
        tuple(map(_tok, ["c4w0", "c4w2", "bg9", "c4w3"])),
        tuple(map(_tok, ["c6w5"])),
    ), (0, 4, 6))


def test_ground_truth_backend_recovers_concepts():
    phrases = extract_evidence(_report(), make_extractor("ground_truth", WORLD))
    assert [p.concept for p in phrases] == [0, 4, 6]
    assert phrases[1].tokens == tuple(map(_tok, ["c4w0", "c4w2", "c4w3"]))
    assert all(p.source_report == "r1" for p in phrases)


def test_ground_truth_backend_on_generated_reports(small_corpus):
    ext = make_extractor("ground_truth", small_corpus.world)
    for r in small_corpus.all_reports():
        concepts = sorted({small_corpus.world.concept_of(t) for p in ext(r) for t in p.tokens})
        assert concepts == sorted(r.true_concepts)


def test_rule_backend_drops_background_sentences():
    rule = make_extractor("rule", WORLD)
    assert len(rule(_report())) == 3
    only_bg = Report("r2", (tuple(map(_tok, ["bg1", "bg2"])),), ())
    assert extract_evidence(only_bg, rule) == []


def test_empty_report_is_an_input_error():
    with pytest.raises(InputError):
        extract_evidence(Report("e", (), ()), make_extractor("rule", WORLD))


def test_unknown_backend():
    with pytest.raises(ConfigError):
        make_extractor("oracle", WORLD)


class _Handler(http.server.BaseHTTPRequestHandler):
    reply = (200, "")
    seen = []

    def do_POST(self):
        body = self.rfile.read(int(self.headers["Content-Length"])).decode()
        type(self).seen.append((body, self.headers.get("Authorization")))
        code, text = type(self).reply
        data = text.encode()
        self.send_response(code)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture()
def endpoint():
    server = http.server.HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Handler.seen = []
    yield f"http://127.0.0.1:{server.server_address[1]}/complete"
    server.shutdown()
    server.server_close()


def test_llm_backend_parses_lines_in_order(endpoint, tmp_path):
    _Handler.reply = (200, "- c4w0 c4w2\n\n2. c0w1 c0w7.\n")
    ext = LLMExtractor(WORLD, endpoint=endpoint, api_key="k", cache_dir=tmp_path)
    phrases = ext(_report())
    assert [p.tokens for p in phrases] == [(_tok("c4w0"), _tok("c4w2")),
                                           (_tok("c0w1"), _tok("c0w7"))]
    body, auth = _Handler.seen[0]
    assert render_report(_report(), WORLD) in body
    assert auth == "Bearer k"


def test_llm_backend_caches_responses(endpoint, tmp_path):
    _Handler.reply = (200, "c6w5\n")
    ext = LLMExtractor(WORLD, endpoint=endpoint, cache_dir=tmp_path)
    first = ext(_report())
    _Handler.reply = (200, "c1w1\n")
    assert ext(_report()) == first
    assert len(_Handler.seen) == 1
    assert len(list(tmp_path.glob("*.txt"))) == 1


def test_llm_backend_errors_carry_raw_response(endpoint, tmp_path):
    _Handler.reply = (200, "pneumonia in the left lobe\n")
    ext = LLMExtractor(WORLD, endpoint=endpoint, cache_dir=tmp_path / "a")
    with pytest.raises(ExtractionError) as info:
        ext(_report())
    assert info.value.raw == "pneumonia in the left lobe\n"
    _Handler.reply = (503, "overloaded")
    ext = LLMExtractor(WORLD, endpoint=endpoint, cache_dir=tmp_path / "b")
    with pytest.raises(ExtractionError) as info:
        ext(_report())
    assert info.value.raw == "overloaded"


def test_llm_backend_unreachable(tmp_path):
    ext = LLMExtractor(WORLD, endpoint="http://127.0.0.1:9/none", cache_dir=tmp_path, timeout=2)
    with pytest.raises(ExtractionError):
        ext(_report())


def test_llm_backend_needs_endpoint(monkeypatch):
    monkeypatch.delenv("LGDEA_LLM_ENDPOINT", raising=False)
    with pytest.raises(ConfigError):
        make_extractor("llm", WORLD)
