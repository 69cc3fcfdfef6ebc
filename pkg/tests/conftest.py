import warnings

import pytest

from lgdea.corpus import GenConfig, generate_corpus, generate_eval_set


def pytest_configure(config):
    warnings.filterwarnings("ignore", message="only .* lesions in batch")


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(GenConfig(n_images=64, pairing_ratio=0.25), seed=3)


@pytest.fixture(scope="session")
def tiny_eval():
    return generate_eval_set(GenConfig(n_images=64), per_concept=3)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
