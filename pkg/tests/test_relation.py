import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lgdea import numerics as nm
from lgdea.errors import DimensionError
from lgdea.relation import (aggregate_image, aggregate_report, build_graphs, evidence_graph,
                            infer_relations, loss_evidence_align, loss_global, propagate,
                            row_normalize, seed_relations)


def unit(rows):
    rows = np.asarray(rows, dtype=np.float64)
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


# ---------------------------------------------------------------- aggregates

def test_aggregate_single_and_permutation():
    z = nm.constant([[3.0, 4.0]])
    assert np.allclose(aggregate_report(z).value, [[0.6, 0.8]])
    rows = np.random.default_rng(0).normal(size=(4, 3))
    a = aggregate_image(nm.constant(rows)).value
    b = aggregate_image(nm.constant(rows[[2, 0, 3, 1]])).value
    assert np.allclose(a, b, atol=1e-15)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-9)


def test_aggregate_cancellation_is_flagged():
    h = aggregate_report(nm.constant([[1.0, 0.0], [-1.0, 0.0]]))
    assert np.array_equal(h.value, [[0.0, 0.0]])
    assert h.info["degenerate"].tolist() == [True]


def test_aggregate_image_splits_per_image():
    v = nm.constant([[1.0, 0.0], [1.0, 0.0], [0.0, 2.0], [0.0, 2.0]])
    assert np.allclose(aggregate_image(v, 2).value, [[1.0, 0.0], [0.0, 1.0]])


# ---------------------------------------------------------------- graphs

def test_two_identical_rows():
    s = evidence_graph(np.array([[1.0, 2.0], [1.0, 2.0]]))
    assert s.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_equal_pairwise_cosines():
    h = unit([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    s = evidence_graph(h)
    assert np.allclose(s, (1 - np.eye(3)) * 0.5, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_graph_rows_stochastic(n, seed):
    s = evidence_graph(np.random.default_rng(seed).normal(size=(n, 5)), tau_g=0.1)
    assert np.all(np.diag(s) == 0.0)
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-9)


def test_single_row_disables_propagation():
    s_i, s_t = build_graphs(np.ones((1, 3)), np.ones((2, 3)))
    assert s_i is None and s_t is not None
    y = np.array([[2.0, 0.0]])
    assert np.array_equal(propagate(y, s_i, s_t, 2), [[1.0, 0.0]])


# ---------------------------------------------------------------- propagation

def test_identity_propagation():
    eye = np.eye(3)
    assert np.array_equal(propagate(eye, eye, eye, 2, normalize=False), 3 * eye)
    assert np.array_equal(propagate(eye, eye, eye, 2), eye)


def test_propagation_hand_example():
    y = np.array([[1.0, 0.0], [0.0, 0.0]])
    s = np.full((2, 2), 0.5)
    assert np.allclose(propagate(y, s, s, 2, normalize=False), [[1.5, 0.5], [0.5, 0.5]])
    assert np.allclose(propagate(y, s, s, 2), [[0.75, 0.25], [0.5, 0.5]])


def test_zero_steps_normalises_seed():
    y = np.array([[1.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    s_i, s_t = np.eye(2), np.eye(3)
    assert np.array_equal(propagate(y, s_i, s_t, 0), [[0.5, 0.5, 0.0], [0.0, 0.0, 0.0]])


def test_propagation_shape_and_step_errors():
    with pytest.raises(DimensionError):
        propagate(np.eye(2), np.eye(3), np.eye(2))
    with pytest.raises(ValueError):
        propagate(np.eye(2), np.eye(2), np.eye(2), steps=-1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 4))
def test_propagation_nonnegative_and_rows(seed, steps):
    rng = np.random.default_rng(seed)
    y = (rng.random((5, 6)) < 0.2).astype(float)
    p = propagate(y, row_normalize(rng.random((5, 5))), row_normalize(rng.random((6, 6))), steps)
    assert np.all(p >= 0)
    live = p.sum(axis=1) > 0
    assert np.allclose(p.sum(axis=1)[live], 1.0, atol=1e-12)


def test_seed_relations_block_identity():
    y = seed_relations(4, 3, 2)
    assert y.tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 0], [0, 0, 0]]
    y, s_i, s_t, p = infer_relations(np.eye(4, 3), np.eye(3), 2)
    assert p.shape == (4, 3) and s_i.shape == (4, 4) and s_t.shape == (3, 3)


# ---------------------------------------------------------------- losses

def _brute_align(hi, hr, p, tau):
    n_i, n_r = len(p), len(p[0])
    sim = [[sum(a * b for a, b in zip(hi[i], hr[j])) / tau for j in range(n_r)] for i in range(n_i)]
    i2r = 0.0
    for i in range(n_i):
        lse = math.log(sum(math.exp(s) for s in sim[i]))
        i2r -= sum(p[i][j] * (sim[i][j] - lse) for j in range(n_r))
    r2i = 0.0
    for j in range(n_r):
        lse = math.log(sum(math.exp(sim[i][j]) for i in range(n_i)))
        r2i -= sum(p[i][j] * (sim[i][j] - lse) for i in range(n_i))
    return i2r / n_i + r2i / n_r


def test_align_single_pair_is_zero():
    h = nm.constant([[1.0, 0.0]])
    assert loss_evidence_align(h, h, np.ones((1, 1))).item() == 0.0


def test_align_hand_example():
    hi = unit([[1.0, 0.2], [0.3, -1.0]])
    hr = unit([[0.8, 0.5], [-0.1, 1.0]])
    p = np.array([[0.75, 0.25], [0.5, 0.5]])
    got = loss_evidence_align(nm.constant(hi), nm.constant(hr), p, 0.07).item()
    assert abs(got - _brute_align(hi.tolist(), hr.tolist(), p.tolist(), 0.07)) < 1e-9


def test_align_with_identity_equals_infonce():
    rng = np.random.default_rng(1)
    hi, hr = unit(rng.normal(size=(5, 4))), unit(rng.normal(size=(5, 4)))
    a = loss_evidence_align(nm.constant(hi), nm.constant(hr), np.eye(5), 0.07).item()
    b = loss_global(nm.constant(hi), nm.constant(hr), 0.07).item()
    assert abs(a - b) < 1e-9


def test_align_zero_rows_contribute_nothing():
    rng = np.random.default_rng(2)
    hi, hr = unit(rng.normal(size=(3, 4))), unit(rng.normal(size=(2, 4)))
    p = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    got = loss_evidence_align(nm.constant(hi), nm.constant(hr), p, 0.1).item()
    assert abs(got - _brute_align(hi.tolist(), hr.tolist(), p.tolist(), 0.1)) < 1e-9


def test_align_shape_error():
    h = nm.constant(np.ones((2, 3)))
    with pytest.raises(DimensionError):
        loss_evidence_align(h, h, np.eye(3))


def test_align_gradients_with_fixed_relations():
    rng = np.random.default_rng(3)
    a = nm.parameter(rng.normal(size=(4, 3)))
    b = nm.parameter(rng.normal(size=(3, 3)))
    p = row_normalize(rng.random((4, 3)))

    def loss():
        return loss_evidence_align(nm.l2_normalize_rows(a), nm.l2_normalize_rows(b), p, 0.2)

    assert nm.check_gradients(loss, [a, b]) < 1e-6


def test_global_loss_examples():
    h = nm.constant([[0.3, 0.4]])
    assert loss_global(h, h).item() == pytest.approx(0.0, abs=1e-15)
    e = nm.constant(np.eye(2))
    # -log(e / (e + 1)) = 0.313262 averaged over the batch, once per direction
    assert loss_global(e, e, tau1=1.0).item() == pytest.approx(2 * 0.313262, abs=1e-6)


def test_global_loss_monotone_in_matched_similarity():
    base = unit([[1.0, 0.0], [0.0, 1.0]])
    worse = unit([[1.0, 0.0], [0.6, 1.0]])
    a = loss_global(nm.constant(base), nm.constant(base), 0.5).item()
    b = loss_global(nm.constant(base), nm.constant(worse), 0.5).item()
    assert a < b


def test_global_loss_needs_matched_batches():
    with pytest.raises(DimensionError):
        loss_global(nm.constant(np.ones((2, 2))), nm.constant(np.ones((3, 2))))
