import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glcascade.cascades import DomainError, MeasurementSet, derive_seed
from glcascade.diagnostics import (
    CONCENTRATION_HEADER,
    gram_matrix,
    hessian_concentration,
    lf_constants,
    re_estimate,
    sample_measurements,
)
from glcascade.graph import Graph, ParameterError, p_to_theta
from glcascade.recovery import NegLogLikelihood

from oracles import cone_min_rayleigh


def _ms(x, y=None, model="ic"):
    x = np.asarray(x, dtype=bool)
    y = np.zeros(len(x), np.int8) if y is None else np.asarray(y, np.int8)
    return MeasurementSet(0, x, y, model)


def _random_psd(rng, m, rank=None):
    b = rng.normal(size=(m, rank or m))
    return b @ b.T / m


# --- gram -----------------------------------------------------------------


def test_gram_examples():
    assert np.array_equal(gram_matrix(_ms([[1, 0, 1]])), np.array([[1.0, 0, 1], [0, 0, 0], [1, 0, 1]]))
    assert np.array_equal(gram_matrix(np.ones((7, 4))), np.ones((4, 4)))
    with pytest.raises(DomainError):
        gram_matrix(np.zeros((0, 3)))


@given(st.integers(0, 2**31))
def test_gram_matches_outer_product_sum(seed):
    rng = np.random.default_rng(seed)
    x = rng.random((30, 6)) < 0.3
    total = np.zeros((6, 6))
    for row in x.astype(float):
        total += np.outer(row, row)
    g = gram_matrix(x)
    assert np.max(np.abs(g - total / 30)) <= 1e-14
    assert np.allclose(np.diag(g), x.mean(axis=0))
    assert np.linalg.eigvalsh(g).min() >= -1e-10


# --- restricted eigenvalues -----------------------------------------------


def test_identity_has_unit_re():
    for support in ([0], [1, 3], [0, 1, 2, 3, 4]):
        est = re_estimate(np.eye(5), support, num_samples=500, seed=1)
        assert est.gamma_upper == 1.0
        assert est.gamma_sampled == pytest.approx(1.0, abs=1e-12)


def test_rank_one_is_degenerate():
    v = np.array([1.0, 2.0, -1.0, 0.5])
    est = re_estimate(np.outer(v, v), [0, 1], num_samples=200)
    assert abs(est.gamma_upper) <= 1e-10
    assert est.gamma_sampled <= est.gamma_upper + 1e-9


def test_re_errors():
    with pytest.raises(DomainError):
        re_estimate(np.array([[1.0, 2.0], [0.0, 1.0]]), [0])
    with pytest.raises(DomainError):
        re_estimate(np.ones((2, 3)), [0])
    with pytest.raises(ParameterError):
        re_estimate(np.eye(3), [])
    with pytest.raises(ParameterError):
        re_estimate(np.eye(3), [3])


def test_re_matches_exact_face_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(8):
        a = _random_psd(rng, 5)
        support = sorted(rng.choice(5, 2, replace=False).tolist())
        est = re_estimate(a, support, num_samples=2000, seed=2)
        exact = cone_min_rayleigh(a, support)
        # sampled directions lie in the cone, so they can only overestimate
        assert est.gamma_sampled >= exact - 1e-9
        assert abs(est.gamma_sampled - exact) <= 1e-3


@settings(max_examples=25)
@given(st.integers(0, 2**31))
def test_re_invariants(seed):
    rng = np.random.default_rng(seed)
    a = _random_psd(rng, 6, rank=int(rng.integers(1, 7)))
    support = sorted(rng.choice(6, int(rng.integers(1, 4)), replace=False).tolist())
    est = re_estimate(a, support, num_samples=300, seed=seed)
    assert est.gamma_sampled <= est.gamma_upper + 1e-9
    assert est.gamma_upper >= -1e-10 and est.gamma_sampled >= -1e-10
    # relabelling nodes consistently leaves both numbers unchanged
    perm = rng.permutation(6)
    inv = np.argsort(perm)
    b = a[np.ix_(perm, perm)]
    moved = re_estimate(b, [int(inv[s]) for s in support], num_samples=300, seed=seed)
    assert moved.gamma_upper == pytest.approx(est.gamma_upper, abs=1e-10)
    assert moved.gamma_sampled == pytest.approx(est.gamma_sampled, abs=1e-6)


def test_re_is_deterministic():
    a = _random_psd(np.random.default_rng(3), 8)
    assert re_estimate(a, [0, 4], seed=9) == re_estimate(a, [0, 4], seed=9)
    assert re_estimate(a, [0, 4], seed=9).to_dict()["support"] == [0, 4]


def test_hessian_re_dominates_scaled_gram_re():
    # H = (1/n) sum w_t x_t x_t' >= c G with c = min w_t, so the cone constants obey the same order
    rng = np.random.default_rng(4)
    theta = np.array([0.6, 0.0, 0.9, 0.3])
    x = rng.random((300, 4)) < 0.5
    x[:, 0] |= ~x.any(axis=1)
    y = rng.random(300) < 1 - np.exp(-(x @ theta))
    ms = _ms(x, y)
    loss = NegLogLikelihood(ms, "ic")
    c = loss.row_weights(theta).min()
    h, g = loss.hessian(theta), gram_matrix(ms)
    support = [0, 2]
    assert re_estimate(h, support).gamma_upper >= c * re_estimate(g, support).gamma_upper - 1e-9
    assert cone_min_rayleigh(h, support) >= c * cone_min_rayleigh(g, support) - 1e-9


# --- link constants -------------------------------------------------------


def test_voter_constants_closed_form():
    x = np.array([[1, 0], [0, 1], [1, 0]])
    lf = lf_constants("voter", x, np.array([0.5, 0.5]))
    # |(log z)'| = |(log(1-z))'| = 2 at z = 0.5
    assert lf.max_first == pytest.approx(2.0) and lf.alpha_lf == pytest.approx(0.5)
    assert lf.max_second == pytest.approx(4.0) and lf.num_used == 3


def test_ic_constants_match_per_sample_oracle():
    rng = np.random.default_rng(5)
    theta = np.array([p_to_theta(p) for p in (0.2, 0.5, 0.7)])
    x = rng.random((50, 3)) < 0.5
    x[:, 0] |= ~x.any(axis=1)
    lf = lf_constants("ic", x, theta)
    z = x @ theta
    first = max(max(1.0 / math.expm1(v), 1.0) for v in z)
    second = max(math.exp(v) / math.expm1(v) ** 2 for v in z)
    assert lf.max_first == pytest.approx(first, rel=1e-12)
    assert lf.max_second == pytest.approx(second, rel=1e-12)
    # every z is at least log(1/0.8), so (e^z - 1)^-1 <= 4
    assert lf.max_first <= 4.0 + 1e-12
    assert math.isfinite(lf.alpha_lf)


def test_single_measurement_constants():
    lf = lf_constants("ic", np.array([[1, 1]]), np.array([0.2, 0.3]))
    assert lf.max_first == pytest.approx(1.0 / math.expm1(0.5))
    assert lf.num_used == 1


def test_boundary_rows_are_excluded():
    x = np.array([[0, 0], [1, 0]])
    lf = lf_constants("ic", x, np.array([0.7, 0.0]))
    assert lf.num_used == 1
    with pytest.raises(DomainError):
        lf_constants("ic", np.array([[0, 0]]), np.array([0.7, 0.0]))
    with pytest.raises(DomainError):
        lf_constants("ic", x, np.array([-0.1, 0.0]))


# --- Hessian concentration ------------------------------------------------


def _small_graph():
    return Graph(5, "ic", {(0, 4): p_to_theta(0.4), (1, 4): p_to_theta(0.5), (2, 3): p_to_theta(0.5),
                           (3, 4): p_to_theta(0.3)})


def test_sample_measurements_count_and_determinism():
    g = _small_graph()
    a = sample_measurements(g, "ic", 4, 123, seed=3, p_init=0.3)
    b = sample_measurements(g, "ic", 4, 123, seed=3, p_init=0.3)
    assert a.n == 123
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)


def test_concentration_single_sample():
    g = _small_graph()
    rep = hessian_concentration(g, "ic", 4, [1], trials=1, seed=2, p_init=0.3, re_samples=50)
    (n, t, dev, _, _), = rep.rows
    ms = sample_measurements(g, "ic", 4, 1, seed=derive_seed(2, 2, 0, 0), p_init=0.3)
    h = NegLogLikelihood(ms, "ic").hessian(g.column(4))
    assert (n, t) == (1, 0)
    assert dev == pytest.approx(np.max(np.abs(h - rep.expected_hessian)), abs=0)
    assert rep.support == (0, 1, 3)


def test_concentration_report_csv():
    rep = hessian_concentration(_small_graph(), "ic", 4, [20, 200], trials=3, seed=1, p_init=0.3, re_samples=50)
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(CONCENTRATION_HEADER)
    assert len(lines) == 1 + 6
    summary = rep.summary()
    assert [s[0] for s in summary] == [20, 200]
    assert summary[1][1] < summary[0][1]
    assert all(0 <= s[2] <= 1 for s in summary)


def test_concentration_errors():
    g = _small_graph()
    with pytest.raises(ParameterError):
        hessian_concentration(g, "ic", 0, [10], trials=1, seed=0)  # no parents
    with pytest.raises(ParameterError):
        hessian_concentration(g, "ic", 9, [10], trials=1, seed=0)
    with pytest.raises(ParameterError):
        hessian_concentration(g, "ic", 4, [10], trials=0, seed=0)


@pytest.mark.slow
def test_concentration_at_large_n():
    # strong parents keep the curvature weights e^-z / (1 - e^-z)^2 of order one
    g = Graph(5, "ic", {(0, 4): p_to_theta(0.7), (1, 4): p_to_theta(0.6), (2, 3): p_to_theta(0.5),
                        (3, 4): p_to_theta(0.8)})
    rep = hessian_concentration(g, "ic", 4, [100_000], trials=1, seed=0, p_init=0.3, re_samples=200)
    assert rep.summary()[0][1] < 0.01
