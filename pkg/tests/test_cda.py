import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxalign.cda import (CriticalSet, DomainError, ObjectiveWeights, circulated_loss,
                          circulated_score_loss, critical_pairs, csa_to_resolution,
                          occupancy_confidence, pair_across_resolutions, select_critical,
                          softmax_backward, top_k, total_objective, voxel_distributions)
from voxalign.csa import LossReport, softmax
from voxalign.grid import GridDims, GridError, ResolutionPair, linear_index, unravel_index
from voxalign.lift import FeatureGrid, ScoreGrid
from voxalign.synth import oracle_grad, oracle_topk

from .conftest import make_geom


def scores(values):
    values = np.asarray(values, dtype=float)
    return FeatureGrid(make_geom(*values.shape[:3]), values)


def conf_grid(values):
    values = np.asarray(values, dtype=float)
    return ScoreGrid(make_geom(*values.shape), values)


def test_confidence_examples():
    z = np.zeros((1, 1, 2, 4))
    z[0, 0, 1] = [np.log(3), 0, 0, 0]
    c = occupancy_confidence(scores(z)).scores.ravel()
    assert c[0] == pytest.approx(0.25)
    assert c[1] == pytest.approx(0.5)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_confidence_bounds(seed, n):
    z = np.random.default_rng(seed).normal(scale=5, size=(2, 2, 2, n))
    c = occupancy_confidence(scores(z)).scores
    assert (c >= 1 / n - 1e-12).all() and (c <= 1).all()


def test_csa_block_max(rng):
    s = rng.uniform(size=(4, 6, 2))
    out = csa_to_resolution(s, (2, 3, 1))
    for x in range(2):
        for y in range(3):
            assert out[x, y, 0] == s[2 * x:2 * x + 2, 2 * y:2 * y + 2, :].max()
    mean = csa_to_resolution(s, (2, 3, 1), mode="mean")
    assert mean[1, 2, 0] == pytest.approx(s[2:4, 4:6, :].mean())
    assert np.array_equal(csa_to_resolution(s, (4, 6, 2)), s)
    with pytest.raises(GridError):
        csa_to_resolution(s, (3, 3, 1))


def test_select_example():
    c = select_critical(conf_grid([[[0.9, 0.1, 0.5]]]), np.ones((1, 1, 3)), 2)
    assert c.indices.tolist() == [0, 2]
    np.testing.assert_allclose(c.ranking_score, [0.9, 0.5])


def test_select_ties_prefer_small_index():
    assert top_k(np.ones(10), 4).tolist() == [0, 1, 2, 3]
    assert top_k(np.array([0.2, 0.5, 0.2, 0.5, 0.2]), 3).tolist() == [1, 3, 0]


def test_select_uses_product(rng):
    conf = np.array([[[0.9, 0.6, 0.5]]])
    s = np.array([[[0.5, 1.0, 10.1]]])
    assert select_critical(conf_grid(conf), s, 1).indices.tolist() == [2]


@settings(max_examples=60)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=60), st.data())
def test_top_k_matches_sort_oracle(vals, data):
    v = np.asarray(vals, dtype=float) / 4
    k = data.draw(st.integers(1, len(vals)))
    assert top_k(v, k).tolist() == oracle_topk(v.tolist(), k)


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100))
def test_selection_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    conf = rng.uniform(size=(3, 3, 3))
    s = rng.integers(1, 5, size=(3, 3, 3)) / 2
    a = select_critical(conf_grid(conf), s, 7).indices
    b = select_critical(conf_grid(conf), s * c, 7).indices
    assert set(a) == set(b)


def test_select_k_errors():
    with pytest.raises(GridError):
        select_critical(conf_grid(np.ones((1, 1, 3))), np.ones((1, 1, 3)), 4)
    with pytest.raises(GridError):
        top_k(np.ones(3), 0)
    with pytest.raises(DomainError):
        top_k(np.array([0.1, np.nan]), 1)


def test_pair_example():
    pair = ResolutionPair((8, 8, 8), (4, 4, 4))
    hi = linear_index((5, 3, 7), pair.high)
    lo = pair_across_resolutions([hi], pair)[0]
    assert unravel_index(int(lo), pair.low) == (2, 1, 3)


@settings(max_examples=30)
@given(st.integers(0, 16 * 8 * 4 - 1))
def test_pair_containment(idx):
    pair = ResolutionPair((16, 8, 4), (4, 2, 1))
    lo = int(pair_across_resolutions([idx], pair)[0])
    hx, hy, hz = unravel_index(idx, pair.high)
    lx, ly, lz = unravel_index(lo, pair.low)
    lam = pair.ratio
    assert lam * lx <= hx < lam * (lx + 1)
    assert lam * ly <= hy < lam * (ly + 1)
    assert lam * lz <= hz < lam * (lz + 1)


def test_distributions():
    z = np.zeros((1, 1, 3, 2))
    z[0, 0, 1] = [np.log(3), 0]
    d = voxel_distributions(scores(z), [1, 0])
    np.testing.assert_allclose(d, [[0.75, 0.25], [0.5, 0.5]])


def test_critical_set_validation():
    with pytest.raises(GridError):
        CriticalSet(GridDims(2, 2, 2), [1, 1], [0.1, 0.2])
    with pytest.raises(GridError):
        CriticalSet(GridDims(2, 2, 2), [0], [0.1], distributions=[[0.3, 0.3]])


def test_critical_pairs_modes(rng):
    pair = ResolutionPair((4, 4, 4), (2, 2, 2))
    ch = conf_grid(rng.uniform(size=(4, 4, 4)))
    cl = conf_grid(rng.uniform(size=(2, 2, 2)))
    s_hi = rng.uniform(0.5, 10, size=(4, 4, 4))
    crit, low = critical_pairs(ch, s_hi, 5, pair)
    assert np.array_equal(low, pair_across_resolutions(crit.indices, pair))
    crit2, low2 = critical_pairs(ch, s_hi, 5, pair, "independent", cl, csa_to_resolution(s_hi, pair.low))
    assert np.array_equal(crit2.indices, crit.indices)
    assert np.array_equal(low2, select_critical(cl, csa_to_resolution(s_hi, pair.low), 5).indices)
    with pytest.raises(ValueError):
        critical_pairs(ch, s_hi, 5, pair, "independent")


def test_circulated_example():
    rep = circulated_loss([[0.75, 0.25]], [[0.5, 0.5]])
    assert rep.value == pytest.approx(0.274653, abs=1e-5)
    assert rep.value == pytest.approx(np.log(3) / 4, abs=1e-15)


def test_circulated_identical_and_empty():
    p = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert circulated_loss(p, p).value == 0
    assert circulated_loss(np.zeros((0, 3)), np.zeros((0, 3))).value == 0


def test_circulated_clamps_zeros():
    rep = circulated_loss([[1.0, 0.0]], [[0.0, 1.0]])
    assert np.isfinite(rep.value) and rep.value > 0
    with pytest.raises(DomainError):
        circulated_loss([[1.1, -0.1]], [[0.5, 0.5]])
    with pytest.raises(GridError):
        circulated_loss([[0.5, 0.5]], [[1.0]])


def dirichlet_rows(seed, k, n):
    return np.random.default_rng(seed).dirichlet(np.ones(n), size=k)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(2, 5))
def test_circulated_symmetric_and_nonnegative(seed, k, n):
    a = dirichlet_rows(seed, k, n)
    b = dirichlet_rows(seed + 1, k, n)
    assert circulated_loss(a, b).value == pytest.approx(circulated_loss(b, a).value, rel=1e-12, abs=1e-15)
    assert circulated_loss(a, b).value >= 0


@pytest.mark.parametrize("seed", range(5))
def test_circulated_gradient_fd(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.05, 0.95, size=(4, 3))
    b = rng.uniform(0.05, 0.95, size=(4, 3))
    rep = circulated_loss(a, b)
    g1 = oracle_grad(lambda x: circulated_loss(x, b).value, a, 1e-6)
    g2 = oracle_grad(lambda x: circulated_loss(a, x).value, b, 1e-6)
    np.testing.assert_allclose(rep.gradient[0], g1, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(rep.gradient[1], g2, rtol=1e-5, atol=1e-8)


def test_softmax_backward_fd(rng):
    z = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))
    got = softmax_backward(softmax(z), w)
    fd = oracle_grad(lambda x: float(np.sum(softmax(x) * w)), z, 1e-6)
    np.testing.assert_allclose(got, fd, rtol=1e-6, atol=1e-9)


def test_score_loss_gradient_fd(rng):
    pair = ResolutionPair((4, 4, 2), (2, 2, 1))
    zh = rng.normal(size=(4, 4, 2, 3))
    zl = rng.normal(size=(2, 2, 1, 3))
    hi = np.array([0, 5, 17, 30])
    lo = pair_across_resolutions(hi, pair)
    gh, gl = make_geom(4, 4, 2), make_geom(2, 2, 1)

    def f(a, b):
        return circulated_score_loss(FeatureGrid(gh, a), FeatureGrid(gl, b), hi, lo).value

    rep = circulated_score_loss(FeatureGrid(gh, zh), FeatureGrid(gl, zl), hi, lo)
    np.testing.assert_allclose(rep.gradient[0], oracle_grad(lambda a: f(a, zl), zh, 1e-6), atol=1e-8)
    np.testing.assert_allclose(rep.gradient[1], oracle_grad(lambda b: f(zh, b), zl, 1e-6), atol=1e-8)


def _rep(v, shape, fill):
    return LossReport(v, np.full(shape, fill))


def test_total_objective_defaults():
    terms = [{"csa_ce": _rep(1.0, (2,), 1.0), "lovasz": _rep(5.0, (2,), 9.0)},
             {"csa_ce": _rep(2.0, (3,), 2.0)}]
    circ = LossReport(0.5, (np.full(2, 0.1), np.full(3, 0.2)))
    out = total_objective(terms, ObjectiveWeights(gamma=2.0), circ)
    assert out.value == pytest.approx(4.0)
    np.testing.assert_allclose(out.gradient[0], 1.2)
    np.testing.assert_allclose(out.gradient[1], 2.4)


def test_total_objective_toggles_and_gamma_zero():
    calls = []

    def lazy():
        calls.append(1)
        return _rep(3.0, (2,), 1.0)

    terms = [{"csa_ce": _rep(1.0, (2,), 1.0), "scal": lazy}]
    w = ObjectiveWeights(gamma=0.0, toggles=[{"csa_ce": False}])
    out = total_objective(terms, w, LossReport(9.0, (np.ones(2),)))
    assert out.value == 0 and not calls
    np.testing.assert_array_equal(out.gradient[0], 0.0)
    w = ObjectiveWeights(gamma=1.0, toggles=[{"scal": True}])
    out = total_objective(terms, w)
    assert out.value == 4.0 and calls == [1]
    with pytest.raises(ValueError):
        ObjectiveWeights(gamma=-1)
