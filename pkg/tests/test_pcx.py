import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptlrp.pcx import (VAR_FLOOR, ConceptMatrix, assign, calibrate_outliers, centered_cosine, cosine_similarity,
                            difference_to_prototype, fit_gmm, k_diagnostic, normalize_vector, outlier_score,
                            prototype_summary)


def two_blobs(n=200, sep=10.0, sigma=0.5, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    X = rng.normal(0.0, sigma, (n, 2)) + labels[:, None] * sep
    return X, labels


def best_agreement(pred, truth, k):
    return max(np.mean(np.array(p)[pred] == truth) for p in itertools.permutations(range(k)))


def monotone_segments(model, tol=1e-9):
    cuts = [0] + list(model.reseeded) + [len(model.history)]
    for a, b in zip(cuts, cuts[1:]):
        seg = np.array(model.history[a:b])
        if len(seg) > 1 and np.min(np.diff(seg)) < -tol:
            return False
    return True


# ---- normalisation


def test_rows_normalised_and_zero_rows_excluded(caplog):
    raw = np.array([[2.0, -2.0, 4.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    m = ConceptMatrix.from_raw(raw, ["a", "b", "c"], "l")
    np.testing.assert_allclose(np.abs(m.values).sum(axis=1), 1.0)
    np.testing.assert_allclose(m.values[0], [0.25, -0.25, 0.5])
    assert m.sample_ids == ["a", "c"] and m.excluded == ["b"]
    with pytest.raises(ValueError):
        normalize_vector(np.zeros(3))


# ---- fit


def test_k1_closed_form(rng):
    X = rng.standard_normal((50, 4))
    g = fit_gmm(X, 1, seed=3)
    np.testing.assert_allclose(g.means[0], X.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(g.variances[0], np.maximum(X.var(axis=0), VAR_FLOOR), atol=1e-12)
    assert g.weights.tolist() == [1.0]


def test_two_cluster_recovery():
    X, labels = two_blobs()
    g = fit_gmm(X, 2, seed=0)
    order = np.argsort(g.means[:, 0])
    np.testing.assert_allclose(g.means[order], [[0, 0], [10, 10]], atol=0.1)
    assert best_agreement(g.predict(X), labels, 2) >= 0.99


@pytest.mark.parametrize("k", [4, 10])
def test_reference_cluster_counts_fit(k, rng):
    # the cluster counts used for car detection (4) and segmentation (10)
    X = np.abs(rng.standard_normal((120, 8)))
    m = ConceptMatrix.from_raw(X)
    g = fit_gmm(m, k, seed=0)
    assert g.k == k and abs(g.weights.sum() - 1) < 1e-12 and np.all(g.weights > 0)
    assert np.all(g.variances >= VAR_FLOOR)


def test_errors_and_degenerate_component():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((2, 3)), 3)
    # nine identical rows and one outlier cannot support three components
    X = np.vstack([np.ones((9, 2)), [[5.0, 5.0]]])
    g = fit_gmm(X, 3, seed=0)
    assert np.all(g.weights > 0) and abs(g.weights.sum() - 1) < 1e-12
    assert np.all(g.variances >= VAR_FLOOR)
    assert g.reseeded and g.warnings


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(1, 5), n=st.integers(20, 80))
def test_em_monotone(seed, k, n):
    rng = np.random.default_rng(seed)
    X = ConceptMatrix.from_raw(rng.standard_normal((n, 5)) + (rng.random((n, 1)) < 0.3) * 3).values
    g = fit_gmm(X, k, seed=seed % 1000, max_iter=100, tol=0.0)
    assert monotone_segments(g)


def test_fit_is_deterministic(rng):
    X = rng.standard_normal((60, 4))
    a = json.dumps(fit_gmm(X, 3, seed=9).to_dict())
    b = json.dumps(fit_gmm(X.copy(), 3, seed=9).to_dict())
    assert a == b


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), k=st.integers(2, 4))
def test_known_mixture_recovery(seed, k):
    rng = np.random.default_rng(seed)
    centers = np.array([[10.0 * i, -10.0 * i, 5.0 * (i % 2)] for i in range(k)])
    labels = rng.integers(k, size=300)
    X = centers[labels] + rng.normal(0, 1.0, (300, 3))
    g = fit_gmm(X, k, seed=0)
    assert best_agreement(g.predict(X), labels, k) >= 0.99


# ---- assign


def _separated():
    rng = np.random.default_rng(2)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    X = np.vstack([c + rng.normal(0, 0.3, (40, 2)) for c in centers])
    return fit_gmm(X, 3, seed=0), X


def test_assign_at_mean():
    g, _ = _separated()
    a = assign(g.means[2], g)
    assert a.component == 2 and a.responsibilities[2] > 1 - 1e-9
    with pytest.raises(ValueError):
        assign(np.zeros(3), g)


def test_assign_k1_and_normalised(rng):
    X = rng.standard_normal((30, 3))
    g1 = fit_gmm(X, 1)
    assert all(assign(v, g1).component == 0 for v in rng.standard_normal((10, 3)))
    g, _ = _separated()
    for v in rng.normal(0, 20, (50, 2)):
        assert abs(assign(v, g).responsibilities.sum() - 1) < 1e-12


def test_assign_ties_go_to_lower_component():
    from conceptlrp.pcx import GmmModel
    g = GmmModel(np.array([0.5, 0.5]), np.array([[1.0], [-1.0]]), np.ones((2, 1)))
    assert assign(np.array([0.0]), g).component == 0


# ---- summary, cosine


def test_summary_k1(rng):
    X = np.abs(rng.standard_normal((40, 5)))
    g = fit_gmm(X, 1)
    s = prototype_summary(g, X)
    assert s.prototypes[0].coverage == 100.0
    assert s.prototypes[0].similarity == pytest.approx(1.0, abs=1e-12)


def test_summary_balanced_clusters():
    X, _ = two_blobs(400)
    s = prototype_summary(fit_gmm(X, 2), X)
    cov = sorted(p.coverage for p in s.prototypes)
    assert sum(cov) == pytest.approx(100.0, abs=0.1)
    assert abs(cov[0] - 50) < 5


def test_atypical_cluster_has_strongly_negative_similarity():
    rng = np.random.default_rng(0)
    common = np.array([0.45, 0.45, 0.05, 0.05])
    rare = np.array([0.05, 0.05, 0.45, 0.45])
    X = np.vstack([common + rng.normal(0, 0.01, (90, 4)), rare + rng.normal(0, 0.01, (10, 4))])
    m = ConceptMatrix.from_raw(X)
    s = prototype_summary(fit_gmm(m, 2), m)
    small = min(s.prototypes, key=lambda p: p.coverage)
    assert small.coverage == pytest.approx(10.0)
    assert -1.0 <= small.similarity < -0.9
    # uncentred, every cosine is close to 1 on simplex-like rows and cannot flag this
    assert cosine_similarity(rare, m.values.mean(axis=0)) > 0.3


def test_cosine_basics():
    a = np.array([1.0, 2.0, 3.0])
    assert cosine_similarity(a, a) == pytest.approx(1.0)
    assert cosine_similarity(a, -a) == pytest.approx(-1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity(np.zeros(3), a)
    assert centered_cosine([1, 1], [1, 1]) == pytest.approx(1.0)


# ---- outliers


def test_calibration_threshold(rng):
    X = rng.standard_normal((100, 3))
    g = fit_gmm(X, 1)
    cal = calibrate_outliers(g, X, 5)
    lls = g.score_samples(X)
    assert cal.threshold == np.percentile(lls, 5)
    assert np.mean(lls < cal.threshold) == pytest.approx(0.05, abs=0.011)
    for q in (0, 50.5, -1):
        with pytest.raises(ValueError):
            calibrate_outliers(g, X, q)


def test_outlier_forced_cases():
    g, X = _separated()
    cal = calibrate_outliers(g, X, 5)
    big = int(np.argmax(g.weights))
    assert not outlier_score(g.means[big], g, cal).flag
    far = outlier_score(np.array([50 * 0.3 + 20.0, 50 * 0.3 + 20.0]), g, cal)
    assert far.flag and far.percentile == 0.0


def test_flag_rates_in_and_out_of_distribution():
    rng = np.random.default_rng(7)
    centers = np.array([[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]])

    def draw(n, shift=0.0):
        lab = rng.integers(2, size=n)
        return centers[lab] + rng.normal(0, 1, (n, 3)) + shift

    train = draw(2000)
    g = fit_gmm(train, 2, seed=0)
    cal = calibrate_outliers(g, train, 5)
    held = np.mean([outlier_score(v, g, cal).flag for v in draw(500)])
    shifted = np.mean([outlier_score(v, g, cal).flag for v in draw(500, shift=np.array([0, 3.0, 0]))])
    assert abs(held * 100 - 5) <= 3
    assert shifted > held


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(1e-3, 1e3), seed=st.integers(0, 2**31))
def test_scale_invariance(alpha, seed):
    g, X = _separated_simplex()
    cal = calibrate_outliers(g, X, 5)
    raw = np.random.default_rng(seed).uniform(0.01, 1, 3)
    a, b = normalize_vector(raw), normalize_vector(alpha * raw)
    np.testing.assert_allclose(a, b, atol=1e-15)
    assert assign(a, g).component == assign(b, g).component
    assert outlier_score(a, g, cal).flag == outlier_score(b, g, cal).flag


_CACHE = {}


def _separated_simplex():
    if "m" not in _CACHE:
        rng = np.random.default_rng(3)
        raw = np.vstack([np.array(c) + rng.uniform(0, 0.1, (50, 3)) for c in ([1, 0, 0], [0, 1, 0], [0, 0, 1])])
        m = ConceptMatrix.from_raw(raw)
        _CACHE["m"] = (fit_gmm(m, 3, seed=0), m)
    return _CACHE["m"]


# ---- difference to prototype


def test_diff_report(rng):
    g, _ = _separated_simplex()
    mu = g.means[1]
    assert all(e.delta == 0 and e.usage == "equal" for e in difference_to_prototype(mu, g, 1).entries)
    v = mu.copy()
    v[2] += 0.2
    top = difference_to_prototype(v, g, 1).entries[0]
    assert top.concept == 2 and top.usage == "over" and top.delta == pytest.approx(0.2)
    with pytest.raises(ValueError):
        difference_to_prototype(v, g, 3)


@settings(max_examples=40, deadline=None)
@given(vals=st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3))
def test_diff_order_matches_sort_oracle(vals):
    g, _ = _separated_simplex()
    v = np.array(vals)
    rep = difference_to_prototype(v, g, 0)
    deltas = v - g.means[0]
    expected = sorted(range(3), key=lambda c: (-abs(deltas[c]), c))
    assert [e.concept for e in rep.entries] == expected
    assert all(e.delta == deltas[e.concept] for e in rep.entries)


def test_k_diagnostic_prefers_true_k():
    X, _ = two_blobs(400)
    d = k_diagnostic(X[:200], X[200:], [1, 2, 3])
    assert d[2] > d[1]
