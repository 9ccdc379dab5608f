import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import rankdata

from ecgnoise import evaluation as ev
from ecgnoise.evaluation import ScoredSample, UndefinedMetricError

from oracles import pairwise_auroc, threshold_auprc

POS = [0.9, 0.4]
NEG = [0.5, 0.1]


def example():
    return [ScoredSample(s, True) for s in POS] + [ScoredSample(s, False) for s in NEG]


def test_auroc_hand_example():
    assert ev.auroc(example()) == 0.75


def test_auprc_hand_example():
    assert ev.auprc(example()) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-4)


def test_perfect_and_tied():
    s = np.array([3.0, 2.0, 1.0, 0.0])
    y = np.array([1, 1, 0, 0], bool)
    assert ev.auroc(s, y) == 1.0 and ev.auprc(s, y) == 1.0
    flat = np.zeros(5)
    y5 = np.array([1, 0, 0, 1, 0], bool)
    assert ev.auroc(flat, y5) == 0.5
    assert ev.auprc(flat, y5) == pytest.approx(2 / 5)


def test_undefined_metric():
    with pytest.raises(UndefinedMetricError, match="undefined metric"):
        ev.auroc(np.array([1.0, 2.0]), np.array([True, True]))
    with pytest.raises(UndefinedMetricError):
        ev.auprc(np.array([1.0, 2.0]), np.array([False, False]))


score_sets = st.integers(2, 200).flatmap(
    lambda n: st.tuples(
        st.lists(st.integers(0, 12), min_size=n, max_size=n),  # small range forces ties
        st.lists(st.booleans(), min_size=n, max_size=n),
    )
)


@settings(max_examples=80, deadline=None)
@given(score_sets)
def test_metrics_match_brute_force_oracles(data):
    scores, labels = data
    if all(labels) or not any(labels):
        return
    s = np.array(scores, float) / 7.0
    y = np.array(labels)
    assert ev.auroc(s, y) == pairwise_auroc(s, y)
    assert abs(ev.auprc(s, y) - threshold_auprc(s, y)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 60))
def test_auroc_invariances(seed, n):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=n)
    y = rng.random(n) < 0.5
    if y.all() or not y.any():
        return
    base = ev.auroc(s, y)
    assert ev.auroc(np.exp(3 * s) + 1, y) == base
    assert ev.auroc(rankdata(s), y) == base
    # no ties in continuous data
    assert ev.auroc(s, ~y) == pytest.approx(1 - base, abs=1e-12)


def test_noisiness_sign():
    np.testing.assert_array_equal(ev.to_noisiness([-1.0, 0.0, -3.0]), [1.0, 0.0, 3.0])


# -- PCA ----------------------------------------------------------------------


def test_pca_line():
    t = np.linspace(-2, 3, 25)
    x = np.c_[t, 2 * t]
    m = ev.pca_fit(x)
    np.testing.assert_allclose(m.components[0], np.array([1.0, 2.0]) / np.sqrt(5), atol=1e-12)
    assert m.explained_variance[1] < 1e-20
    np.testing.assert_allclose(ev.pca_project(m, x.mean(axis=0)[None]), [[0.0, 0.0]], atol=1e-12)


def test_pca_isotropic():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4000, 2))
    m = ev.pca_fit(x)
    assert m.explained_variance[0] / m.explained_variance[1] < 1.15
    p = ev.pca_project(m, x[:20])
    d_orig = np.linalg.norm(x[:20, None] - x[None, :20], axis=2)
    d_proj = np.linalg.norm(p[:, None] - p[None], axis=2)
    np.testing.assert_allclose(d_proj, d_orig, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 30), st.integers(2, 6))
def test_pca_properties(seed, n, d):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d)) * rng.uniform(0.1, 5, size=d)
    m = ev.pca_fit(x)
    np.testing.assert_allclose(m.components @ m.components.T, np.eye(2), atol=1e-8)
    assert m.explained_variance[0] >= m.explained_variance[1] >= 0
    total = np.sum(np.var(x, axis=0, ddof=1))
    proj = ev.pca_project(m, x)
    assert np.sum(np.var(proj, axis=0, ddof=1)) <= total * (1 + 1e-10)
    for row in m.components:
        assert row[np.argmax(np.abs(row))] > 0


def test_pca_rank2_preserves_variance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(30, 2)) @ rng.normal(size=(2, 5))
    proj = ev.pca_project(ev.pca_fit(x), x)
    assert np.sum(np.var(proj, axis=0)) == pytest.approx(np.sum(np.var(x, axis=0)), rel=1e-10)


def test_pca_too_few():
    with pytest.raises(ValueError):
        ev.pca_fit(np.zeros((1, 3)))


# -- balanced evaluation ------------------------------------------------------


def test_balancing_100_40():
    clean, noisy = ev.balanced_indices(100, 40, seed=3)
    assert clean.size == noisy.size == 40
    assert len(set(clean)) == 40 and clean.max() < 100
    np.testing.assert_array_equal(noisy, np.arange(40))
    cells = ev.evaluate_scores(np.zeros(100), -np.ones(40), seeds=[1, 2])
    assert all(c.n_pos == c.n_neg == 40 for c in cells)


def test_evaluate_scores_rank_invariant():
    rng = np.random.default_rng(5)
    clean = rng.normal(size=60)
    noisy = rng.normal(size=30) - 1
    both = np.r_[clean, noisy]
    ranks = rankdata(both)
    a = ev.evaluate_scores(clean, noisy, [1, 2, 3])
    b = ev.evaluate_scores(ranks[:60], ranks[60:], [1, 2, 3])
    assert a[0].values == b[0].values


def test_evaluate_report_structure():
    from ecgnoise.signal_io import Dataset

    rng = np.random.default_rng(6)
    clean = Dataset.from_array(rng.normal(size=(20, 8)), 256.0, [1] * 20)
    noisy = Dataset.from_array(3 * rng.normal(size=(10, 8)), 256.0, [3] * 10)
    report = ev.evaluate(lambda ds: -np.abs(ds.matrix()).mean(axis=1), clean, noisy, [1, 2, 3, 4, 5],
                         method="energy", level="Level 3")
    cell = report.get("energy", "Level 3", "AUROC")
    assert cell.seeds == [1, 2, 3, 4, 5] and len(cell.values) == 5
    assert 0 <= cell.mean <= 1
    lines = report.to_csv().splitlines()
    assert lines[0] == "method,level,metric,mean,std,seeds"
    assert lines[1].startswith("energy,Level 3,AUROC,") and lines[1].endswith(",1;2;3;4;5")
    assert len(lines) == 3
    assert "energy" in report.to_text()


def test_evaluate_empty():
    with pytest.raises(ValueError):
        ev.evaluate_scores(np.array([]), np.ones(3), [1])


def test_pca_csv():
    text = ev.pca_csv(np.array([[1.0, 2.0], [0.5, -1.0]]), [1, 3])
    assert text.splitlines() == ["pc1,pc2,level", "1.000000,2.000000,1", "0.500000,-1.000000,3"]
