import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibts import gradcore as gc
from ibts import metrics
from ibts.explainer import BaselineDistribution, loss_kl_dist
from oracles import brute_aup_aur, brute_auprc, brute_auroc


@st.composite
def score_truth(draw, max_cells=30):
    n = draw(st.integers(2, max_cells))
    levels = draw(st.integers(1, 8))
    # coarse levels force ties, which exercise the run handling
    scores = np.array(draw(st.lists(st.integers(0, levels), min_size=n, max_size=n))) / levels
    truth = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    if not truth.any():
        truth[draw(st.integers(0, n - 1))] = True
    return scores, truth


# -- AUP / AUR -------------------------------------------------------------------
def test_perfect_scores():
    truth = np.array([[1, 0, 0, 1, 1, 0]])
    aup, aur = metrics.aup_aur(truth.astype(float), truth)
    assert aup == 1.0 and aur == 1.0
    assert metrics.auprc(truth.astype(float), truth) == 1.0


def test_constant_half_scores():
    # tau < 0.5 selects every cell (P = R = 0.5 * ...); tau > 0.5 selects nothing (P = 1, R = 0)
    truth = np.array([1, 0] * 50)
    aup, aur = metrics.aup_aur(np.full(100, 0.5), truth, n_thresholds=1000)
    assert aur == pytest.approx(0.5)
    assert aup == pytest.approx(0.5 * 0.5 + 0.5 * 1.0)


def test_four_cell_sweep():
    s, q = np.array([0.9, 0.6, 0.4, 0.1]), np.array([1, 1, 0, 0])
    aup, aur = metrics.aup_aur(s, q)
    bp, br = brute_aup_aur(s, q)
    assert abs(aup - bp) <= 1 / 200 and abs(aur - br) <= 1 / 200
    # exact values on the 200-point midpoint grid
    taus = (np.arange(200) + 0.5) / 200
    assert aur == pytest.approx(np.mean(((s[0] >= taus).astype(float) + (s[1] >= taus)) / 2))


def test_aup_aur_errors():
    with pytest.raises(ValueError, match="undefined recall"):
        metrics.aup_aur(np.array([0.2, 0.3]), np.array([0, 0]))
    with pytest.raises(ValueError):
        metrics.aup_aur(np.array([1.2, 0.3]), np.array([1, 0]))


@settings(max_examples=200, deadline=None)
@given(score_truth())
def test_aup_aur_match_brute_force(case):
    s, q = case
    aup, aur = metrics.aup_aur(s, q)
    bp, br = brute_aup_aur(s, q)
    assert aup == pytest.approx(bp, abs=1e-12)
    assert aur == pytest.approx(br, abs=1e-12)


# -- AUPRC ------------------------------------------------------------------------
def test_auprc_inverted_four_cell():
    # PR points (0,1) (0,0) (0,0) (1/2,1/3) (1,1/2): trapezoids 0 + 1/12 + 5/24 = 7/24
    s, q = np.array([0.1, 0.4, 0.6, 0.9]), np.array([1, 1, 0, 0])
    assert metrics.auprc(s, q) == pytest.approx(7 / 24)
    assert metrics.auprc(s, q) == pytest.approx(brute_auprc(s, q))


@settings(max_examples=200, deadline=None)
@given(score_truth())
def test_auprc_matches_brute_force(case):
    s, q = case
    assert metrics.auprc(s, q) == pytest.approx(brute_auprc(s, q), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(score_truth(), st.floats(0.2, 5.0))
def test_monotone_transform_invariance(case, power):
    s, q = case
    t = s ** power  # strictly increasing on [0, 1], range-preserving
    assert metrics.auprc(t, q) == pytest.approx(metrics.auprc(s, q), abs=1e-12)


def test_pooling_over_instances():
    s = np.random.default_rng(0).random((3, 5, 2))
    q = (np.random.default_rng(1).random((3, 5, 2)) < 0.4).astype(int)
    assert metrics.auprc(s, q) == metrics.auprc(s.ravel(), q.ravel())


# -- AUROC ------------------------------------------------------------------------
def test_auroc_examples():
    assert metrics.auroc([1, 0, 1, 0], [0.9, 0.8, 0.7, 0.1]) == 0.75
    assert metrics.auroc([1, 1, 0], [0.9, 0.8, 0.1]) == 1.0
    assert metrics.auroc([1, 0, 1, 0], [0.3] * 4) == 0.5
    with pytest.raises(ValueError):
        metrics.auroc([1, 1], [0.1, 0.2])


@settings(max_examples=100, deadline=None)
@given(score_truth())
def test_auroc_matches_pair_count(case):
    s, q = case
    if q.all():
        return
    assert metrics.auroc(q, s) == pytest.approx(brute_auroc(q, s), abs=1e-12)


def test_macro_f1_and_multiclass():
    y = np.array([0, 0, 1, 1, 2, 2])
    assert metrics.macro_f1(y, y, 3) == 1.0
    # class 0: tp1 fp0 fn1 -> 2/3; class 1: tp2 fp1 -> 0.8; class 2: tp2 -> 1
    pred = np.array([0, 1, 1, 1, 2, 2])
    assert metrics.macro_f1(y, pred, 3) == pytest.approx((2 / 3 + 0.8 + 1) / 3)
    proba = np.eye(3)[y]
    assert metrics.multiclass_auroc(y, proba) == 1.0


# -- faithfulness -------------------------------------------------------------------
def linear_model(w):
    def proba(X):
        z = X.reshape(len(X), -1) @ w
        p = 1 / (1 + np.exp(-z))
        return np.stack([1 - p, p], axis=1)
    return proba


@pytest.fixture
def toy():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 6, 2))
    w = np.zeros(12)
    w[:3] = 3.0
    Y = (X.reshape(200, -1) @ w > 0).astype(int)
    base = BaselineDistribution(np.zeros((6, 2)), np.ones((6, 2)))
    return linear_model(w), X, Y, base, w


def test_occlusion_k0_is_identity(toy):
    f, X, Y, base, _ = toy
    out = metrics.occlusion_curve(f, X, Y, np.random.default_rng(1).random(X.shape), [50], base,
                                  np.random.default_rng(2))
    assert out[0]["auroc"] == metrics.multiclass_auroc(Y, f(X))
    with pytest.raises(ValueError):
        metrics.occlusion_curve(f, X, Y, X, [100], base, np.random.default_rng(2))


def test_occlusion_informative_scores_win(toy):
    f, X, Y, base, w = toy
    good = np.broadcast_to(np.abs(w).reshape(6, 2), X.shape) + 0.01 * np.random.default_rng(3).random(X.shape)
    rand = np.random.default_rng(4).random(X.shape)
    g = metrics.occlusion_curve(f, X, Y, good, [75], base, np.random.default_rng(5))
    r = metrics.occlusion_curve(f, X, Y, rand, [75], base, np.random.default_rng(5))
    assert g[75]["auroc"] > r[75]["auroc"]


def test_substitution(toy):
    f, X, Y, base, w = toy
    good = np.broadcast_to(np.abs(w).reshape(6, 2), X.shape) + 0.01 * np.random.default_rng(3).random(X.shape)
    rand = np.random.default_rng(4).random(X.shape)
    for mode in ("mean", "zero"):
        g = metrics.top_substitution(f, X, Y, good, 0.25, mode, np.zeros((6, 2)))
        r = metrics.top_substitution(f, X, Y, rand, 0.25, mode, np.zeros((6, 2)))
        assert g["accuracy"] < r["accuracy"]
    with pytest.raises(ValueError):
        metrics.top_substitution(f, X, Y, good, 1.0)


def test_substitution_small_frac_and_zero_data(toy):
    f, X, Y, _, _ = toy
    ref = metrics.multiclass_auroc(Y, f(X))
    assert metrics.top_substitution(f, X, Y, X, 0.01, "zero")["auroc"] == ref
    Z = np.zeros_like(X)
    Yz = np.r_[np.zeros(100, int), np.ones(100, int)]
    assert metrics.top_substitution(f, Z, Yz, X, 0.5, "zero") == metrics.top_substitution(f, Z, Yz, X, 0.01, "zero")


# -- distribution shift --------------------------------------------------------------
def test_kde_separation_and_finiteness():
    X = np.random.default_rng(0).normal(size=(200, 8, 2))
    own = metrics.kde_loglik(X, X)
    assert np.isfinite(own)
    assert own > metrics.kde_loglik(X, X + 10 * X.std())


def test_kde_bandwidth_stability():
    rng = np.random.default_rng(1)
    A, B, probe = rng.normal(size=(300, 6)), rng.normal(size=(600, 6)), rng.normal(size=(200, 6))
    a, b = metrics.kde_loglik(A, probe), metrics.kde_loglik(B, probe)
    assert abs(a - b) <= 0.2 * abs(b)


def test_kde_degenerate():
    X = np.zeros((20, 5))
    X[:, 0] = np.arange(20)
    with pytest.raises(ValueError, match="smaller q"):
        metrics.kde_loglik(X, X)


def test_kl_estimate():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(50_000, 3))
    assert metrics.kl_divergence_estimate(P, P) == pytest.approx(0.0, abs=1e-9)
    # standardise exactly so the shifted copy has identical moments
    P = (P - P.mean(0)) / P.std(0)
    assert metrics.kl_divergence_estimate(P, P + 0.7) == pytest.approx(0.7 ** 2 / 2, abs=1e-9)
    with pytest.raises(ValueError):
        metrics.kl_divergence_estimate(P[:1], P[:1])


def test_kl_estimate_agrees_with_loss():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(16, 5, 2)), rng.normal(1.0, 2.0, size=(16, 5, 2))
    assert metrics.kl_divergence_estimate(A, B) == pytest.approx(
        loss_kl_dist(gc.Tensor(A), gc.Tensor(B)).item(), abs=1e-9)


def test_mmd():
    rng = np.random.default_rng(4)
    P = rng.normal(size=(200, 3))
    same = metrics.mmd_rbf(P[:100], P[100:])
    assert abs(same) < 0.05
    far = rng.normal(size=(100, 3)) + 5.0
    assert metrics.mmd_rbf(P[:100], far) > 0.5
    assert metrics.mmd_rbf(P[:100], far) == pytest.approx(metrics.mmd_rbf(far, P[:100]))
    with pytest.raises(ValueError):
        metrics.mmd_rbf(np.ones((5, 2)), np.ones((5, 2)))

