"""Saliency-quality metrics, faithfulness probes and distribution-shift diagnostics."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg, stats


@dataclass
class MetricsReport:
    AUPRC: float
    AUP: float
    AUR: float
    n_thresholds: int

    def to_dict(self):
        return asdict(self)


@dataclass
class DistShiftReport:
    kde_loglik: float
    kl_div: float
    mmd: float

    def to_dict(self):
        return asdict(self)


def _pool(scores, truth):
    s = np.asarray(scores, dtype=np.float64).ravel()
    q = np.asarray(truth).ravel().astype(bool)
    if s.shape != q.shape:
        raise ValueError(f"scores {np.shape(scores)} and truth {np.shape(truth)} differ")
    if not q.any():
        raise ValueError("truth has no salient cells: undefined recall")
    return s, q


# -- ground-truth saliency -------------------------------------------------
def aup_aur(scores, truth, n_thresholds=200):
    """Areas under the precision and recall curves over thresholds tau in (0, 1).

    Cells with ``score >= tau`` are selected. The integrals use the midpoint
    rule on ``n_thresholds`` uniform cells; an empty selection has precision 1.
    All (score, truth) pairs are pooled across instances.
    """
    s, q = _pool(scores, truth)
    if s.min() < 0 or s.max() > 1:
        raise ValueError("scores must lie in [0, 1]")
    taus = (np.arange(n_thresholds) + 0.5) / n_thresholds
    order = np.argsort(s)
    s_sorted = s[order]
    pos_sorted = q[order].astype(np.int64)
    # suffix counts: number selected / true positives selected at each tau
    first = np.searchsorted(s_sorted, taus, side="left")
    cum_pos = np.concatenate([[0], np.cumsum(pos_sorted)])
    n_sel = len(s) - first
    tp = cum_pos[-1] - cum_pos[first]
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(n_sel > 0, tp / np.maximum(n_sel, 1), 1.0)
    recall = tp / q.sum()
    return float(precision.mean()), float(recall.mean())


def precision_recall_points(scores, truth):
    """(recall, precision) at every distinct score, highest threshold first,
    preceded by the anchor point (0, 1)."""
    s, q = _pool(scores, truth)
    order = np.argsort(-s, kind="stable")
    s_desc, q_desc = s[order], q[order]
    tp = np.cumsum(q_desc)
    fp = np.cumsum(~q_desc)
    # last index of each run of tied scores
    last = np.r_[np.flatnonzero(np.diff(s_desc)), len(s_desc) - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / q.sum()
    return np.r_[0.0, recall], np.r_[1.0, precision]


def auprc(scores, truth):
    """Trapezoidal area under the pooled precision-recall curve."""
    recall, precision = precision_recall_points(scores, truth)
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))


def saliency_report(scores, truth, n_thresholds=200):
    aup, aur = aup_aur(scores, truth, n_thresholds)
    return MetricsReport(auprc(scores, truth), aup, aur, n_thresholds)


# -- classification ----------------------------------------------------------
def auroc(labels, scores):
    """Normalised Mann-Whitney U; ties count one half."""
    y = np.asarray(labels).ravel().astype(bool)
    s = np.asarray(scores, dtype=np.float64).ravel()
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes present")
    ranks = stats.rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_f1(y_true, y_pred, n_classes):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    scores = []
    for c in range(n_classes):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def multiclass_auroc(y_true, proba):
    """Macro one-vs-rest AUROC; binary problems use the positive column."""
    y_true, proba = np.asarray(y_true), np.asarray(proba)
    C = proba.shape[1]
    if C == 2:
        return auroc(y_true == 1, proba[:, 1])
    vals = [auroc(y_true == c, proba[:, c]) for c in range(C) if 0 < np.sum(y_true == c) < len(y_true)]
    return float(np.mean(vals))


def multiclass_auprc(y_true, proba):
    y_true, proba = np.asarray(y_true), np.asarray(proba)
    C = proba.shape[1]
    classes = [1] if C == 2 else range(C)
    vals = [auprc(proba[:, c], y_true == c) for c in classes if np.any(y_true == c)]
    return float(np.mean(vals))


def accuracy(y_true, proba):
    return float(np.mean(np.argmax(proba, axis=1) == np.asarray(y_true)))


# -- faithfulness ------------------------------------------------------------
def _rank_cells(scores):
    """Per-instance ascending order of flattened cells (stable on ties)."""
    flat = np.asarray(scores, dtype=np.float64).reshape(len(scores), -1)
    return np.argsort(flat, axis=1, kind="stable")


def _evaluate(predict_proba, X, Y):
    proba = predict_proba(X)
    return {"auroc": multiclass_auroc(Y, proba), "accuracy": accuracy(Y, proba)}


def occlusion_curve(predict_proba, X, Y, scores, k_list, baseline, rng):
    """Keep the top (100 - k)% cells of each instance by score and replace the
    rest with baseline draws; returns ``{k: {"auroc", "accuracy"}}``.

    ``k = 0`` is always included as the unperturbed reference.
    """
    X = np.asarray(X, dtype=np.float64)
    ks = sorted({0, *[float(k) for k in k_list]})
    if any(k < 0 or k >= 100 for k in ks):
        raise ValueError(f"percentiles must lie in [0, 100), got {k_list}")
    N = len(X)
    cells = X[0].size
    order = _rank_cells(scores)
    out = {}
    for k in ks:
        n_drop = int(round(k / 100.0 * cells))
        if n_drop == 0:
            out[k] = _evaluate(predict_proba, X, Y)
            continue
        draws = baseline.sample(rng, N).reshape(N, -1)
        Xk = X.reshape(N, -1).copy()
        rows = np.arange(N)[:, None]
        drop = order[:, :n_drop]
        Xk[rows, drop] = draws[rows, drop]
        out[k] = _evaluate(predict_proba, Xk.reshape(X.shape), Y)
    return out


def top_substitution(predict_proba, X, Y, scores, frac=0.10, mode="mean", mean=None):
    """Replace the top ``frac`` of each instance's cells by score with the
    per-(t, d) training mean (``mode='mean'``) or zero, then re-evaluate."""
    if not 0 < frac < 1:
        raise ValueError(f"frac must lie in (0, 1), got {frac}")
    if mode not in ("mean", "zero"):
        raise ValueError(f"mode must be 'mean' or 'zero', got {mode!r}")
    X = np.asarray(X, dtype=np.float64)
    N = len(X)
    n_sub = int(round(frac * X[0].size))
    if n_sub == 0:
        return _evaluate(predict_proba, X, Y)
    if mode == "mean":
        if mean is None:
            raise ValueError("mode='mean' needs the training mean")
        fill = np.broadcast_to(np.asarray(mean, dtype=np.float64).ravel(), (N, X[0].size))
    else:
        fill = np.zeros((N, X[0].size))
    top = _rank_cells(scores)[:, -n_sub:]
    rows = np.arange(N)[:, None]
    Xs = X.reshape(N, -1).copy()
    Xs[rows, top] = fill[rows, top]
    return _evaluate(predict_proba, Xs.reshape(X.shape), Y)


# -- distribution shift ------------------------------------------------------
def kde_loglik(train_X, instances, n_components=4):
    """Mean log-density of ``instances`` under a Gaussian KDE (Scott bandwidth)
    fitted to ``train_X`` after projection onto its top principal components."""
    A = np.asarray(train_X, dtype=np.float64).reshape(len(train_X), -1)
    B = np.asarray(instances, dtype=np.float64).reshape(len(instances), -1)
    if len(A) < 10:
        raise ValueError("kde_loglik needs at least 10 training instances")
    centre = A.mean(axis=0)
    _, sv, vt = np.linalg.svd(A - centre, full_matrices=False)
    if len(sv) < n_components or sv[n_components - 1] <= 1e-10 * max(sv[0], 1e-300):
        raise ValueError(f"degenerate covariance with {n_components} components; try a smaller q")
    basis = vt[:n_components].T
    try:
        kde = stats.gaussian_kde(((A - centre) @ basis).T, bw_method="scott")
    except (np.linalg.LinAlgError, linalg.LinAlgError):
        raise ValueError(f"degenerate covariance with {n_components} components; try a smaller q") from None
    return float(np.mean(kde.logpdf(((B - centre) @ basis).T)))


def _cell_moments(samples):
    S = np.asarray(samples, dtype=np.float64)
    if len(S) < 2:
        raise ValueError("need at least 2 samples per set")
    mu = S.mean(axis=0)
    sd = np.maximum(np.sqrt(np.maximum(S.var(axis=0), 1e-12)), 1e-6)
    return mu, sd


def kl_divergence_estimate(samples_P, samples_Q):
    """Cell-wise moment-matched Gaussian KL(P || Q), averaged over cells."""
    mu_p, sd_p = _cell_moments(samples_P)
    mu_q, sd_q = _cell_moments(samples_Q)
    if mu_p.shape != mu_q.shape:
        raise ValueError(f"sample shapes differ: {mu_p.shape} vs {mu_q.shape}")
    kl = np.log(sd_q / sd_p) + (sd_p ** 2 + (mu_p - mu_q) ** 2) / (2 * sd_q ** 2) - 0.5
    return float(kl.mean())


def mmd_rbf(samples_P, samples_Q):
    """Unbiased MMD^2 with an RBF kernel; bandwidth is the median pairwise
    distance of the pooled sample."""
    P = np.asarray(samples_P, dtype=np.float64).reshape(len(samples_P), -1)
    Q = np.asarray(samples_Q, dtype=np.float64).reshape(len(samples_Q), -1)
    m, n = len(P), len(Q)
    if m < 2 or n < 2:
        raise ValueError("mmd_rbf needs at least 2 samples per set")
    Z = np.vstack([P, Q])
    sq = np.sum(Z * Z, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * Z @ Z.T, 0.0)
    iu = np.triu_indices(m + n, k=1)
    h = np.median(np.sqrt(d2[iu]))
    if h <= 0:
        raise ValueError("median pairwise distance is zero (degenerate data)")
    K = np.exp(-d2 / (2 * h * h))
    Kpp, Kqq, Kpq = K[:m, :m], K[m:, m:], K[:m, m:]
    return float((Kpp.sum() - np.trace(Kpp)) / (m * (m - 1))
                 + (Kqq.sum() - np.trace(Kqq)) / (n * (n - 1))
                 - 2 * Kpq.mean())


def dist_shift_report(train_X, reference_X, instances):
    return DistShiftReport(kde_loglik(train_X, instances),
                           kl_divergence_estimate(reference_X, instances),
                           mmd_rbf(reference_X, instances))
