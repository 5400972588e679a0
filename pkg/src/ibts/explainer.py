"""Information-bottleneck explainer: mask extractor, conditioner, losses and training.

For an input X the extractor g produces per-cell keep probabilities pi. A hard
mask M ~ Bernoulli(pi) is drawn with a straight-through estimator, a reference
instance pads the masked-out cells with baseline noise, and the conditioner
maps [M, X] to an explanation-embedded instance X_tilde. Training minimises

    L_LC + alpha * L_M + beta * (L_KL + L_dr)

through the frozen classifier f.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .checkpoint import load_checkpoint, round_to_float32, save_checkpoint
from .classifier import FrozenModelError, TrainingAborted, predict_proba
from .datagen import _write_atomic_dir
from .gradcore import Tensor
from .nn import Linear, Module, TransformerBlock, local_window, param

log = logging.getLogger(__name__)

PI_CLAMP = 1e-7
SIGMA_FLOOR = 1e-6
SIMPLEX_TOL = 1e-6
JS_LOG_FLOOR = 1e-12


# -- configuration and records -----------------------------------------------
@dataclass
class ExplainerConfig:
    alpha: float = 2.0
    beta: float = 1.0
    r: float = 0.5
    lambda_con: float = 1.0
    lr: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    inference: str = "threshold"
    d_h: int = 32
    window: int = 5
    conditioner_width: int = 32

    def validate(self):
        if min(self.alpha, self.beta, self.lambda_con) < 0:
            raise ValueError("alpha, beta and lambda_con must be non-negative")
        if not 0 < self.r < 1:
            raise ValueError(f"r must lie in (0, 1), got {self.r}")
        if self.inference not in ("threshold", "sample"):
            raise ValueError(f"inference must be 'threshold' or 'sample', got {self.inference!r}")
        return self


@dataclass
class LossBreakdown:
    L_LC: float
    L_M: float
    L_con: float
    L_KL: float
    L_dr: float
    total: float

    FIELDS = ("L_LC", "L_M", "L_con", "L_KL", "L_dr", "total")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class ExplanationArtifact:
    pi: np.ndarray
    M: np.ndarray
    X_ref: np.ndarray
    X_tilde: np.ndarray


@dataclass
class BaselineDistribution:
    mu: np.ndarray
    sigma: np.ndarray

    def sample(self, rng, n=None):
        shape = self.mu.shape if n is None else (n, *self.mu.shape)
        return self.mu + self.sigma * rng.standard_normal(shape)


def fit_baseline(X_train):
    """Per-(t, d) mean and standard deviation over training instances."""
    X = np.asarray(X_train, dtype=np.float64)
    if X.ndim != 3 or len(X) == 0:
        raise ValueError("fit_baseline needs a non-empty (N, T, D) training split")
    if len(X) < 2:
        raise ValueError("fit_baseline needs at least 2 training instances")
    return BaselineDistribution(X.mean(axis=0), np.maximum(X.std(axis=0), SIGMA_FLOOR))


# -- networks ------------------------------------------------------------------
class Extractor(Module):
    """g_phi: (B, T, D) -> keep probabilities in [0, 1]^(T x D)."""

    def __init__(self, rng, T, D, d_h=32, window=5):
        self.window = window
        self.embed = Linear(rng, D * window, d_h)
        self.pos = param(rng.normal(0.0, 0.02, size=(T, d_h)))
        self.block = TransformerBlock(rng, d_h, d_h)
        self.decode = Linear(rng, d_h, D)

    def __call__(self, X):
        h = self.embed(local_window(gc.as_tensor(X), self.window)) + self.pos
        return gc.sigmoid(self.decode(self.block(h)))


class Conditioner(Module):
    """Psi_theta: position-shared MLP on per-cell [M, X] -> X_tilde."""

    def __init__(self, rng, width=32):
        self.hidden = Linear(rng, 2, width)
        self.out = Linear(rng, width, 1)

    def __call__(self, M, X):
        M, X = gc.as_tensor(M), gc.as_tensor(X)
        shape = X.shape
        pair = gc.concat([gc.reshape(M, (*shape, 1)), gc.reshape(X, (*shape, 1))], axis=-1)
        return gc.reshape(self.out(gc.elu(self.hidden(pair))), shape)


def extract_probs(extractor, X):
    return extractor(X)


def make_reference(X, M, baseline, rng=None, b=None):
    """M * X + (1 - M) * b with b ~ baseline; exact on the kept cells."""
    if b is None:
        b = baseline.sample(rng, None if np.ndim(gc.as_tensor(X).data) == 2 else len(X))
    M = gc.as_tensor(M)
    Md = M.data
    if not np.all((Md == 0) | (Md == 1)):
        raise ValueError("make_reference needs a binary mask")
    Xd = np.asarray(gc.as_tensor(X).data)
    keep = Md == 1
    # M * X + (1 - M) * b, with the kept cells copied bit-exactly
    value = np.where(keep, Xd, b)
    if not M.requires_grad:
        return Tensor(value)
    return _reference_node(M, Xd - np.asarray(b), value)


def _reference_node(M, diff, value):
    # forward is the exact padded instance; d/dM = X - b
    return gc._node(value, (M,), lambda g: (g * diff,), "reference")


def condition(conditioner, M, X):
    return conditioner(M, X)


# -- losses --------------------------------------------------------------------
def loss_mask(pi, r, lambda_con):
    """Bernoulli KL to Bern(r) averaged over cells, plus the connectivity term.

    Returns (L_M, L_con) where L_M already contains L_con. pi has shape
    (..., T, D); leading axes are averaged.
    """
    if not 0 < r < 1:
        raise ValueError(f"r must lie in (0, 1), got {r}")
    pi = gc.as_tensor(pi)
    if np.any(pi.data < -1e-9) or np.any(pi.data > 1 + 1e-9):
        raise gc.DomainError("loss_mask: pi outside [0, 1]")
    p = gc.clip(pi, PI_CLAMP, 1 - PI_CLAMP)
    kl = p * gc.log(p / r) + (1.0 - p) * gc.log((1.0 - p) / (1.0 - r))
    kl_term = gc.mean(kl)
    T = pi.shape[-2]
    cells = pi.shape[-2] * pi.shape[-1]
    steps = gc.smooth_abs(pi[..., 1:, :] - pi[..., :T - 1, :])
    per_instance = gc.tsum(steps, axis=(-2, -1)) / cells
    l_con = lambda_con * gc.mean(per_instance)
    return kl_term + l_con, l_con


def loss_dr(X_tilde, X_ref):
    X_tilde, X_ref = gc.as_tensor(X_tilde), gc.as_tensor(X_ref)
    if X_tilde.shape != X_ref.shape:
        raise gc.ShapeError(f"loss_dr: shapes {X_tilde.shape} and {X_ref.shape}")
    return gc.mean(gc.square(X_tilde - X_ref))


def _batch_moments(X):
    mu = gc.mean(X, axis=0)
    var = gc.mean(gc.square(X - mu), axis=0)
    sd = gc.sqrt(gc.clip(var, SIGMA_FLOOR ** 2, None))
    return mu, sd


def loss_kl_dist(batch_X, batch_X_tilde):
    """Mean over cells of KL(N(mu_X, s_X^2) || N(mu_Xt, s_Xt^2)), moments per batch."""
    bX, bXt = gc.as_tensor(batch_X), gc.as_tensor(batch_X_tilde)
    if len(bX) < 2 or len(bXt) < 2:
        raise ValueError("loss_kl_dist needs batches of at least 2 instances")
    if bX.shape[1:] != bXt.shape[1:]:
        raise gc.ShapeError(f"loss_kl_dist: shapes {bX.shape} and {bXt.shape}")
    mu_p, sd_p = _batch_moments(bX)
    mu_q, sd_q = _batch_moments(bXt)
    kl = gc.log(sd_q / sd_p) + (gc.square(sd_p) + gc.square(mu_p - mu_q)) / (2.0 * gc.square(sd_q)) - 0.5
    return gc.mean(kl)


def _check_simplex(name, P):
    if np.any(P < -SIMPLEX_TOL) or np.any(np.abs(P.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ValueError(f"loss_lc: {name} rows are not on the probability simplex")


def loss_lc(p, q):
    """Mean Jensen-Shannon divergence (natural log) between rows of p and q."""
    p, q = gc.as_tensor(p), gc.as_tensor(q)
    _check_simplex("p", p.data)
    _check_simplex("q", q.data)
    m = 0.5 * (p + q)
    lm = gc.log(gc.clip(m, JS_LOG_FLOOR, None))
    lp = gc.log(gc.clip(p, JS_LOG_FLOOR, None))
    lq = gc.log(gc.clip(q, JS_LOG_FLOOR, None))
    js = 0.5 * gc.tsum(p * (lp - lm), axis=-1) + 0.5 * gc.tsum(q * (lq - lm), axis=-1)
    return gc.mean(js)


def total_loss(parts, alpha, beta):
    """Weighted sum of loss parts (floats or scalar Tensors) as a LossBreakdown."""
    vals = {}
    for key in ("L_LC", "L_M", "L_con", "L_KL", "L_dr"):
        v = parts[key]
        v = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(v):
            raise FloatingPointError(f"loss term {key} is not finite ({v})")
        vals[key] = v
    total = vals["L_LC"] + alpha * vals["L_M"] + beta * (vals["L_KL"] + vals["L_dr"])
    return LossBreakdown(total=total, **vals)


def bernoulli_prior_from_budget(gamma, p, alpha):
    """Prior r with gamma * p / alpha = -log2(r) - log2(1 - r); needs a budget of >= 2 bits."""
    budget = gamma * p / alpha
    if budget < 2:
        raise ValueError(f"prior undefined below budget 2 bits (gamma*p/alpha = {budget})")
    return (1.0 - math.sqrt(max(0.0, 1.0 - 2.0 ** (2.0 - budget)))) / 2.0


# -- the explainer -------------------------------------------------------------
class Explainer:
    def __init__(self, config, T, D, baseline):
        self.config = config.validate()
        self.T, self.D = T, D
        self.baseline = baseline
        rng = np.random.default_rng([config.seed, 41])
        self.extractor = Extractor(rng, T, D, config.d_h, config.window)
        self.conditioner = Conditioner(rng, config.conditioner_width)

    def parameters(self):
        return self.extractor.parameters() + self.conditioner.parameters()

    def named_parameters(self):
        return (self.extractor.named_parameters("extractor.")
                + self.conditioner.named_parameters("conditioner."))

    def probs(self, X, batch_size=256):
        X = np.asarray(X, dtype=np.float64)
        return np.concatenate([self.extractor(Tensor(X[i:i + batch_size])).data
                               for i in range(0, len(X), batch_size)])


def forward_losses(explainer, f, X, p_ref, u, b, ste_offset=None):
    """One differentiable pass over a batch.

    ``u`` are the uniforms behind the mask draw and ``b`` the baseline draws.
    With ``ste_offset`` the mask is ``pi + ste_offset`` built from ordinary ops:
    the surrogate whose finite differences the straight-through gradient matches.
    Returns (total tensor, part tensors, mask tensor).
    """
    cfg = explainer.config
    X = gc.as_tensor(X)
    pi = explainer.extractor(X)
    if ste_offset is None:
        M = gc.sample_bernoulli_ste(pi, u=u)
    else:
        M = pi + ste_offset
    X_ref = _reference_node(M, X.data - b, M.data * X.data + (1.0 - M.data) * b) \
        if ste_offset is not None else make_reference(X, M, explainer.baseline, b=b)
    X_tilde = explainer.conditioner(M, X)
    q = f.proba_tensor(X_tilde)
    L_M, L_con = loss_mask(pi, cfg.r, cfg.lambda_con)
    parts = {
        "L_LC": loss_lc(p_ref, q),
        "L_M": L_M,
        "L_con": L_con,
        "L_KL": loss_kl_dist(X, X_tilde),
        "L_dr": loss_dr(X_tilde, X_ref),
    }
    total = parts["L_LC"] + cfg.alpha * parts["L_M"] + cfg.beta * (parts["L_KL"] + parts["L_dr"])
    return total, parts, M


def train_explainer(f, ds, cfg, rng=None, split="train"):
    """Fit extractor and conditioner on ``ds``'s training split.

    Returns (explainer, history) where history holds one epoch-averaged
    LossBreakdown per epoch. ``f`` must be frozen and is left untouched.
    """
    if not getattr(f, "frozen", False):
        raise FrozenModelError("classifier must be frozen")
    cfg.validate()
    digest = f.param_digest()
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 43])
    Xtr = np.asarray(ds.split(split)[0], dtype=np.float64)
    if len(Xtr) < 2:
        raise ValueError("need at least 2 training instances")
    N, T, D = Xtr.shape
    baseline = fit_baseline(Xtr)
    explainer = Explainer(cfg, T, D, baseline)
    p_all = predict_proba(f, Xtr)
    params = explainer.parameters()
    opt = gc.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    last = None
    for epoch in range(cfg.epochs):
        order = rng.permutation(N)
        sums, count = None, 0
        for start in range(0, N, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            u = rng.random((len(idx), T, D))
            b = baseline.sample(rng, len(idx))
            try:
                total, parts, _ = forward_losses(explainer, f, Xtr[idx], p_all[idx], u, b)
                last = total_loss(parts, cfg.alpha, cfg.beta)
            except (FloatingPointError, gc.DomainError) as exc:
                raise TrainingAborted(f"epoch {epoch}: {exc}; last breakdown {last}") from exc
            opt.step(gc.backward(total, wrt=params))
            row = np.array([getattr(last, k) for k in LossBreakdown.FIELDS])
            sums = row * len(idx) if sums is None else sums + row * len(idx)
            count += len(idx)
        history.append(LossBreakdown(*(float(v) for v in sums / count)))
        log.debug("epoch %d %s", epoch, history[-1])
    round_to_float32(params)
    if f.param_digest() != digest:
        raise RuntimeError("classifier parameters changed during explainer training")
    explainer.history = history
    return explainer, history


def explain(explainer, X, rng=None, mode=None, f=None):
    """Masks and explanation instances for one instance (T, D) or a batch (N, T, D).

    ``mode='threshold'`` (default from the config) keeps cells with pi >= 0.5;
    ``mode='sample'`` draws M ~ Bernoulli(pi) with ``rng``.
    """
    mode = mode or explainer.config.inference
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    Xb = X[None] if single else X
    pi = explainer.probs(Xb)
    if mode == "threshold":
        M = (pi >= 0.5).astype(np.float64)
    elif mode == "sample":
        if rng is None:
            raise ValueError("sampling mode needs an rng")
        M = (rng.random(pi.shape) < pi).astype(np.float64)
    else:
        raise ValueError(f"unknown inference mode {mode!r}")
    b_rng = rng if rng is not None else np.random.default_rng([explainer.config.seed, 47])
    b = explainer.baseline.sample(b_rng, len(Xb))
    X_ref = np.where(M == 1, Xb, b)
    X_tilde = explainer.conditioner(Tensor(M), Tensor(Xb)).data
    out = ExplanationArtifact(pi, M, X_ref, X_tilde)
    if single:
        out = ExplanationArtifact(pi[0], M[0], X_ref[0], X_tilde[0])
    return out


# -- checkpoints ---------------------------------------------------------------
def save_explainer(explainer, directory):
    meta = {"kind": "explainer", "config": asdict(explainer.config),
            "T": explainer.T, "D": explainer.D}
    tensors = {name: p.data for name, p in explainer.named_parameters()}
    tensors["mu"] = explainer.baseline.mu
    tensors["sigma"] = explainer.baseline.sigma
    return save_checkpoint(directory, "explainer.json", meta, tensors)


def load_explainer(directory):
    doc, tensors = load_checkpoint(directory, "explainer.json")
    baseline = BaselineDistribution(tensors.pop("mu"), tensors.pop("sigma"))
    explainer = Explainer(ExplainerConfig(**doc["config"]), doc["T"], doc["D"], baseline)
    for name, p in explainer.named_parameters():
        if name not in tensors:
            raise ValueError(f"checkpoint lacks tensor {name!r}")
        p.data = tensors[name]
    return explainer


def export_explanations(pi, directory, meta=None):
    """Write ``explanations.bin`` (N*T*D float32 pi values) plus a manifest."""
    pi = np.asarray(pi)
    N, T, D = pi.shape

    def write(tmp):
        manifest = {"format_version": 1, "N": N, "T": T, "D": D, "dtype": "f32",
                    "byte_order": "little", **(meta or {})}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        np.ascontiguousarray(pi, dtype="<f4").tofile(tmp / "explanations.bin")

    return _write_atomic_dir(directory, write)


def load_explanations(directory):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    raw = (directory / "explanations.bin").read_bytes()
    N, T, D = manifest["N"], manifest["T"], manifest["D"]
    if len(raw) != 4 * N * T * D:
        raise ValueError("explanations: byte count mismatch")
    return np.frombuffer(raw, dtype="<f4").reshape(N, T, D).astype(np.float64)
