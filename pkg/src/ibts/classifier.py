"""Small sequence classifiers used as the frozen black box to be explained."""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradcore as gc
from . import metrics
from .checkpoint import load_checkpoint, round_to_float32, save_checkpoint
from .gradcore import Tensor
from .nn import GRU, LayerNorm, Linear, Module, TransformerBlock, dropout, local_window, param

log = logging.getLogger(__name__)

ENCODERS = ("attention", "gru", "mlp")


class FrozenModelError(RuntimeError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass
class ClassifierConfig:
    encoder: str = "attention"
    d_h: int = 16
    n_layers: int = 1
    dropout: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 0.1
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    window: int = 5
    pool: str = "mean"

    def validate(self, n_classes=None):
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.pool not in ("mean", "max"):
            raise ValueError(f"pool must be 'mean' or 'max', got {self.pool!r}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if n_classes is not None and self.d_h < n_classes:
            raise ValueError(f"d_h={self.d_h} must be >= number of classes {n_classes}")
        return self


@dataclass
class TrainReport:
    epoch_loss: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    best_epoch: int = -1
    test_f1: float = float("nan")
    test_auroc: float = float("nan")
    test_auprc: float = float("nan")
    seconds: float = 0.0

    def to_dict(self):
        return asdict(self)


class ClassifierModel(Module):
    """f: (B, T, D) -> class logits; ``predict_proba`` applies the softmax."""

    def __init__(self, config, T, D, n_classes):
        config.validate(n_classes)
        self.config = config
        self.T, self.D, self.n_classes = T, D, n_classes
        self.frozen = False
        rng = np.random.default_rng([config.seed, 17])
        d = config.d_h
        win = config.window
        if config.encoder == "attention":
            self.embed = Linear(rng, D * win, d)
            self.pos = param(rng.normal(0.0, 0.02, size=(T, d)))
            self.blocks = [TransformerBlock(rng, d, 2 * d, config.dropout)
                           for _ in range(config.n_layers)]
            self.norm = LayerNorm(d)
        elif config.encoder == "gru":
            self.rnn = GRU(rng, D * win, d)
        else:
            self.hidden = Linear(rng, D * win, d)
            self.hidden2 = Linear(rng, d, d)
        self.head = Linear(rng, d, n_classes)
        self.head.weight.data *= 0.1

    # -- forward ------------------------------------------------------
    def logits(self, X, rng=None):
        """Forward pass on a Tensor batch; ``rng`` enables dropout (training only)."""
        X = gc.as_tensor(X)
        if X.ndim != 3 or X.shape[1:] != (self.T, self.D):
            raise gc.ShapeError(f"classifier expects (B, {self.T}, {self.D}), got {X.shape}")
        cfg = self.config
        if cfg.encoder == "attention":
            h = self.embed(local_window(X, cfg.window)) + self.pos
            for block in self.blocks:
                h = block(h, rng)
            z = self._pool(self.norm(h))
        elif cfg.encoder == "gru":
            z = self._pool(self.rnn(local_window(X, cfg.window)))
        else:
            h = gc.relu(self.hidden(local_window(X, cfg.window)))
            h = dropout(gc.relu(self.hidden2(h)), cfg.dropout, rng)
            z = self._pool(h)
        return self.head(z)

    def _pool(self, h):
        return gc.tmax(h, axis=1) if self.config.pool == "max" else gc.mean(h, axis=1)

    def proba_tensor(self, X):
        return gc.softmax(self.logits(X))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.data.flags.writeable = False
        self.frozen = True
        return self

    def param_digest(self):
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def predict_proba(model, X, batch_size=256):
    """Softmax class distribution per instance, dropout off."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[1:] != (model.T, model.D):
        raise gc.ShapeError(f"predict_proba expects (N, {model.T}, {model.D}), got {X.shape}")
    out = [model.proba_tensor(Tensor(X[i:i + batch_size])).data
           for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def input_vjp(model, X, upstream):
    """Gradient of sum_i <upstream_i, f(X_i)> with respect to X."""
    if not model.frozen:
        raise FrozenModelError("classifier must be frozen before taking input gradients")
    Xt = Tensor(np.asarray(X, dtype=np.float64), requires_grad=True)
    up = np.asarray(upstream, dtype=np.float64)
    out = gc.tsum(model.proba_tensor(Xt) * up)
    return gc.backward(out, wrt=[Xt])[Xt]


def cross_entropy(logits, y, n_classes):
    onehot = np.eye(n_classes)[np.asarray(y)]
    return -gc.mean(gc.tsum(gc.log_softmax(logits) * onehot, axis=-1))


def train_classifier(cfg, ds):
    """Adam on cross-entropy; keeps the parameters of the best validation macro-F1 epoch."""
    cfg.validate(ds.n_classes)
    t0 = time.perf_counter()
    Xtr, Ytr, _ = ds.split("train")
    Xva, Yva, _ = ds.split("val")
    if len(Xtr) == 0:
        raise ValueError("training split is empty")
    N, T, D = ds.X.shape
    model = ClassifierModel(cfg, T, D, ds.n_classes)
    params = model.parameters()
    opt = gc.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 23])
    report = TrainReport()
    best_f1, best = -1.0, None
    Xtr64 = Xtr.astype(np.float64)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(Xtr))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            try:
                loss = cross_entropy(model.logits(Tensor(Xtr64[idx]), rng), Ytr[idx], ds.n_classes)
                if not np.isfinite(loss.item()):
                    raise gc.NonFiniteError("cross-entropy is not finite")
                opt.step(gc.backward(loss, wrt=params))
            except gc.NonFiniteError as err:
                raise TrainingAborted(f"non-finite loss at epoch {epoch} (lr={cfg.lr}): {err}") from err
            losses.append(loss.item())
        report.epoch_loss.append(float(np.mean(losses)))
        if len(Xva):
            f1 = metrics.macro_f1(Yva, predict_proba(model, Xva).argmax(1), ds.n_classes)
        else:
            f1 = -report.epoch_loss[-1]
        report.val_f1.append(float(f1))
        if f1 > best_f1:
            best_f1, best = f1, [p.data.copy() for p in params]
            report.best_epoch = epoch
        log.debug("epoch %d loss %.4f val_f1 %.4f", epoch, report.epoch_loss[-1], f1)
    for p, value in zip(params, best):
        p.data = value
    round_to_float32(params)
    Xte, Yte, _ = ds.split("test")
    if len(Xte):
        proba = predict_proba(model, Xte)
        report.test_f1 = metrics.macro_f1(Yte, proba.argmax(1), ds.n_classes)
        report.test_auroc = metrics.multiclass_auroc(Yte, proba)
        report.test_auprc = metrics.multiclass_auprc(Yte, proba)
    report.seconds = time.perf_counter() - t0
    return model, report


# -- checkpoints -------------------------------------------------------------
def save_model(model, directory):
    meta = {"kind": "classifier", "config": asdict(model.config),
            "T": model.T, "D": model.D, "C": model.n_classes, "frozen": model.frozen}
    tensors = {name: p.data for name, p in model.named_parameters()}
    return save_checkpoint(directory, "model.json", meta, tensors)


def load_model(directory):
    doc, tensors = load_checkpoint(directory, "model.json")
    model = ClassifierModel(ClassifierConfig(**doc["config"]), doc["T"], doc["D"], doc["C"])
    named = dict(model.named_parameters())
    missing = set(named) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {sorted(missing)}")
    for name, p in named.items():
        if tensors[name].shape != p.shape:
            raise gc.ShapeError(f"tensor {name!r}: shape {tensors[name].shape} != {p.shape}")
        p.data = tensors[name]
    if doc.get("frozen"):
        model.freeze()
    return model
