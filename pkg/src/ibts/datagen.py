"""Synthetic time-series benchmarks with planted ground-truth saliency.

Every generator is a pure function of its config: instance ``i`` draws from
its own stream seeded by ``(seed, i)``, so instances can be produced in any
order. Labels are 0-based class indices.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
KINDS = ("freqshapes", "seqcomb_uv", "seqcomb_mv", "lowvar", "signaling")

# (T, D) each synthetic kind is defined for
KIND_SHAPES = {
    "freqshapes": (50, 1),
    "seqcomb_uv": (200, 1),
    "seqcomb_mv": (200, 4),
    "lowvar": (200, 2),
}

FREQ_PERIODS = (12, 20)
SPIKE_PROFILE = np.array([0.5, 1.0, 0.5])
RAMP_LENGTHS = (10, 20)
LOWVAR_SEGMENT = (30, 50)
LOWVAR_VARIANCE_FACTOR = 0.1
NARMA_WASHOUT = 100


class DatasetFormatError(ValueError):
    pass


@dataclass
class TimeSeriesDataset:
    X: np.ndarray
    Y: np.ndarray
    Q: np.ndarray | None
    splits: dict
    n_classes: int
    name: str = ""

    @property
    def shape(self):
        """(N, T, D)."""
        return self.X.shape

    def split(self, name):
        """Return (X, Y, Q) restricted to one split; Q is None without ground truth."""
        idx = np.asarray(self.splits[name], dtype=np.int64)
        Q = None if self.Q is None else self.Q[idx]
        return self.X[idx], self.Y[idx], Q

    def salient_fraction(self):
        return float(self.Q.mean()) if self.Q is not None and self.Q.size else 0.0


@dataclass
class GeneratorConfig:
    kind: str = "freqshapes"
    n_train: int = 500
    n_val: int = 100
    n_test: int = 200
    T: int | None = None
    D: int | None = None
    seed: int = 0
    amplitude: float = 1.0
    narma_order: int = 10
    noise_scale: float = 0.25
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}; choose from {KINDS}")
        if self.kind in KIND_SHAPES:
            T0, D0 = KIND_SHAPES[self.kind]
            self.T = T0 if self.T is None else self.T
            self.D = D0 if self.D is None else self.D
            if self.D != D0:
                raise ValueError(f"{self.kind} requires D={D0}, got D={self.D}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")

    @property
    def n_total(self):
        return self.n_train + self.n_val + self.n_test

    def to_dict(self):
        return asdict(self)


def instance_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def narma_noise(T, order=10, rng=None, u=None, washout=0):
    """NARMA-``order`` series of length T from a zero initial state.

    y[t+1] = 0.3 y[t] + 0.05 y[t] sum_{i<order} y[t-i] + 1.5 u[t-order+1] u[t] + 0.1
    with u ~ Uniform(0, 0.5). ``washout`` leading steps are simulated and dropped.
    """
    if order < 1 or T <= order:
        raise ValueError(f"NARMA needs T > order >= 1 (T={T}, order={order})")
    total = T + washout
    if u is None:
        u = rng.uniform(0.0, 0.5, size=total)
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (total,):
        raise ValueError(f"expected {total} inputs, got {u.shape}")
    y = np.zeros(total)
    for t in range(total - 1):
        lo = max(0, t - order + 1)
        u_lag = u[t - order + 1] if t - order + 1 >= 0 else 0.0
        y[t + 1] = 0.3 * y[t] + 0.05 * y[t] * y[lo:t + 1].sum() + 1.5 * u_lag * u[t] + 0.1
        if abs(y[t + 1]) > 1e6:
            raise FloatingPointError(
                f"NARMA-{order} recurrence diverged at step {t + 1}; try a smaller order")
    return y[washout:]


def _noise(cfg, rng, T, D):
    """Standardised NARMA background, one independent series per channel."""
    out = np.empty((T, D))
    for d in range(D):
        for attempt in range(10):
            try:
                y = narma_noise(T, cfg.narma_order, rng, washout=NARMA_WASHOUT)
                break
            except FloatingPointError:
                # NARMA-10 occasionally blows up; redraw from the same stream
                if attempt == 9:
                    raise
        sd = y.std()
        out[:, d] = (y - y.mean()) / (sd if sd > 0 else 1.0) * cfg.noise_scale
    return out


def _split_labels(cfg, n_classes, rng):
    """Cyclic label blocks per split, shuffled within the split.

    Each split and the whole set stay balanced within +-1.
    """
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    cycle = np.arange(cfg.n_total) % n_classes
    labels = np.empty(cfg.n_total, dtype=np.int32)
    splits, start = {}, 0
    for name, n in sizes.items():
        idx = np.arange(start, start + n)
        labels[idx] = rng.permutation(cycle[start:start + n])
        splits[name] = idx.tolist()
        start += n
    return labels, splits


def _build(cfg, n_classes, make_instance, name):
    label_rng = np.random.default_rng([int(cfg.seed), 2 ** 31 - 1])
    labels, splits = _split_labels(cfg, n_classes, label_rng)
    if cfg.n_train and cfg.n_train < n_classes:
        raise ValueError(f"n_train={cfg.n_train} cannot hold all {n_classes} classes")
    N, T, D = cfg.n_total, cfg.T, cfg.D
    X = np.zeros((N, T, D))
    Q = np.zeros((N, T, D), dtype=np.uint8)
    for i in range(N):
        X[i], Q[i] = make_instance(int(labels[i]), instance_rng(cfg.seed, i))
    return TimeSeriesDataset(X.astype(np.float32), labels, Q, splits, n_classes, name)


# -- FreqShapes ----------------------------------------------------------
def _spike_centres(T, period, offset):
    half = len(SPIKE_PROFILE) // 2
    return [c for c in range(offset, T - half, period) if c - half >= 0]


def gen_freqshapes(cfg):
    """Four classes: spike polarity (up/down) x spike period (short/long).

    Class c has polarity ``+1`` for c in {0, 1} and the short period for c in {0, 2}.
    """
    if cfg.kind != "freqshapes":
        raise ValueError("gen_freqshapes needs kind='freqshapes'")
    T = cfg.T
    short, long_ = FREQ_PERIODS
    if T < 2 * long_ + len(SPIKE_PROFILE):
        raise ValueError(f"T={T} too short to fit two spike periods of {long_}")
    half = len(SPIKE_PROFILE) // 2

    def make(label, rng):
        x = _noise(cfg, rng, T, 1)
        q = np.zeros((T, 1), dtype=np.uint8)
        sign = 1.0 if label in (0, 1) else -1.0
        period = short if label in (0, 2) else long_
        offset = int(rng.integers(half, half + period))
        for c in _spike_centres(T, period, offset):
            x[c - half:c + half + 1, 0] += sign * cfg.amplitude * SPIKE_PROFILE
            q[c - half:c + half + 1, 0] = 1
        return x, q

    return _build(cfg, 4, make, "freqshapes")


# -- SeqComb -------------------------------------------------------------
def _place_windows(rng, T, lengths, attempts=1000):
    for _ in range(attempts):
        starts = [int(rng.integers(0, T - L + 1)) for L in lengths]
        spans = sorted(zip(starts, lengths))
        if all(s1 >= s0 + L0 for (s0, L0), (s1, _) in zip(spans, spans[1:])):
            return starts
    raise ValueError(f"cannot place disjoint windows of lengths {lengths} in T={T}")


def gen_seqcomb(cfg, multivariate=None):
    """Four classes: {neither, increasing only, decreasing only, both} ramps.

    Each ramp overwrites a random window with a strictly monotone line. In the
    multivariate variant each ramp lands on an independently drawn channel.
    """
    if multivariate is None:
        multivariate = cfg.kind == "seqcomb_mv"
    T, D = cfg.T, cfg.D
    if D != (4 if multivariate else 1):
        raise ValueError(f"seqcomb {'MV' if multivariate else 'UV'} needs D={4 if multivariate else 1}")
    lo, hi = RAMP_LENGTHS
    if 2 * hi > T:
        raise ValueError(f"T={T} cannot hold two disjoint windows of length {hi}")

    def make(label, rng):
        x = _noise(cfg, rng, T, D)
        q = np.zeros((T, D), dtype=np.uint8)
        motifs = {0: [], 1: [1.0], 2: [-1.0], 3: [1.0, -1.0]}[label]
        lengths = [int(rng.integers(lo, hi + 1)) for _ in motifs]
        starts = _place_windows(rng, T, lengths) if motifs else []
        for direction, L, s in zip(motifs, lengths, starts):
            d = int(rng.integers(0, D))
            level = x[s:s + L, d].mean()
            x[s:s + L, d] = level + direction * np.linspace(-cfg.amplitude, cfg.amplitude, L)
            q[s:s + L, d] = 1
        return x, q

    name = "seqcomb_mv" if multivariate else "seqcomb_uv"
    return _build(cfg, 4, make, name)


# -- LowVar --------------------------------------------------------------
def gen_lowvar(cfg):
    """Four classes: channel (0/1) x offset sign (+/-) of a low-variance segment."""
    T, D = cfg.T, cfg.D
    if D != 2:
        raise ValueError("lowvar needs D=2")
    lo, hi = LOWVAR_SEGMENT
    if hi > T:
        raise ValueError(f"segment length {hi} exceeds T={T}")
    shrink = np.sqrt(LOWVAR_VARIANCE_FACTOR)

    def make(label, rng):
        x = _noise(cfg, rng, T, D)
        q = np.zeros((T, D), dtype=np.uint8)
        channel, sign = label // 2, (1.0 if label % 2 == 0 else -1.0)
        L = int(rng.integers(lo, hi + 1))
        s = int(rng.integers(0, T - L + 1))
        seg = x[s:s + L, channel]
        rest = np.delete(x[:, channel], np.arange(s, s + L))
        # segment variance is exactly the factor times the variance elsewhere
        scale = shrink * rest.std() / max(seg.std(), 1e-12)
        x[s:s + L, channel] = sign * cfg.amplitude + (seg - seg.mean()) * scale
        q[s:s + L, channel] = 1
        return x, q

    return _build(cfg, 4, make, "lowvar")


# -- signaling example ---------------------------------------------------
def gen_signaling_example(n_index, T, N, rng, split_fractions=(0.7, 0.1, 0.2)):
    """X[t] uniform on {-1, +1}; Y = 1 iff X at 1-based position ``n_index`` is positive."""
    if not 1 <= n_index <= T:
        raise ValueError(f"n_index must lie in [1, {T}], got {n_index}")
    X = rng.choice(np.array([-1.0, 1.0]), size=(N, T, 1))
    Y = (X[:, n_index - 1, 0] > 0).astype(np.int32)
    Q = np.zeros((N, T, 1), dtype=np.uint8)
    Q[:, n_index - 1, 0] = 1
    n_train = int(round(split_fractions[0] * N))
    n_val = int(round(split_fractions[1] * N))
    splits = {"train": list(range(n_train)),
              "val": list(range(n_train, n_train + n_val)),
              "test": list(range(n_train + n_val, N))}
    return TimeSeriesDataset(X.astype(np.float32), Y, Q, splits, 2, "signaling")


def generate(cfg):
    if cfg.kind == "freqshapes":
        return gen_freqshapes(cfg)
    if cfg.kind in ("seqcomb_uv", "seqcomb_mv"):
        return gen_seqcomb(cfg)
    if cfg.kind == "lowvar":
        return gen_lowvar(cfg)
    rng = np.random.default_rng(cfg.seed)
    return gen_signaling_example(int(cfg.extra.get("n_index", 7)), cfg.T or 20,
                                 cfg.n_total, rng,
                                 split_fractions=tuple(np.array([cfg.n_train, cfg.n_val, cfg.n_test])
                                                       / max(cfg.n_total, 1)))


# -- serialisation -------------------------------------------------------
def _write_atomic_dir(target, write):
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.", dir=target.parent))
    try:
        write(tmp)
        if target.exists():
            shutil.rmtree(target)
        os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return target


def save_dataset(ds, directory):
    N, T, D = ds.X.shape

    def write(tmp):
        manifest = {
            "format_version": FORMAT_VERSION,
            "name": ds.name,
            "N": N, "T": T, "D": D, "C": int(ds.n_classes),
            "has_truth": ds.Q is not None,
            "byte_order": "little",
            "dtype": {"X": "f32", "Y": "i32", "Q": "u8"},
            "splits": {k: [int(i) for i in v] for k, v in ds.splits.items()},
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
        np.ascontiguousarray(ds.X, dtype="<f4").tofile(tmp / "X.bin")
        np.ascontiguousarray(ds.Y, dtype="<i4").tofile(tmp / "Y.bin")
        if ds.Q is not None:
            np.ascontiguousarray(ds.Q, dtype="u1").tofile(tmp / "Q.bin")

    return _write_atomic_dir(directory, write)


def _read_bin(path, dtype, count, field_name):
    if not path.exists():
        raise DatasetFormatError(f"{field_name}: missing file {path.name}")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) != count * itemsize:
        raise DatasetFormatError(
            f"{field_name}: byte count mismatch ({len(raw)} bytes, expected {count * itemsize})")
    return np.frombuffer(raw, dtype=dtype).copy()


def load_dataset(directory):
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"manifest: no manifest.json in {directory}") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"manifest: corrupt JSON ({exc})") from None
    for key in ("format_version", "N", "T", "D", "C", "has_truth", "splits"):
        if key not in manifest:
            raise DatasetFormatError(f"manifest: missing field {key!r}")
    if manifest["format_version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"format_version: unsupported {manifest['format_version']}")
    if manifest.get("byte_order", "little") != "little":
        raise DatasetFormatError("byte_order: only little-endian is supported")
    N, T, D = (int(manifest[k]) for k in ("N", "T", "D"))
    X = _read_bin(directory / "X.bin", "<f4", N * T * D, "X").reshape(N, T, D)
    Y = _read_bin(directory / "Y.bin", "<i4", N, "Y")
    Q = None
    if manifest["has_truth"]:
        Q = _read_bin(directory / "Q.bin", "u1", N * T * D, "Q").reshape(N, T, D)
    splits = {k: list(v) for k, v in manifest["splits"].items()}
    for name, idx in splits.items():
        if any(not 0 <= i < N for i in idx):
            raise DatasetFormatError(f"splits.{name}: index out of range")
    return TimeSeriesDataset(X.astype(np.float32), Y.astype(np.int32), Q, splits,
                             int(manifest["C"]), manifest.get("name", ""))
