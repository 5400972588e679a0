"""Config-driven experiment runner.

    ibts gen-data --kind freqshapes --seed 7 --out runs
    ibts train-classifier --config configs/freqshapes_desk.json
    ibts train-explainer  --config configs/freqshapes_desk.json
    ibts evaluate         --config configs/freqshapes_desk.json
    ibts diagnose         --config configs/freqshapes_desk.json

Each seed gets its own run directory ``<out>/seed-<s>/`` holding ``data/``,
``classifier/``, ``explainer/`` and ``reports/``. Aggregated reports land in
``<out>/reports/``. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import datagen
from . import explainer as expl
from . import metrics

log = logging.getLogger("ibts")

DEFAULT_K_LIST = [25, 50, 75, 90]
EVAL_METRICS = ("saliency", "occlusion", "substitution")
HISTORY_COLUMNS = ("epoch",) + expl.LossBreakdown.FIELDS
FAMILIES = ("zero", "mean", "gaussian", "conditioned")


class UsageError(Exception):
    pass


class RunError(Exception):
    pass


# -- configuration -------------------------------------------------------------
def _pick(cls, block, where):
    known = {f.name for f in fields(cls)}
    unknown = set(block) - known
    if unknown:
        raise UsageError(f"{where}: unknown keys {sorted(unknown)}")
    return dict(block)


def load_config(args):
    """Merge the JSON config file with command-line overrides."""
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
    unknown = set(cfg) - {"dataset", "classifier", "explainer", "eval", "seeds", "out"}
    if unknown:
        raise UsageError(f"config: unknown sections {sorted(unknown)}")
    cfg.setdefault("dataset", {})
    cfg.setdefault("classifier", {})
    cfg.setdefault("explainer", {})
    cfg.setdefault("eval", {})
    if getattr(args, "kind", None):
        cfg["dataset"]["kind"] = args.kind
    seeds = cfg.get("seeds", [0])
    if os.environ.get("IBTS_SEED"):
        try:
            seeds = [int(os.environ["IBTS_SEED"])]
        except ValueError:
            raise UsageError(f"IBTS_SEED must be an integer, got {os.environ['IBTS_SEED']!r}") from None
    if args.seed is not None:
        seeds = [args.seed]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise UsageError("seeds must be a non-empty list of integers")
    cfg["seeds"] = seeds
    cfg["out"] = args.out or cfg.get("out") or "runs"

    ds_block = cfg["dataset"]
    if "dir" not in ds_block:
        _pick(datagen.GeneratorConfig, {k: v for k, v in ds_block.items() if k != "seed"}, "dataset")
    _pick(clf.ClassifierConfig, cfg["classifier"], "classifier")
    _pick(expl.ExplainerConfig, cfg["explainer"], "explainer")
    ev = cfg["eval"]
    unknown = set(ev) - {"metrics", "k_list", "substitution_modes", "substitution_frac"}
    if unknown:
        raise UsageError(f"eval: unknown keys {sorted(unknown)}")
    bad = set(ev.get("metrics", EVAL_METRICS)) - set(EVAL_METRICS)
    if bad:
        raise UsageError(f"eval.metrics: unknown {sorted(bad)}")
    bad = set(ev.get("substitution_modes", ["mean", "zero"])) - {"mean", "zero"}
    if bad:
        raise UsageError(f"eval.substitution_modes: unknown {sorted(bad)}")
    return cfg


def run_dir(cfg, seed):
    return Path(cfg["out"]) / f"seed-{seed}"


def _dataset_dir(cfg, seed):
    given = cfg["dataset"].get("dir")
    return Path(given) if given else run_dir(cfg, seed) / "data"


def _load_dataset(cfg, seed):
    path = _dataset_dir(cfg, seed)
    if not (path / "manifest.json").exists():
        raise RunError(f"no dataset at {path}; run gen-data first")
    return datagen.load_dataset(path)


def _load_classifier(cfg, seed):
    path = run_dir(cfg, seed) / "classifier"
    if not (path / "model.json").exists():
        raise RunError(f"no classifier checkpoint at {path}; run train-classifier first")
    return clf.load_model(path)


def _load_explainer(cfg, seed):
    path = run_dir(cfg, seed) / "explainer"
    if not (path / "explainer.json").exists():
        raise RunError(f"no explainer checkpoint at {path}; run train-explainer first")
    return expl.load_explainer(path)


# -- output helpers ------------------------------------------------------------
def _write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path, doc):
    _write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _write_text(path, buf.getvalue())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def aggregate(values):
    """Mean and population standard deviation."""
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std())}


# -- verbs ---------------------------------------------------------------------
def cmd_gen_data(cfg):
    block = {k: v for k, v in cfg["dataset"].items() if k != "dir"}
    if "kind" not in block:
        raise UsageError("gen-data needs --kind (or dataset.kind in the config)")
    for seed in cfg["seeds"]:
        gcfg = datagen.GeneratorConfig(**{**block, "seed": seed})
        ds = datagen.generate(gcfg)
        out = run_dir(cfg, seed) / "data"
        datagen.save_dataset(ds, out)
        N, T, D = ds.X.shape
        print(f"seed {seed}: {ds.name} N={N} T={T} D={D} C={ds.n_classes} "
              f"salient_fraction={ds.salient_fraction():.4f} -> {out}")


def _history_rows(history):
    return [[i] + [float(getattr(h, k)) for k in expl.LossBreakdown.FIELDS]
            for i, h in enumerate(history)]


def cmd_train_classifier(cfg):
    for seed in cfg["seeds"]:
        ds = _load_dataset(cfg, seed)
        ccfg = clf.ClassifierConfig(**{**cfg["classifier"], "seed": seed})
        try:
            model, report = clf.train_classifier(ccfg, ds)
        except clf.TrainingAborted as exc:
            raise RunError(f"classifier training aborted: {exc}") from None
        model.freeze()
        out = run_dir(cfg, seed) / "classifier"
        clf.save_model(model, out)
        _write_csv(out / "history.csv", ["epoch", "loss", "val_f1"],
                   [[i, float(l), float(v)] for i, (l, v) in
                    enumerate(zip(report.epoch_loss, report.val_f1))])
        _write_json(out / "train_report.json", report.to_dict())
        print(f"seed {seed}: classifier test_f1={report.test_f1:.4f} "
              f"test_auroc={report.test_auroc:.4f} ({report.seconds:.1f}s) -> {out}")


def cmd_train_explainer(cfg):
    for seed in cfg["seeds"]:
        ds = _load_dataset(cfg, seed)
        model = _load_classifier(cfg, seed)
        ecfg = expl.ExplainerConfig(**{**cfg["explainer"], "seed": seed})
        try:
            ex, history = expl.train_explainer(model, ds, ecfg)
        except clf.FrozenModelError as exc:
            raise RunError(str(exc)) from None
        except clf.TrainingAborted as exc:
            raise RunError(f"explainer training aborted: {exc}") from None
        out = run_dir(cfg, seed) / "explainer"
        expl.save_explainer(ex, out)
        _write_csv(out / "history.csv", HISTORY_COLUMNS, _history_rows(history))
        last = history[-1]
        print(f"seed {seed}: explainer total={last.total:.4f} L_LC={last.L_LC:.4f} -> {out}")


def _percentile_key(k):
    k = float(k)
    return str(int(k)) if k.is_integer() else repr(k)


def evaluate_seed(cfg, seed):
    """All configured evaluations for one seed, as a JSON-ready dict."""
    ev = cfg["eval"]
    wanted = ev.get("metrics", list(EVAL_METRICS))
    ds = _load_dataset(cfg, seed)
    model = _load_classifier(cfg, seed)
    ex = _load_explainer(cfg, seed)
    X, Y, Q = ds.split("test")
    if len(X) == 0:
        raise RunError("test split is empty")
    art = expl.explain(ex, X)
    expl.export_explanations(art.pi, run_dir(cfg, seed) / "explanations",
                             {"seed": seed, "dataset": ds.name})
    proba = lambda Z: clf.predict_proba(model, Z)
    rng = np.random.default_rng([seed, 101])
    random_scores = rng.random(art.pi.shape)
    out = {"seed": seed, "dataset": ds.name}
    if "saliency" in wanted:
        if not np.any(Q):
            raise RunError("dataset has no ground-truth saliency; "
                           "request only occlusion/substitution metrics")
        out["saliency"] = metrics.saliency_report(art.pi, Q).to_dict()
    if "occlusion" in wanted:
        k_list = ev.get("k_list", DEFAULT_K_LIST)
        curves = {}
        for name, scores in (("explainer", art.pi), ("random", random_scores)):
            occ_rng = np.random.default_rng([seed, 103])
            res = metrics.occlusion_curve(proba, X, Y, scores, k_list, ex.baseline, occ_rng)
            curves[name] = {_percentile_key(k): v for k, v in res.items()}
        out["occlusion"] = curves
    if "substitution" in wanted:
        frac = ev.get("substitution_frac", 0.10)
        mean = ds.split("train")[0].mean(axis=0)
        subs = {}
        for mode in ev.get("substitution_modes", ["mean", "zero"]):
            subs[mode] = {name: metrics.top_substitution(proba, X, Y, scores, frac, mode, mean)
                          for name, scores in (("explainer", art.pi), ("random", random_scores))}
        out["substitution"] = subs
    return out


def cmd_evaluate(cfg):
    per_seed = []
    for seed in cfg["seeds"]:
        rep = evaluate_seed(cfg, seed)
        _write_json(run_dir(cfg, seed) / "reports" / "evaluate.json", rep)
        per_seed.append(rep)
    out = Path(cfg["out"]) / "reports"
    summary = {"seeds": cfg["seeds"], "per_seed": per_seed, "aggregate": {}}
    if "saliency" in per_seed[0]:
        summary["aggregate"]["saliency"] = {
            key: aggregate([r["saliency"][key] for r in per_seed]) for key in ("AUPRC", "AUP", "AUR")}
        _write_csv(out / "saliency.csv", ["seed", "AUPRC", "AUP", "AUR"],
                   [[r["seed"]] + [r["saliency"][k] for k in ("AUPRC", "AUP", "AUR")]
                    for r in per_seed])
    if "occlusion" in per_seed[0]:
        rows = []
        for r in per_seed:
            occ = r["occlusion"]
            for k in occ["explainer"]:
                rows.append([r["seed"], float(k),
                             occ["explainer"][k]["auroc"], occ["random"][k]["auroc"],
                             occ["explainer"][k]["accuracy"], occ["random"][k]["accuracy"]])
        _write_csv(out / "occlusion.csv",
                   ["seed", "k", "auroc_explainer", "auroc_random",
                    "accuracy_explainer", "accuracy_random"], rows)
    if "substitution" in per_seed[0]:
        rows = []
        for r in per_seed:
            for mode, res in r["substitution"].items():
                rows.append([r["seed"], mode, res["explainer"]["accuracy"], res["random"]["accuracy"],
                             res["explainer"]["auroc"], res["random"]["auroc"]])
        _write_csv(out / "substitution.csv",
                   ["seed", "mode", "accuracy_explainer", "accuracy_random",
                    "auroc_explainer", "auroc_random"], rows)
    _write_json(out / "evaluate.json", summary)
    for key, agg in summary["aggregate"].get("saliency", {}).items():
        print(f"{key}: {agg['mean']:.4f} +- {agg['std']:.4f}")
    print(f"reports -> {out}")


def instance_families(ex, X, train_X, seed):
    """Zero-, mean- and Gaussian-padded references and conditioned instances
    for the thresholded masks of ``X``."""
    art = expl.explain(ex, X)
    M = art.M
    rng = np.random.default_rng([seed, 107])
    b = ex.baseline.sample(rng, len(X))
    mean = np.asarray(train_X, dtype=np.float64).mean(axis=0)
    return {
        "zero": M * X,
        "mean": M * X + (1 - M) * mean,
        "gaussian": np.where(M == 1, X, b),
        "conditioned": art.X_tilde,
    }


def diagnose_seed(cfg, seed):
    ds = _load_dataset(cfg, seed)
    ex = _load_explainer(cfg, seed)
    Xtr = ds.split("train")[0].astype(np.float64)
    X = ds.split("test")[0].astype(np.float64)
    fams = instance_families(ex, X, Xtr, seed)
    rows = {name: metrics.dist_shift_report(Xtr, X, fams[name]).to_dict() for name in FAMILIES}
    sanity = {"kl_div": metrics.kl_divergence_estimate(X, X), "mmd": metrics.mmd_rbf(X, X)}
    return {"seed": seed, "families": rows, "sanity_original": sanity}


def cmd_diagnose(cfg):
    per_seed = []
    for seed in cfg["seeds"]:
        rep = diagnose_seed(cfg, seed)
        _write_json(run_dir(cfg, seed) / "reports" / "diagnose.json", rep)
        per_seed.append(rep)
    cols = ("kde_loglik", "kl_div", "mmd")
    agg = {fam: {c: aggregate([r["families"][fam][c] for r in per_seed]) for c in cols}
           for fam in FAMILIES}
    out = Path(cfg["out"]) / "reports"
    _write_json(out / "diagnose.json", {"seeds": cfg["seeds"], "per_seed": per_seed, "aggregate": agg})
    _write_csv(out / "diagnose.csv", ["family"] + [f"{c}_{s}" for c in cols for s in ("mean", "std")],
               [[fam] + [agg[fam][c][s] for c in cols for s in ("mean", "std")] for fam in FAMILIES])
    for fam in FAMILIES:
        print(f"{fam:12s} " + "  ".join(f"{c}={agg[fam][c]['mean']:.4f}" for c in cols))
    print(f"reports -> {out}")


VERBS = {
    "gen-data": cmd_gen_data,
    "train-classifier": cmd_train_classifier,
    "train-explainer": cmd_train_explainer,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="ibts", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int, help="run a single seed (overrides config and IBTS_SEED)")
        p.add_argument("--out", help="output root (default: config 'out' or ./runs)")
        if verb == "gen-data":
            p.add_argument("--kind", choices=datagen.KINDS)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        VERBS[args.verb](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ibts {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    except (RunError, ValueError, FloatingPointError, OSError, RuntimeError) as exc:
        print(f"ibts {args.verb}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
