import csv
import json

import numpy as np
import pytest

from ibts import classifier, cli, datagen

TINY = {
    "dataset": {"kind": "freqshapes", "n_train": 48, "n_val": 8, "n_test": 32},
    "classifier": {"epochs": 2, "d_h": 8},
    "explainer": {"epochs": 2, "batch_size": 16, "d_h": 8, "conditioner_width": 8},
    "eval": {"k_list": [25, 50]},
    "seeds": [0, 1],
}


def write_config(path, doc=TINY):
    path.write_text(json.dumps(doc))
    return str(path)


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run_pipeline(tmp_path, name):
    cfg = write_config(tmp_path / f"{name}.json")
    out = str(tmp_path / name)
    for verb in ("gen-data", "train-classifier", "train-explainer", "evaluate", "diagnose"):
        assert cli.main([verb, "--config", cfg, "--out", out]) == 0, verb
    return tmp_path / name


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    return root, run_pipeline(root, "a")


# -- gen-data ---------------------------------------------------------------------
def test_gen_data_is_byte_identical(tmp_path, capsys):
    for name in ("a", "b"):
        assert cli.main(["gen-data", "--kind", "freqshapes", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a and a == b
    frac = float(capsys.readouterr().out.split("salient_fraction=")[1].split()[0])
    assert 0 < frac < 0.5
    ds = datagen.load_dataset(tmp_path / "a" / "seed-7" / "data")
    assert frac == pytest.approx(ds.Q.mean(), abs=1e-4)


def test_gen_data_requires_kind(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_is_usage_error(tmp_path):
    cfg = write_config(tmp_path / "c.json", {**TINY, "explainer": {"gamma": 1}})
    assert cli.main(["train-explainer", "--config", cfg, "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.json").write_text("{oops")
    assert cli.main(["evaluate", "--config", str(tmp_path / "bad.json")]) == 2


def test_seed_overrides(tmp_path, monkeypatch):
    cfg = write_config(tmp_path / "c.json")
    monkeypatch.setenv("IBTS_SEED", "5")
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert [p.name for p in (tmp_path / "o").iterdir()] == ["seed-5"]
    assert cli.main(["gen-data", "--config", cfg, "--seed", "6", "--out", str(tmp_path / "p")]) == 0
    assert [p.name for p in (tmp_path / "p").iterdir()] == ["seed-6"]


def test_missing_artifacts_exit_1(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert cli.main(["evaluate", "--config", cfg, "--out", str(tmp_path / "none")]) == 1
    assert "gen-data" in capsys.readouterr().err


# -- training -----------------------------------------------------------------------
def test_history_schema(pipeline):
    _, out = pipeline
    with open(out / "seed-0" / "explainer" / "history.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "L_LC", "L_M", "L_con", "L_KL", "L_dr", "total"]
    assert len(rows) == 1 + TINY["explainer"]["epochs"]
    assert classifier.load_model(out / "seed-0" / "classifier").frozen


def test_unfrozen_classifier_is_refused(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {**TINY, "seeds": [0]})
    out = tmp_path / "o"
    assert cli.main(["gen-data", "--config", cfg, "--out", str(out)]) == 0
    model = classifier.ClassifierModel(classifier.ClassifierConfig(d_h=8), 50, 1, 4)
    classifier.save_model(model, out / "seed-0" / "classifier")
    assert cli.main(["train-explainer", "--config", cfg, "--out", str(out)]) == 1
    assert "classifier must be frozen" in capsys.readouterr().err


# -- evaluation -----------------------------------------------------------------------
def test_aggregate_population_std():
    agg = cli.aggregate([0.8, 0.9])
    assert agg["mean"] == pytest.approx(0.85)
    assert agg["std"] == pytest.approx(0.05)


def test_evaluate_reports(pipeline):
    _, out = pipeline
    rep = json.loads((out / "reports" / "evaluate.json").read_text())
    assert rep["seeds"] == [0, 1] and len(rep["per_seed"]) == 2
    for key in ("AUPRC", "AUP", "AUR"):
        vals = [r["saliency"][key] for r in rep["per_seed"]]
        assert rep["aggregate"]["saliency"][key]["mean"] == pytest.approx(np.mean(vals))
        assert rep["aggregate"]["saliency"][key]["std"] == pytest.approx(np.std(vals))
        assert all(0 <= v <= 1 for v in vals)
    assert list(rep["per_seed"][0]["occlusion"]["explainer"]) == ["0", "25", "50"]
    with open(out / "reports" / "occlusion.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["seed"], float(r["k"])) for r in rows] == [(s, k) for s in ("0", "1") for k in (0.0, 25.0, 50.0)]
    with open(out / "reports" / "substitution.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4
    assert (out / "seed-1" / "explanations" / "explanations.bin").exists()


def test_evaluate_without_ground_truth(pipeline, tmp_path, capsys):
    _, out = pipeline
    ds = datagen.load_dataset(out / "seed-0" / "data")
    blank = datagen.TimeSeriesDataset(ds.X, ds.Y, np.zeros_like(ds.Q), ds.splits, ds.n_classes, ds.name)
    datagen.save_dataset(blank, tmp_path / "blank")
    cfg = {**TINY, "seeds": [0], "dataset": {"dir": str(tmp_path / "blank")}}
    path = write_config(tmp_path / "c.json", cfg)
    assert cli.main(["evaluate", "--config", path, "--out", str(out)]) == 1
    assert "occlusion" in capsys.readouterr().err


def test_diagnose_schema(pipeline):
    _, out = pipeline
    rep = json.loads((out / "reports" / "diagnose.json").read_text())
    for r in rep["per_seed"]:
        assert set(r["families"]) == {"zero", "mean", "gaussian", "conditioned"}
        for row in r["families"].values():
            assert set(row) == {"kde_loglik", "kl_div", "mmd"}
        assert r["sanity_original"]["kl_div"] == pytest.approx(0.0, abs=1e-9)
        assert abs(r["sanity_original"]["mmd"]) < 0.05
    with open(out / "reports" / "diagnose.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 5 and len(rows[0]) == 7


def test_pipeline_is_deterministic(pipeline):
    root, out = pipeline
    again = run_pipeline(root, "b")
    for sub in ("reports", "seed-0/reports", "seed-1/explainer"):
        assert tree_bytes(out / sub) == tree_bytes(again / sub)
