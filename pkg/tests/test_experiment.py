import csv
import json
import math
import statistics
from pathlib import Path

import pytest

from leukonet import experiment as ex
from leukonet.cli import main
from leukonet.stats import mann_whitney_u_one_sided
from leukonet.training import HISTORY_FIELDS


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert _run("generate", "--out", out, "--subjects", 6, "--cells", 4, "--size", 32, "--seed", 2) == 0
    return out / "manifest.csv"


SMALL = ("--epochs", 2, "--crop-size", 32, "--tta-rotations", 2)


# --- generate -------------------------------------------------------------


def test_generate_is_reproducible(tmp_path, capsys):
    _run("generate", "--out", tmp_path / "a", "--subjects", 6, "--cells", 2, "--size", 32)
    _run("generate", "--out", tmp_path / "b", "--subjects", 6, "--cells", 2, "--size", 32)
    a = json.loads((tmp_path / "a" / "metadata.json").read_text())
    b = json.loads((tmp_path / "b" / "metadata.json").read_text())
    assert a["manifest_sha256"] == b["manifest_sha256"]
    assert "sha256" in capsys.readouterr().out


def test_generate_default_ratio(tmp_path):
    _run("generate", "--out", tmp_path, "--cells", 1, "--size", 16)
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert meta["class_counts"] == {"ALL": 20, "normal": 10}


def test_generate_too_few_subjects(tmp_path, capsys):
    assert _run("generate", "--out", tmp_path, "--subjects", 3) == 2
    assert "at least 2 subjects per class" in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    assert _run("train", "--mode", "bogus") == 2
    assert _run("frobnicate") == 2
    assert _run("sweep", "--seeds", "many") == 2


# --- modes ----------------------------------------------------------------


@pytest.mark.parametrize(
    "mode, extra, expected_rot, expected_mult",
    [
        ("proposal", (), 2, {"stage1": 1e-6, "stage2": 1e-6, "stage3": 1e-4, "stage4": 1e-4, "stage5": 1e-4, "fc": 1e-2}),
        ("norot", (), 1, {"stage1": 1e-6, "stage2": 1e-6, "stage3": 1e-4, "stage4": 1e-4, "stage5": 1e-4, "fc": 1e-2}),
        ("nospeclr", ("--eta-all", "1e-4"), 2, {g: 1e-4 for g in ("stage1", "stage2", "stage3", "stage4", "stage5", "fc")}),
    ],
)
def test_train_modes(dataset, tmp_path, mode, extra, expected_rot, expected_mult):
    out = tmp_path / mode
    assert _run("train", "--manifest", dataset, "--out", out, "--mode", mode, *SMALL, *extra) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["tta_rotations"] == expected_rot
    assert cfg["schedule"]["group_multipliers"] == expected_mult
    assert cfg["schedule"]["decay_every_epochs"] == 2 and cfg["schedule"]["decay_factor"] == 10.0
    assert len(cfg["manifest_sha256"]) == 64
    best = json.loads((out / "best.json").read_text())
    history = ex.read_history(out / "history.csv")
    assert best["best_epoch"] == max(range(len(history)), key=lambda i: (history[i]["val_f1"], -i))


def test_norot_training_identical_to_proposal(dataset, tmp_path):
    for mode in ("proposal", "norot"):
        _run("train", "--manifest", dataset, "--out", tmp_path / mode, "--mode", mode, *SMALL)
    for epoch in (0, 1):
        name = f"checkpoints/epoch{epoch:02d}.ckpt"
        assert (tmp_path / "proposal" / name).read_bytes() == (tmp_path / "norot" / name).read_bytes()


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "exp.ini"
    cfg.write_text("[experiment]\nmode = nospeclr\nnospeclr_eta_all = 1e-3\nn_seeds = 3\n")
    exp = ex.resolve_config(ex.read_config_file(cfg), nospeclr_eta_all=1e-5, mode=None)
    assert (exp.mode, exp.nospeclr_eta_all, exp.n_seeds, exp.epochs) == ("nospeclr", 1e-5, 3, 6)
    cfg.write_text("[experiment]\nlearning_rate = 3\n")
    with pytest.raises(ex.ConfigurationError):
        ex.read_config_file(cfg)


# --- sweeps ---------------------------------------------------------------


def test_sweep_two_seeds_and_recomputation(dataset, tmp_path):
    out = tmp_path / "sweep"
    assert _run("sweep", "--manifest", dataset, "--out", out, "--seeds", 2, "--seed", 4, *SMALL) == 0
    sweep = json.loads((out / "sweep.json").read_text())
    assert [r["seed"] for r in sweep["per_seed"]] == [4, 5]
    f1s = [json.loads((out / f"seed_{s:04d}" / "best.json").read_text())["metrics"]["weighted_f1"] for s in (4, 5)]
    assert sweep["table"]["weighted_f1"]["mean"] == pytest.approx((f1s[0] + f1s[1]) / 2, abs=1e-15)
    assert sweep["table"]["weighted_f1"]["std"] == pytest.approx(statistics.stdev(f1s), abs=1e-15)
    for m in ex.TABLE_METRICS:
        vals = [json.loads((out / f"seed_{s:04d}" / "best.json").read_text())["metrics"][m] for s in (4, 5)]
        assert sweep["table"][m]["min"] == min(vals) and sweep["table"][m]["max"] == max(vals)
    assert sweep["selected_f1"] == max(f1s)

    first = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert _run("sweep", "--manifest", dataset, "--out", out, "--seeds", 2, "--seed", 4, *SMALL) == 0
    second = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert first == second


def _fake_run(exp, seed, run_dir, manifest=None):
    if seed == 13:
        raise RuntimeError("boom")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    metrics = {m: 0.5 + seed / 100 for m in ex.TABLE_METRICS}
    ex.write_json(run_dir / "best.json", {"best_epoch": 0, "checkpoint_sha256": "x", "metrics": metrics})
    return {}


def test_failed_seed_tolerance(monkeypatch, dataset, tmp_path):
    monkeypatch.setattr(ex, "run_single", _fake_run)
    exp = ex.ExperimentConfig(manifest=str(dataset), n_seeds=10, base_seed=10)
    res = ex.run_sweep(exp, tmp_path / "ok")
    assert res["failed_seeds"] == [13] and res["table"]["weighted_f1"]["n"] == 9
    with pytest.raises(ex.SweepError):
        ex.run_sweep(ex.ExperimentConfig(manifest=str(dataset), n_seeds=5, base_seed=10), tmp_path / "bad")


# --- hand-built sweep fixtures ----------------------------------------------


def make_sweep(root, mode, f1_by_seed, curves):
    """``curves[seed]`` is a list of per-epoch val_f1 values."""
    root.mkdir(parents=True)
    per_seed = []
    for seed, f1 in f1_by_seed.items():
        run = root / f"seed_{seed:04d}"
        run.mkdir()
        with open(run / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_FIELDS)
            for epoch, v in enumerate(curves[seed]):
                w.writerow([epoch, 0.5, 0.4, v, v, v, v, v, v])
        per_seed.append({"seed": seed, "best_epoch": 0, "weighted_f1": f1})
    ex.write_json(root / "sweep.json", {"mode": mode, "per_seed": per_seed})
    return root


def test_ablation_curves_against_fixture(tmp_path):
    curves = {0: [0.5, 0.7], 1: [0.7, 0.9]}
    prop = make_sweep(tmp_path / "p", "proposal", {0: 0.7, 1: 0.9}, curves)
    nr = make_sweep(tmp_path / "n", "norot", {0: 0.5, 1: 0.6}, {0: [0.4, 0.5], 1: [0.4, 0.6]})
    assert _run("ablate", prop, nr, "--out", tmp_path / "ab") == 0
    with open(tmp_path / "ab" / "curves.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * len(ex.CURVE_METRICS)
    got = {(r["mode"], int(r["epoch"]), r["metric"]): (float(r["mean"]), float(r["std"])) for r in rows}
    assert got[("proposal", 0, "val_f1")] == pytest.approx((0.6, math.sqrt(0.02)))
    assert got[("proposal", 1, "val_f1")] == pytest.approx((0.8, math.sqrt(0.02)))
    assert got[("norot", 1, "val_f1")] == pytest.approx((0.55, math.sqrt(0.005)))
    assert got[("norot", 0, "val_loss")] == (0.4, 0.0)


def test_ablation_identical_sweeps_half(tmp_path):
    scores = {s: 0.8 + 0.01 * s for s in range(4)}
    curves = {s: [0.5] for s in scores}
    a = make_sweep(tmp_path / "a", "proposal", scores, curves)
    b = make_sweep(tmp_path / "b", "nospeclr", scores, curves)
    report = ex.compare_sweeps([a, b], tmp_path / "out")
    assert report["tests"]["nospeclr"]["p"] == 0.5


def test_ablation_dominance_matches_enumeration(tmp_path):
    a = make_sweep(tmp_path / "a", "proposal", {0: 0.95, 1: 0.96, 2: 0.97}, {s: [0.5] for s in range(3)})
    b = make_sweep(tmp_path / "b", "norot", {0: 0.80, 1: 0.81, 2: 0.82, 3: 0.83}, {s: [0.5] for s in range(4)})
    report = ex.compare_sweeps([a, b], tmp_path / "out")
    assert report["tests"]["norot"]["p"] == pytest.approx(1 / math.comb(7, 3))
    assert report["tests"]["norot"]["u"] == mann_whitney_u_one_sided([0.95, 0.96, 0.97], [0.8, 0.81, 0.82, 0.83]).u


def test_ablate_needs_proposal(tmp_path):
    b = make_sweep(tmp_path / "b", "norot", {0: 0.8}, {0: [0.5]})
    assert _run("ablate", b, "--out", tmp_path / "o") == 2


# --- reports --------------------------------------------------------------


def _fake_run_dir(root, epochs=6):
    root.mkdir()
    with open(root / "history.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for e in range(epochs):
            w.writerow([e] + [repr(0.1 * (e + 1))] * 8)
    per_subject = {"A01": [3, 4], "H02": [1, 2], "B07": [2, 2], "H01": [5, 5]}
    ex.write_json(
        root / "best.json",
        {"mode": "proposal", "seed": 0, "best_epoch": 5, "metrics": {}, "report": {"per_subject": per_subject}},
    )
    return root


def test_report_bundle(tmp_path):
    run = _fake_run_dir(tmp_path / "run")
    assert _run("report", run, "--out", tmp_path / "r1") == 0
    with open(tmp_path / "r1" / "curves.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for series in ex.CURVE_METRICS:
        assert sum(r["series"] == series for r in rows) == 6
    subjects = (tmp_path / "r1" / "subjects.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in subjects[1:]] == ["H01", "H02", "A01", "B07"]

    assert _run("report", run, "--out", tmp_path / "r2") == 0
    for name in ("curves.csv", "subjects.csv", "summary.json"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_report_missing_artifacts(tmp_path, capsys):
    run = _fake_run_dir(tmp_path / "run")
    (run / "history.csv").unlink()
    assert _run("report", run, "--out", tmp_path / "r") == 1
    assert "history.csv" in capsys.readouterr().err
    assert _run("report", tmp_path / "nothing") == 1
