import json
import subprocess
import sys

import numpy as np
import pytest

from combassign.assign import infer_batch
from combassign.cli import main, read_manifest
from combassign.data import GmmSpec, gmm_generate, keep_probabilities, load_csv
from combassign.encoder import forward, load_checkpoint

SMALL_TRAIN = ["--epochs", "2", "--nz", "4", "--hidden", "8", "--batch-size", "50"]


@pytest.fixture
def dataset(tmp_path):
    path = str(tmp_path / "d.csv")
    assert main(["generate", "--k", "3", "--dim", "4", "--n", "150", "--seed", "1", "--out", path]) == 0
    return path


# -- generate -------------------------------------------------------------------


def test_generate_writes_csv_and_manifest(tmp_path, capsys):
    out = str(tmp_path / "g.csv")
    assert main(["generate", "--k", "10", "--dim", "16", "--n", "1000", "--seed", "7", "--out", out]) == 0
    ds = load_csv(out)
    assert ds.features.shape == (1000, 16)
    man = read_manifest(out + ".manifest")
    assert man["command"] == "generate" and man["rows"] == "1000" and man["seed"] == "7"
    assert sum(int(c) for c in man["class_counts"].split(",")) == 1000
    np.testing.assert_allclose([float(p) for p in man["prior"].split(",")], 0.1)
    assert "1000 rows" in capsys.readouterr().out


def test_generate_is_byte_identical(tmp_path):
    args = ["generate", "--k", "4", "--dim", "3", "--n", "200", "--seed", "5", "--imbalance", "2"]
    a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    assert main(args + ["--out", a]) == 0
    assert main(args + ["--out", b]) == 0
    assert open(a, "rb").read() == open(b, "rb").read()
    assert open(a + ".manifest").read() == open(b + ".manifest").read()


def test_generate_imbalance3_manifest_prior(tmp_path):
    out = str(tmp_path / "i.csv")
    assert main(["generate", "--n", "2000", "--imbalance", "3", "--out", out]) == 0
    prior = np.array([float(p) for p in read_manifest(out + ".manifest")["prior"].split(",")])
    keep = np.linspace(1.0, 0.1, 10)
    np.testing.assert_allclose(prior, keep / keep.sum(), rtol=1e-15)
    np.testing.assert_allclose(prior * 5.5, keep_probabilities(3, 10), atol=1e-14)


def test_generate_exact_quota(tmp_path):
    out = str(tmp_path / "q.csv")
    assert main(["generate", "--k", "2", "--n", "400", "--imbalance", "3", "--exact-quota", "--out", out]) == 0
    before = np.bincount(gmm_generate(GmmSpec.desk(k=2, d=16, seed=0), 400).labels, minlength=2)
    np.testing.assert_array_equal(np.bincount(load_csv(out).labels), np.round(before * keep_probabilities(3, 2)))
    man = read_manifest(out + ".manifest")
    assert man["exact_quota"] == "true"


def test_generate_unwritable_path_is_usage_error(tmp_path, capsys):
    assert main(["generate", "--n", "10", "--out", str(tmp_path / "missing" / "x.csv")]) == 2
    assert "cannot write" in capsys.readouterr().err


def test_generate_rejects_bad_flags():
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--k", "0", "--out", "x.csv"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        main(["generate", "--imbalance", "4", "--out", "x.csv"])


# -- train ----------------------------------------------------------------------


def test_train_writes_all_outputs(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", dataset, "--out-dir", str(out), "--method", "ca"] + SMALL_TRAIN) == 0
    lines = (out / "epochs.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for i, line in enumerate(lines):
        rec = json.loads(line)
        assert list(rec) == ["epoch", "loss", "acc", "nmi", "ari", "kl_star_hard", "kl_star_soft", "hard_counts", "soft_counts"]
        assert rec["epoch"] == i and sum(rec["hard_counts"]) == 150
    summary = (out / "summary.txt").read_text()
    assert summary.startswith("method: ca\n")
    assert "acc: " in summary and "kl_star_hard: " in summary
    params, model = load_checkpoint(out / "checkpoint.bin")
    assert params.kind == "mlp" and model.k == 3 and params.nz == 4
    man = read_manifest(out / "manifest.txt")
    assert man["epochs"] == "2" and man["k"] == "3" and man["data"] == dataset


def test_train_checkpoint_reproduces_eval(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", dataset, "--out-dir", str(out), "--best-by", "last"] + SMALL_TRAIN) == 0
    params, model = load_checkpoint(out / "checkpoint.bin")
    z, _ = forward(load_csv(dataset).features, params)
    counts = np.bincount(infer_batch(z, model), minlength=3)
    last = json.loads((out / "epochs.jsonl").read_text().splitlines()[-1])
    # the checkpoint holds the post-epoch state; rank alignment is off for a uniform prior
    assert counts.tolist() == last["hard_counts"]


@pytest.mark.parametrize("method", ["ca", "sk", "ent", "ss", "varm", "noreg"])
def test_train_every_method(dataset, tmp_path, method):
    out = tmp_path / method
    assert main(["train", "--data", dataset, "--out-dir", str(out), "--method", method] + SMALL_TRAIN) == 0
    assert f"method: {method}" in (out / "summary.txt").read_text()


def test_train_is_deterministic(dataset, tmp_path):
    for name in ("a", "b"):
        assert main(["train", "--data", dataset, "--out-dir", str(tmp_path / name)] + SMALL_TRAIN) == 0
    assert (tmp_path / "a" / "epochs.jsonl").read_bytes() == (tmp_path / "b" / "epochs.jsonl").read_bytes()
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() == (tmp_path / "b" / "checkpoint.bin").read_bytes()


def test_config_precedence(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 3, "lr": 0.05, "nz": 4, "hidden": 8, "data": dataset, "method": "noreg"}))
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out-dir", str(out), "--epochs", "1"]) == 0
    man = read_manifest(out / "manifest.txt")
    assert man["epochs"] == "1"  # flag beats file
    assert man["lr"] == "0.050000000000000003"  # file beats default
    assert man["method"] == "noreg"
    assert man["batch_size"] == "256"  # default


def test_unknown_config_key_is_usage_error(dataset, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "learning_rate": 0.1}))
    assert main(["train", "--config", str(cfg), "--data", dataset, "--out-dir", str(tmp_path / "r")]) == 2
    assert "learning_rate" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_config_errors_before_training(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 0}))
    assert main(["train", "--config", str(cfg), "--data", dataset, "--out-dir", str(tmp_path / "r")]) == 2
    assert not (tmp_path / "r").exists()
    cfg.write_text("[1, 2]")
    assert main(["train", "--config", str(cfg), "--data", dataset]) == 2
    cfg.write_text("{not json")
    assert main(["train", "--config", str(cfg), "--data", dataset]) == 2


def test_epochs_zero_is_usage_error(dataset):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", dataset, "--epochs", "0"])
    assert exc.value.code == 2


def test_missing_dataset_is_usage_error(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.csv")]) == 2
    assert main(["train"]) == 2


def test_malformed_dataset_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("f0,f1\n1,2\n3\n")
    assert main(["train", "--data", str(bad)]) == 2
    assert "bad.csv:3" in capsys.readouterr().err


def test_prior_from_manifest(tmp_path):
    data = str(tmp_path / "imb.csv")
    assert main(["generate", "--k", "3", "--dim", "4", "--n", "300", "--imbalance", "3", "--out", data]) == 0
    out = tmp_path / "run"
    assert main(["train", "--data", data, "--out-dir", str(out), "--prior", "manifest"] + SMALL_TRAIN) == 0
    prior = [float(p) for p in read_manifest(out / "manifest.txt")["prior"].split(",")]
    keep = keep_probabilities(3, 3)
    np.testing.assert_allclose(prior, keep / keep.sum())


def test_prior_flag_variants(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", dataset, "--out-dir", str(out), "--prior", "2,1,1"] + SMALL_TRAIN) == 0
    assert read_manifest(out / "manifest.txt")["prior"] == "2,1,1"
    assert main(["train", "--data", dataset, "--prior", "a,b"] + SMALL_TRAIN) == 2
    assert main(["train", "--data", dataset, "--prior", "1,1"] + SMALL_TRAIN) == 2
    lone = tmp_path / "lone.csv"
    lone.write_text(open(dataset).read())
    assert main(["train", "--data", str(lone), "--prior", "manifest"] + SMALL_TRAIN) == 2


def test_boolean_flags_reach_config(dataset, tmp_path):
    out = tmp_path / "run"
    args = ["train", "--data", dataset, "--out-dir", str(out), "--warm-start", "--keep-counts", "--no-estimate-covars"]
    assert main(args + SMALL_TRAIN) == 0
    man = read_manifest(out / "manifest.txt")
    assert man["warm_start"] == "true" and man["keep_counts_across_batches"] == "true"
    assert man["estimate_covars"] == "false"


# -- verify ---------------------------------------------------------------------


def test_verify_single_suites(tmp_path, capsys):
    report = tmp_path / "r.json"
    assert main(["verify", "--suite", "d-matrices", "--report", str(report)]) == 0
    out = capsys.readouterr().out
    assert "d-matrices: PASS" in out
    assert "D1 hard=1.50 soft=1.10, D2 hard=0.00 soft=1.58" in out
    data = json.loads(report.read_text())
    assert data["passed"] is True and data["suites"][0]["name"] == "d-matrices"


def test_verify_lemma1_with_n_max(tmp_path):
    report = tmp_path / "r.json"
    assert main(["verify", "--suite", "lemma1", "--n-max", "30", "--report", str(report)]) == 0
    suite = json.loads(report.read_text())["suites"][0]
    assert suite["passed"] and not suite["failures"]
    assert len(suite["stats"]["max_gap_by_n"]) == 30


@pytest.mark.slow
def test_verify_all_passes(tmp_path, capsys):
    report = tmp_path / "all.json"
    assert main(["verify", "--report", str(report)]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == len(json.loads(report.read_text())["suites"])
    assert "FAIL" not in out


def test_verify_unwritable_report(tmp_path):
    assert main(["verify", "--suite", "d-matrices", "--report", str(tmp_path / "no" / "r.json")]) == 2


def test_module_entry_point(tmp_path):
    out = tmp_path / "m.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "combassign", "generate", "--n", "20", "--k", "2", "--dim", "2", "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
    bad = subprocess.run([sys.executable, "-m", "combassign", "train", "--epochs", "0"], capture_output=True, text=True)
    assert bad.returncode == 2


@pytest.mark.slow
def test_train_summaries_on_default_desk_dataset(tmp_path):
    data = str(tmp_path / "desk.csv")
    assert main(["generate", "--out", data]) == 0
    summaries = {}
    for method in ("ca", "noreg"):
        out = tmp_path / method
        assert main(["train", "--data", data, "--out-dir", str(out), "--method", method, "--epochs", "20"]) == 0
        summaries[method] = dict(line.split(": ") for line in (out / "summary.txt").read_text().splitlines())
    assert float(summaries["ca"]["acc"]) >= 0.95
    assert float(summaries["noreg"]["kl_star_hard"]) >= 1.0
