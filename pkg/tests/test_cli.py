import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from jointsearch import cli, oracle
from jointsearch.derivation import load_genotype, load_policy

TINY = """\
seed: 1
dataset:
  synthetic: {classes: 4, side: 8, train: 48, test: 400}
search:
  layers: 3
  channels: 4
  batch_size: 4
  steps_per_epoch: 1
  val_eval_size: 8
  dtype: float64
  sampler: {n_arch: 2, n_policy: 1}
  optim: {warmup_epochs: 1, joint_epochs: 2}
eval: {cells: 2, channels: 4, epochs: 1, batch_size: 8}
"""


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


def run(*argv):
    return cli.main([*argv, "-q"])


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def searched(tmp_path, config):
    rd = tmp_path / "run"
    assert run("search", "--config", str(config), "--run-dir", str(rd)) == 0
    return rd


def test_generate_data_is_deterministic(tmp_path, config, capsys):
    for name in ("a", "b"):
        assert run("generate-data", "--config", str(config), "--run-dir", str(tmp_path / name)) == 0
    out = json.loads(capsys.readouterr().out.split("\n}\n")[0] + "\n}")
    assert out["command"] == "generate-data" and out["train"] == 48
    for f in ("dataset.npz", "dataset.json", "config.resolved", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_search_derive_evaluate(searched, capsys):
    rd = searched
    assert (rd / "config.resolved").exists() and (rd / "checkpoints" / "last.npz").exists()
    assert sorted(p.name for p in (rd / "checkpoints").glob("epoch_*.npz")) == ["epoch_001.npz", "epoch_002.npz", "epoch_003.npz"]
    assert len((rd / "metrics.jsonl").read_text().splitlines()) == 3

    assert run("derive", "--run-dir", str(rd)) == 0
    genotype = load_genotype(rd / "genotype.json")
    for kind in ("normal", "reduce"):
        assert all(len(node) == 2 for node in genotype.nodes(kind))
    assert abs(load_policy(rd / "policy.json").probs.sum() - 1) <= 1e-9

    assert run("evaluate", "--run-dir", str(rd), "--augmentation", "none", "--epochs", "0") == 0
    result = json.loads((rd / "eval" / "none-s1" / "result.json").read_text())
    assert abs(result["test_accuracy"] - 0.25) <= 0.08
    assert result["history"] == []

    assert run("evaluate", "--run-dir", str(rd), "--seed", "3") == 0
    assert (rd / "eval" / "derived-policy-s3" / "metrics.jsonl").exists()
    report = json.loads((rd / "report.json").read_text())
    assert {"search", "derive", "evaluate/none-s1", "evaluate/derived-policy-s3"} <= set(report)
    assert report["header"]["schema"] == "jointsearch.report"
    assert "finished" in (rd / "log").read_text()


def test_resume_matches_uninterrupted(tmp_path, config, searched):
    rd = tmp_path / "split"
    assert run("search", "--config", str(config), "--run-dir", str(rd), "--stop-after", "1") == 0
    assert len((rd / "metrics.jsonl").read_text().splitlines()) == 1
    assert run("search", "--run-dir", str(rd), "--resume") == 0
    assert (rd / "metrics.jsonl").read_bytes() == (searched / "metrics.jsonl").read_bytes()
    assert (rd / "checkpoints" / "last.npz").read_bytes() == (searched / "checkpoints" / "last.npz").read_bytes()


def test_resume_rejects_changed_config(searched, capsys):
    assert run("search", "--run-dir", str(searched), "--resume", "--set", "search.batch_size=6") == cli.EXIT_CONFIG
    assert "differs" in _error(capsys)["message"]


def test_missing_inputs(tmp_path, capsys):
    assert run("derive", "--run-dir", str(tmp_path / "empty")) == cli.EXIT_MISSING
    err = _error(capsys)
    assert err["error"] == "input" and err["exit_code"] == 3
    assert run("evaluate", "--run-dir", str(tmp_path / "empty")) == cli.EXIT_MISSING
    assert run("search", "--run-dir", str(tmp_path / "empty"), "--resume") == cli.EXIT_MISSING


def test_config_errors(tmp_path, capsys):
    assert run("generate-data", "--run-dir", str(tmp_path), "--set", "search.bogus=1") == cli.EXIT_CONFIG
    assert _error(capsys)["message"] == "unknown config key(s): search.bogus"
    assert run("generate-data", "--config", str(tmp_path / "nope.yaml"), "--run-dir", str(tmp_path)) == cli.EXIT_CONFIG
    assert run("verify", "--run-dir", str(tmp_path), "--draws", "10") == cli.EXIT_CONFIG


def test_stale_dataset_rejected(tmp_path, config, capsys):
    rd = tmp_path / "run"
    assert run("generate-data", "--config", str(config), "--run-dir", str(rd)) == 0
    assert run("search", "--run-dir", str(rd), "--set", "dataset.synthetic.noise=0.3") == cli.EXIT_CONFIG
    assert "different dataset config" in _error(capsys)["message"]


def test_dataset_error(tmp_path, capsys):
    args = ["--set", "dataset.kind=binary", "--set", f"dataset.binary.directory={tmp_path}"]
    assert run("generate-data", "--run-dir", str(tmp_path / "run"), *args) == cli.EXIT_DATA
    assert "no training batches" in _error(capsys)["message"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence(searched, capsys):
    assert run("derive", "--run-dir", str(searched)) == 0
    code = run("evaluate", "--run-dir", str(searched), "--augmentation", "none", "--set", "eval.lr=1e30")
    assert code == cli.EXIT_DIVERGED
    assert _error(capsys)["error"] == "diverged"


def test_verify_exit_codes(tmp_path, monkeypatch, capsys):
    def fake(passed):
        def run_verification(draws, seed, progress=None):
            checks = [oracle.Check("stub", passed, {"draws": draws})]
            for c in checks:
                progress(c)
            return oracle.Verification(checks, {"curved_validation_bias": []})

        return run_verification

    monkeypatch.setattr(oracle, "run_verification", fake(True))
    assert run("verify", "--run-dir", str(tmp_path), "--draws", "10000") == 0
    assert "PASS stub: draws=10000" in capsys.readouterr().out
    monkeypatch.setattr(oracle, "run_verification", fake(False))
    assert run("verify", "--run-dir", str(tmp_path), "--draws", "10000") == cli.EXIT_VERIFY
    assert "FAIL stub" in capsys.readouterr().out
    assert json.loads((tmp_path / "verify.json").read_text())["passed"] is False


def test_preview(tmp_path, config):
    rd = tmp_path / "run"
    assert run("preview-augment", "--config", str(config), "--run-dir", str(rd), "--images", "3", "--variants", "2", "--scale", "2") == 0
    img = np.asarray(Image.open(rd / "preview.png"))
    assert img.shape == (3 * 8 * 2, 3 * 8 * 2, 3)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "jointsearch", "--version"], capture_output=True, text=True, check=True)
    assert out.stdout.startswith("jointsearch ")
