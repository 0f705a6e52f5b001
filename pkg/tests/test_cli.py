import json
import re

import pytest

from ambirephrase.cli import main

TINY = {
    "world": {"n_scenes": 40},
    "vqa": {"max_iter": 60, "embed_dim": 8, "hidden_size": 16, "attention_dim": 8, "mlp_size": 16},
    "train": {"max_iter": 8, "batch_size": 8, "model": {"hidden_size": 16, "embed_dim": 8}},
    "sweep": {"eval_size": 30},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    base = ["--config", str(cfg), "--out", str(root / "out")]
    for cmd in (["gen-data"], ["train-vqa"], ["pretrain", "--strategy", "sampling"],
                ["finetune", "--strategy", "sampling"]):
        assert main(base + cmd) == 0
    return base, root / "out"


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_missing_required_option_is_usage_error(capsys):
    assert main(["rephrase", "--image", "7"]) == 1
    assert main(["--seed", "x", "gen-data"]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "sweep-delta" in capsys.readouterr().out


def test_verify_passes(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 5


def test_bad_config_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"nope": 1}}')
    assert main(["--config", str(bad), "--out", str(tmp_path), "gen-data"]) == 2
    assert "train.nope" in capsys.readouterr().err


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    assert main(["--out", str(tmp_path / "empty"), "train-vqa"]) == 2
    assert "gen-data" in capsys.readouterr().err


def test_sweep_with_missing_checkpoint_names_label(workspace, capsys):
    base, _ = workspace
    assert main(base + ["sweep-delta"]) == 2
    assert "Noise Pretrain" in capsys.readouterr().err


def test_rephrase_prints_contract(workspace, capsys):
    base, _ = workspace
    code = main(base + ["rephrase", "--image", "7", "--question", "what color is the circle",
                        "--target-entropy", "0.5"])
    assert code == 0
    out = capsys.readouterr().out
    e_g = float(re.search(r"^E_G: (\S+)", out, re.M).group(1))
    err = float(re.search(r"^\|E_T-E_G\|: (\S+)", out, re.M).group(1))
    assert re.search(r"^Q_G: ", out, re.M)
    assert err == pytest.approx(abs(0.5 - e_g), abs=2e-4)


def test_rephrase_rejects_bad_inputs(workspace, capsys):
    base, _ = workspace
    assert main(base + ["rephrase", "--image", "9999", "--question", "what color is the circle",
                        "--target-entropy", "0.5"]) == 2
    assert main(base + ["rephrase", "--image", "7", "--question", "what color is the circle",
                        "--target-entropy", "9"]) == 2


def test_sweep_and_export(workspace, capsys):
    base, out = workspace
    assert main(base + ["sweep-delta", "--labels", "Sampling Pretrain", "Sampling-FT"]) == 0
    assert (out / "sweeps" / "delta" / "rows.csv").exists()
    assert main(base + ["export-plots"]) == 0
    for mode in ("eg_minus_et", "eg_minus_es"):
        assert (out / "sweeps" / "delta" / f"boxplot_{mode}.csv").exists()
        assert (out / "sweeps" / "delta" / f"boxplot_{mode}.quartiles.csv").exists()
    assert json.loads((out / "config.json").read_text())["world"]["n_scenes"] == 40
