import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..")))

import csv
import json

import pytest

from lodslab import config
from lodslab.main import build_parser, main
from lodslab.metrics import METRICS_HEADER


def json_output(captured):
    """The JSON document printed after the argument banner."""
    return json.loads(captured.out.split("-" * 50 + "\n")[-1])


def distill(run_dir, *extra):
    return main(["distill", "--variant", "sds", "--w", "1000", "--generator", "identity",
                 "--steps", "25", "--particles", "16", "--out", str(run_dir), *extra])


def test_print_defaults(capsys):
    assert main(["--print-defaults"]) == 0
    out = capsys.readouterr().out
    assert "[prior]" in out
    assert 'variant = "sds"' in out


def test_missing_command(capsys):
    assert main([]) == 2
    assert "a command is required" in capsys.readouterr().err


def test_unknown_flag_exits_with_usage_error():
    with pytest.raises(SystemExit) as excinfo:
        main(["distill", "--warp-speed"])
    assert excinfo.value.code == 2


def test_parser_accepts_infinite_w():
    args = build_parser().parse_args(["distill", "--variant", "lods_embedding", "--w", "inf"])
    assert args.w == "inf"


def test_distill_writes_metrics_and_config(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert distill(run_dir) == 0
    summary = json_output(capsys.readouterr())
    assert summary["steps"] == 25
    assert summary["denoiser"] == "analytic"
    with open(run_dir / config.METRICS_FILE, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRICS_HEADER
    assert len(rows) == 26
    assert all(row[2] == "" for row in rows[1:])
    assert (run_dir / config.CONFIG_FILE).is_file()
    assert (run_dir / config.THETA_FILE).is_file()


def test_distill_is_byte_reproducible(tmp_path):
    assert distill(tmp_path / "a") == 0
    assert distill(tmp_path / "b") == 0
    for name in (config.METRICS_FILE, config.THETA_FILE, config.CONFIG_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_changes_the_run(tmp_path):
    assert distill(tmp_path / "a", "--seed", "1") == 0
    assert distill(tmp_path / "b", "--seed", "2") == 0
    metrics = config.METRICS_FILE
    assert (tmp_path / "a" / metrics).read_bytes() != (tmp_path / "b" / metrics).read_bytes()


def test_eval_and_export_of_a_particle_run(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert distill(run_dir, "--snapshot-every", "10") == 0
    capsys.readouterr()
    assert main(["eval", "--run", str(run_dir), "--n", "200"]) == 0
    report = json_output(capsys.readouterr())
    assert report["mmd"] >= 0.0
    assert (run_dir / "eval.json").is_file()
    assert main(["export", "--run", str(run_dir)]) == 0
    with open(run_dir / "particles.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "particle", "x0"]
    # snapshots 0, 10, 20, 24 and the final theta under step 25
    assert len(rows) == 1 + 5 * 16


def test_train_then_distill_with_the_checkpoint(tmp_path, capsys):
    train_dir = tmp_path / "train"
    assert main(["train", "--data", "mixture2d", "--steps", "20", "--out", str(train_dir)]) == 0
    summary = json_output(capsys.readouterr())
    assert summary["steps"] == 20
    checkpoint = train_dir / config.DENOISER_FILE
    assert checkpoint.is_file()
    assert (train_dir / config.LOSS_FILE).is_file()

    run_dir = tmp_path / "lods"
    code = main(["distill", "--variant", "lods_embedding", "--w", "inf", "--steps", "5", "--particles", "8",
                 "--checkpoint", str(checkpoint), "--out", str(run_dir)])
    assert code == 0
    summary = json_output(capsys.readouterr())
    assert summary["w"] == "inf"
    assert summary["forwards"] == 15
    assert summary["backwards"] == 5


def test_oracle_preset(tmp_path, capsys):
    code = main(["oracle", "--preset", "equal-variance", "--w", "7.5", "--n", "20000", "--out", str(tmp_path)])
    assert code == 0
    reports = json_output(capsys.readouterr())
    assert reports[0]["analytic"] == 7.5
    assert all(r["verdict"] == "pass" for r in reports)
    assert (tmp_path / "oracle.json").is_file()


def test_bad_config_file_returns_one(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[prior]\nw = \"fast\"\n")
    assert main(["distill", "--config", str(bad), "--out", str(tmp_path / "run")]) == 1
    assert "w must be a number" in capsys.readouterr().err


def test_bad_guidance_flag_returns_one(tmp_path, capsys):
    assert distill(tmp_path / "run", "--w", "abc") == 1
    assert "lodslab: error" in capsys.readouterr().err


def test_missing_checkpoint_returns_one(tmp_path, capsys):
    code = main(["distill", "--checkpoint", str(tmp_path / "nope.lods"), "--out", str(tmp_path / "run")])
    assert code == 1
    assert "does not exist" in capsys.readouterr().err


def test_splats_need_matching_denoiser(tmp_path):
    code = main(["distill", "--generator", "splats", "--steps", "2", "--out", str(tmp_path / "run")])
    assert code == 1


def test_invalid_prior_combination_returns_one(tmp_path):
    code = main(["distill", "--variant", "sds", "--w", "inf", "--steps", "2", "--out", str(tmp_path / "run")])
    assert code == 1


def test_variant_compare_without_checkpoint(tmp_path, capsys):
    assert main(["recipe", "variant-compare", "--out", str(tmp_path)]) == 1
    assert "checkpoint" in capsys.readouterr().err
