"""End-to-end CLI tests: argument parsing, config precedence, exit codes,
and run-directory artifacts. All runs use throwaway-sized models."""

import csv
import json

import numpy as np
import pytest

from odt_lab.cli import ABLATION_PRESETS, ConfigError, build_config, build_parser, main
from odt_lab.envs import env_spec
from odt_lab.trajectory import load_jsonl

TINY = [
    "--set", "dataset_size=3",
    "--set", "n_layers=1",
    "--set", "n_heads=2",
    "--set", "embed_dim=16",
    "--set", "context_len=8",
    "--set", "batch_size=4",
    "--set", "pretrain_iterations=2",
    "--set", "rounds=1",
    "--set", "updates_per_round=1",
    "--set", "eval_interval=5",
    "--set", "eval_episodes=1",
    "--set", "eval_context=4",
    "--set", "exploration_context=4",
    "--set", "warmup_steps=2",
]


def parse(*argv):
    return build_parser().parse_args(list(argv))


@pytest.fixture(autouse=True)
def _no_ambient_seed(monkeypatch):
    monkeypatch.delenv("ODT_LAB_SEED", raising=False)


# ---------------------------------------------------------------------------
# Config assembly
# ---------------------------------------------------------------------------


def test_set_coerces_field_types():
    cfg = build_config(parse(
        "pretrain", "--run-dir", "x",
        "--set", "rounds=7",
        "--set", "lr=0.003",
        "--set", "hindsight_relabel=false",
        "--set", "dataset_quality=medium-replay",
        "--set", "rtg_scale=none",
    ))
    assert cfg.rounds == 7
    assert cfg.lr == 0.003
    assert cfg.hindsight_relabel is False
    assert cfg.dataset_quality == "medium-replay"
    assert cfg.rtg_scale == env_spec("pointctrl").expert_return  # resolved from none


def test_set_unknown_field_names_it():
    with pytest.raises(ConfigError, match="leraning_rate"):
        build_config(parse("pretrain", "--run-dir", "x", "--set", "leraning_rate=1"))


def test_set_bad_value_is_config_error():
    with pytest.raises(ConfigError, match="rounds"):
        build_config(parse("pretrain", "--run-dir", "x", "--set", "rounds=many"))
    with pytest.raises(ConfigError, match="KEY=VALUE"):
        build_config(parse("pretrain", "--run-dir", "x", "--set", "rounds"))


def test_config_file_and_set_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"rounds": 11, "lr": 0.5, "env": "gridgoal"}))
    cfg = build_config(parse(
        "pretrain", "--run-dir", "x", "--config", str(cfg_file),
        "--set", "lr=0.25",
    ))
    assert cfg.rounds == 11      # from file
    assert cfg.lr == 0.25        # --set beats file
    assert cfg.env == "gridgoal"


def test_dedicated_flags_beat_set_and_file(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"env": "gridgoal", "seed": 5}))
    cfg = build_config(parse(
        "pretrain", "--run-dir", "x", "--config", str(cfg_file),
        "--set", "seed=6", "--env", "pointctrl", "--seed", "9",
    ))
    assert cfg.env == "pointctrl" and cfg.seed == 9


def test_seed_env_fallback(monkeypatch):
    monkeypatch.setenv("ODT_LAB_SEED", "42")
    cfg = build_config(parse("pretrain", "--run-dir", "x"))
    assert cfg.seed == 42
    # explicit settings still win over the environment
    cfg = build_config(parse("pretrain", "--run-dir", "x", "--seed", "3"))
    assert cfg.seed == 3


def test_seed_defaults_to_zero():
    assert build_config(parse("pretrain", "--run-dir", "x")).seed == 0


def test_invalid_env_seed_is_config_error(monkeypatch, tmp_path):
    monkeypatch.setenv("ODT_LAB_SEED", "not-a-number")
    rc = main(["gen-data", "--out", str(tmp_path / "d.jsonl"), *TINY])
    assert rc == 1


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        build_config(parse("pretrain", "--run-dir", "x", "--config", "/no/such.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        build_config(parse("pretrain", "--run-dir", "x", "--config", str(bad)))
    listy = tmp_path / "list.json"
    listy.write_text("[1, 2]")
    with pytest.raises(ConfigError, match="JSON object"):
        build_config(parse("pretrain", "--run-dir", "x", "--config", str(listy)))
    unknown = tmp_path / "unk.json"
    unknown.write_text(json.dumps({"rouds": 3}))
    with pytest.raises(ConfigError, match="rouds"):
        build_config(parse("pretrain", "--run-dir", "x", "--config", str(unknown)))


@pytest.mark.parametrize("preset,field,value", [
    ("hindsight-off", "hindsight_relabel", False),
    ("gonline-1x", "g_online_scale", 1.0),
    ("curriculum-q90", "g_online_mode", "curriculum"),
    ("buffer-random-init", "buffer_init", "random"),
    ("return-weighted", "sample_strategy", "return"),
    ("deterministic-policy", "deterministic_policy", True),
])
def test_ablation_presets_map_to_config_fields(preset, field, value):
    cfg = build_config(parse("ablate", "--run-dir", "x", "--preset", preset))
    assert getattr(cfg, field) == value
    # every preset changes something away from the default run
    baseline = build_config(parse("finetune", "--run-dir", "x"))
    assert getattr(baseline, field) != value


def test_unknown_preset_rejected_by_parser(capsys):
    with pytest.raises(SystemExit):
        parse("ablate", "--run-dir", "x", "--preset", "no-such-thing")
    assert "invalid choice" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# Commands end to end
# ---------------------------------------------------------------------------


def test_gen_data_writes_loadable_jsonl(tmp_path, capsys):
    out = tmp_path / "data" / "d.jsonl"
    rc = main(["gen-data", "--out", str(out), "--env", "gridgoal", *TINY])
    assert rc == 0
    data = load_jsonl(out)
    assert len(data) == 3
    assert "wrote 3 episodes" in capsys.readouterr().out


def test_quiet_suppresses_output(tmp_path, capsys):
    out = tmp_path / "d.jsonl"
    rc = main(["gen-data", "--out", str(out), "--quiet", *TINY])
    assert rc == 0
    assert capsys.readouterr().out == ""


def test_pretrain_writes_run_dir(tmp_path, capsys):
    run = tmp_path / "run"
    rc = main(["pretrain", "--run-dir", str(run), *TINY])
    assert rc == 0
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["rtg_scale"] == env_spec("pointctrl").expert_return  # resolved form
    assert (run / "checkpoints" / "pretrained.npz").exists()
    assert (run / "pretrain_log.csv").exists()
    assert (run / "dataset.jsonl").exists()
    assert "pretrained:" in capsys.readouterr().out


def test_finetune_full_run_artifacts(tmp_path):
    run = tmp_path / "run"
    rc = main(["finetune", "--run-dir", str(run), "--quiet", *TINY])
    assert rc == 0
    with open(run / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2  # round 0 + 1 round
    assert (run / "checkpoints" / "final.npz").exists()
    assert (run / "buffer.snapshot").exists()


def test_finetune_resumes_from_checkpoint(tmp_path, capsys):
    pre_run = tmp_path / "pre"
    assert main(["pretrain", "--run-dir", str(pre_run), "--quiet", *TINY]) == 0
    ckpt = pre_run / "checkpoints" / "pretrained.npz"

    ft_run = tmp_path / "ft"
    rc = main([
        "finetune", "--run-dir", str(ft_run), "--checkpoint", str(ckpt),
        "--dataset", str(pre_run / "dataset.jsonl"), *TINY,
    ])
    assert rc == 0
    out = capsys.readouterr().out
    assert "resumed from" in out and "at step 2" in out
    # optimizer steps continue counting from the checkpoint
    with open(ft_run / "train_log.csv") as fh:
        first = next(csv.DictReader(fh))
    assert first["step"] == "3"


def test_finetune_checkpoint_architecture_mismatch(tmp_path):
    pre_run = tmp_path / "pre"
    assert main(["pretrain", "--run-dir", str(pre_run), "--quiet", *TINY]) == 0
    rc = main([
        "finetune", "--run-dir", str(tmp_path / "ft"),
        "--checkpoint", str(pre_run / "checkpoints" / "pretrained.npz"),
        *TINY, "--set", "embed_dim=32",
    ])
    assert rc == 1


def test_missing_checkpoint_is_exit_1(tmp_path, capsys):
    rc = main([
        "finetune", "--run-dir", str(tmp_path / "ft"),
        "--checkpoint", "/no/such.npz", *TINY,
    ])
    assert rc == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_missing_dataset_is_exit_1(tmp_path, capsys):
    rc = main([
        "pretrain", "--run-dir", str(tmp_path / "run"),
        "--dataset", "/no/such.jsonl", *TINY,
    ])
    assert rc == 1
    assert "error" in capsys.readouterr().err


def test_divergence_is_exit_2(tmp_path, capsys):
    rc = main([
        "pretrain", "--run-dir", str(tmp_path / "run"), "--quiet", *TINY,
        "--set", "optimizer=adamw", "--set", "lr=1e200",
        "--set", "pretrain_iterations=10",
    ])
    assert rc == 2
    assert "diverged" in capsys.readouterr().err


def test_eval_command(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["pretrain", "--run-dir", str(run), "--quiet", *TINY]) == 0
    report_path = tmp_path / "eval.json"
    rc = main([
        "eval", "--checkpoint", str(run / "checkpoints" / "pretrained.npz"),
        "--episodes", "1", "--context", "4", "--g-scale", "1.0",
        "--out", str(report_path),
    ])
    assert rc == 0
    assert "mean_return" in capsys.readouterr().out
    report = json.loads(report_path.read_text())
    assert report["n_episodes"] == 1
    assert report["g_eval"] == pytest.approx(env_spec("pointctrl").expert_return)


def test_eval_uses_env_recorded_in_checkpoint(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["pretrain", "--run-dir", str(run), "--env", "gridgoal",
                 "--quiet", *TINY]) == 0
    rc = main([
        "eval", "--checkpoint", str(run / "checkpoints" / "pretrained.npz"),
        "--episodes", "1", "--context", "4",
    ])
    assert rc == 0
    assert "gridgoal" in capsys.readouterr().out


def test_sweep_rtg_command(tmp_path):
    run = tmp_path / "run"
    assert main(["pretrain", "--run-dir", str(run), "--quiet", *TINY]) == 0
    out = tmp_path / "sweep.csv"
    rc = main([
        "sweep-rtg", "--checkpoint", str(run / "checkpoints" / "pretrained.npz"),
        "--scales", "0.5,1.0", "--episodes", "1", "--context", "4",
        "--out", str(out), "--quiet",
    ])
    assert rc == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert float(rows[1]["g_eval"]) == pytest.approx(env_spec("pointctrl").expert_return)


def test_sweep_rtg_bad_scales(tmp_path):
    run = tmp_path / "run"
    assert main(["pretrain", "--run-dir", str(run), "--quiet", *TINY]) == 0
    ckpt = str(run / "checkpoints" / "pretrained.npz")
    assert main(["sweep-rtg", "--checkpoint", ckpt, "--scales", "a,b"]) == 1
    assert main(["sweep-rtg", "--checkpoint", ckpt, "--scales", ","]) == 1


def test_ablate_runs_and_records_preset_config(tmp_path):
    run = tmp_path / "run"
    rc = main([
        "ablate", "--run-dir", str(run), "--preset", "hindsight-off",
        "--quiet", *TINY,
    ])
    assert rc == 0
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["hindsight_relabel"] is False
    assert (run / "metrics.csv").exists()


def test_cli_rerun_is_bit_identical(tmp_path):
    def run(tag):
        run_dir = tmp_path / tag
        assert main(["finetune", "--run-dir", str(run_dir), "--quiet",
                     "--strict-determinism", *TINY]) == 0
        return (run_dir / "metrics.csv").read_bytes()

    assert run("a") == run("b")


def test_checkpoint_rejects_garbage_file(tmp_path):
    junk = tmp_path / "junk.npz"
    junk.write_bytes(b"not actually a checkpoint")
    rc = main(["eval", "--checkpoint", str(junk), "--episodes", "1"])
    assert rc == 1
