import json

import numpy as np
import pytest

from qforge.cli import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_OK,
    apply_overrides,
    available_presets,
    build_parser,
    load_preset,
    main,
    parse_overrides,
)
from qforge.errors import ConfigError
from qforge.metrics import HEADER, CsvMetricsWriter, MetricsRow


FAST_OVERRIDES = [
    "--set", "agent.n_episodes=6",
    "--set", "agent.eval_period=3",
    "--set", "agent.eval_episodes=2",
    "--set", "agent.warmup=100000",
]


def run_train(out_dir, seed=42, extra=()):
    return main(
        ["train", "--preset", "catch-dcqn-desk", "--seed", str(seed),
         "--out", str(out_dir), *FAST_OVERRIDES, *extra]
    )


# -- presets and overrides -----------------------------------------------------------


def test_presets_enumerate_and_load():
    names = available_presets()
    assert "catch-dcqn-desk" in names
    assert "centipede-dcqn" in names
    preset = load_preset("centipede-dcqn")
    assert preset["agent"]["lr"] == 1e-4
    assert preset["agent"]["target_sync"] == 500
    with pytest.raises(ConfigError):
        load_preset("nope")


def test_parse_overrides_types():
    pairs = parse_overrides(["agent.lr=0.5", "model.variant=dcqn", "agent.flag=true"])
    assert pairs == [("agent.lr", 0.5), ("model.variant", "dcqn"), ("agent.flag", True)]
    with pytest.raises(ConfigError):
        parse_overrides(["justakey"])


def test_apply_overrides_nested():
    cfg = {"agent": {"lr": 1.0}}
    apply_overrides(cfg, [("agent.lr", 0.1), ("model.variant", "dcqn")])
    assert cfg == {"agent": {"lr": 0.1}, "model": {"variant": "dcqn"}}


# -- train ----------------------------------------------------------------------------


def test_train_writes_metrics_with_exact_header(tmp_path):
    assert run_train(tmp_path) == EXIT_OK
    lines = (tmp_path / "metrics.csv").read_text().split("\n")
    assert lines[0] == ",".join(HEADER)
    assert len([ln for ln in lines[1:] if ln]) == 6


def test_train_same_seed_is_byte_identical(tmp_path):
    run_train(tmp_path / "a", seed=7)
    run_train(tmp_path / "b", seed=7)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (
        tmp_path / "b" / "metrics.csv"
    ).read_bytes()


def test_train_different_seed_differs(tmp_path):
    run_train(tmp_path / "a", seed=7)
    run_train(tmp_path / "b", seed=8)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (
        tmp_path / "b" / "metrics.csv"
    ).read_bytes()


def test_train_run_json_echoes_resolved_config(tmp_path):
    run_train(tmp_path, seed=3)
    manifest = json.loads((tmp_path / "run.json").read_text())
    assert manifest["env"] == "catch"
    assert manifest["seed"] == 3
    assert manifest["agent"]["n_episodes"] == 6  # override took effect
    assert manifest["model"]["variant"] == "dcqn"
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["episodes"] == 6


def test_train_unknown_preset_exits_2_listing_presets(tmp_path, capsys):
    code = main(["train", "--preset", "bogus", "--out", str(tmp_path)])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "catch-dcqn-desk" in err


def test_train_requires_exactly_one_config_source(tmp_path):
    assert main(["train", "--out", str(tmp_path)]) == EXIT_CONFIG
    cfg = tmp_path / "c.json"
    cfg.write_text("{}")
    code = main(
        ["train", "--preset", "catch-dcqn-desk", "--config", str(cfg),
         "--out", str(tmp_path)]
    )
    assert code == EXIT_CONFIG


def test_train_from_config_file(tmp_path):
    cfg = dict(load_preset("catch-dcqn-desk"))
    cfg["agent"].update(n_episodes=2, eval_period=10, warmup=100000)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "run"
    assert main(["train", "--config", str(path), "--out", str(out)]) == EXIT_OK
    assert (out / "metrics.csv").exists()


def test_train_rejects_config_missing_sections(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"env": "catch", "model": {"variant": "dcqn"}}))
    assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_train_rejects_unknown_env(tmp_path):
    code = run_train(tmp_path, extra=["--set", "env=pong"])
    assert code == EXIT_CONFIG


def test_train_figures_flag_renders_pngs(tmp_path):
    assert run_train(tmp_path, extra=["--figures"]) == EXIT_OK
    for name in ("reward.png", "loss.png", "epsilon.png"):
        assert (tmp_path / name).stat().st_size > 0


# -- eval -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run_train(out) == EXIT_OK
    return out


def test_eval_uses_manifest_env(trained_run, tmp_path, capsys):
    ckpt = trained_run / "checkpoint_final.qck"
    code = main(["eval", str(ckpt), "--episodes", "2", "--out", str(tmp_path)])
    assert code == EXIT_OK
    printed = float(capsys.readouterr().out.strip().split("\n")[-1])
    assert -1.0 <= printed <= 1.0
    rows = (tmp_path / "eval.csv").read_text().strip().split("\n")
    assert rows[0] == "checkpoint,env,episodes,avg_reward"
    assert rows[1].endswith(repr(printed))


def test_eval_explicit_env_and_determinism(trained_run, capsys):
    ckpt = trained_run / "checkpoint_final.qck"
    assert main(["eval", str(ckpt), "--env", "catch", "--episodes", "2"]) == EXIT_OK
    a = capsys.readouterr().out
    assert main(["eval", str(ckpt), "--env", "catch", "--episodes", "2"]) == EXIT_OK
    assert capsys.readouterr().out == a


def test_eval_default_episode_count_is_five():
    args = build_parser().parse_args(["eval", "x.qck"])
    assert args.episodes == 5


def test_eval_corrupted_checkpoint_exits_3(tmp_path):
    bad = tmp_path / "bad.qck"
    bad.write_bytes(b"XXXX" + b"\x00" * 100)
    assert main(["eval", str(bad), "--env", "catch"]) == EXIT_CHECKPOINT


def test_eval_missing_checkpoint_exits_3(tmp_path):
    assert main(["eval", str(tmp_path / "none.qck"), "--env", "catch"]) == EXIT_CHECKPOINT


def test_eval_without_env_or_manifest_exits_2(trained_run, tmp_path):
    ckpt = trained_run / "checkpoint_final.qck"
    moved = tmp_path / "lonely.qck"
    moved.write_bytes(ckpt.read_bytes())
    assert main(["eval", str(moved)]) == EXIT_CONFIG


# -- bench ----------------------------------------------------------------------------


def test_bench_covers_all_variants(tmp_path, capsys):
    code = main(["bench", "--batch", "1", "--iters", "1", "--warmup", "0",
                 "--out", str(tmp_path)])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    for variant in ("dcqn", "dtqn_vit", "dtqn_proj", "conv_transformer"):
        assert variant in out
    rows = (tmp_path / "bench.csv").read_text().strip().split("\n")
    assert len(rows) == 1 + 4
    assert rows[0].startswith("variant,params,batch,forward_ms_mean")
    assert (tmp_path / "bench.png").stat().st_size > 0


# -- grad-check --------------------------------------------------------------------------


def test_grad_check_command_passes(capsys):
    assert main(["grad-check", "--seed", "0"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("ok") == 5  # gated layer + four variants
    assert "FAIL" not in out


# -- report ------------------------------------------------------------------------------


def test_report_renders_figures_from_run(trained_run, tmp_path, capsys):
    code = main(["report", "--run", str(trained_run), "--out", str(tmp_path)])
    assert code == EXIT_OK
    printed = capsys.readouterr().out.strip().split("\n")
    assert len(printed) == 3
    for name in ("reward.png", "loss.png", "epsilon.png"):
        assert (tmp_path / name).stat().st_size > 0


def test_report_missing_run_dir_fails(tmp_path):
    assert main(["report", "--run", str(tmp_path / "nope")]) != EXIT_OK


# -- metrics writer ------------------------------------------------------------------------


def row(ep):
    return MetricsRow(
        episode=ep, total_reward=1.0, mean_loss=None, epsilon=0.5, steps=20,
        env_time_s=0.0, step_time_ms=None, eval_avg_reward=None, loss_mode="huber",
    )


def test_metrics_writer_requires_increasing_episodes(tmp_path):
    with CsvMetricsWriter(tmp_path / "m.csv") as w:
        w.write(row(1))
        w.write(row(2))
        with pytest.raises(ValueError):
            w.write(row(2))


def test_metrics_row_formatting():
    rec = row(3).as_record()
    assert rec == ["3", "1.0", "", "0.5", "20", "0.0", "", "", "huber"]
