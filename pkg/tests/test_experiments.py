import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from vbda.cli import main
from vbda.data import SyntheticSpec
from vbda.errors import ConfigError
from vbda.experiments import (
    METHOD_LAMBDAS,
    ExperimentSpec,
    format_config,
    method_defaults,
    parse_config,
    parse_config_text,
    print_defaults,
    read_metrics_csv,
    run_baselines,
    run_experiment,
    run_sweep,
)
from vbda.training import CSV_COLUMNS, TrainConfig

TINY_TRAIN = dict(steps=20, eval_every=10, batch_source=16, batch_target=16, d_z=3,
                  enc_hidden=(8,), cls_hidden=(4,), disc_hidden=(4,))
TINY_TASK = SyntheticSpec(n=80)


def tiny_spec(method="vbda", out="runs/x", seeds=(0, 1)):
    train = replace(method_defaults(method), **TINY_TRAIN)
    return ExperimentSpec(method=method, task=TINY_TASK, train=train, name=f"tiny_{method}", seeds=seeds, out=out)


def tiny_config_text(method="vbda", out="out"):
    lines = [f"method = {method}", "task.kind = nuisance_correlation", "task.n = 80", f"out = {out}",
             "seeds = 0,1"]
    lines += [f"train.{k} = {','.join(map(str, v)) if isinstance(v, tuple) else v}" for k, v in TINY_TRAIN.items()]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# config parsing


def test_minimal_config_fills_defaults():
    spec = parse_config_text("method = vbda\ntask.kind = nuisance_correlation\n")
    assert spec.task == SyntheticSpec()
    assert spec.train == TrainConfig()
    assert spec.seeds == (0, 1, 2, 3, 4)


def test_minimal_baseline_config_zeroes_unused_lambdas():
    spec = parse_config_text("method = dann\ntask.kind = rotated_moons\n")
    assert spec.train.lambda_ce == spec.train.lambda_s == spec.train.lambda_t == 0
    assert spec.train.lambda_d == TrainConfig().lambda_d


def test_unknown_key_typo_is_named():
    with pytest.raises(ConfigError, match=r"line 3: unknown key 'train\.lamda_s'"):
        parse_config_text("method = vbda\ntask.kind = nuisance_correlation\ntrain.lamda_s = 0.1\n")


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("task.kind = nuisance_correlation\n", "method"),
        ("method = vbda\n", "task.kind"),
        ("method = vbda\ntask.kind = nuisance_correlation\ntrain.steps = many\n", "line 3: train.steps"),
        ("method = vbda\ntask.kind = nuisance_correlation\ntrain.lr = nan\n", "train.lr"),
        ("method = vbda\nmethod = dann\ntask.kind = nuisance_correlation\n", "duplicate"),
        ("method = vbda\ntask.kind = nuisance_correlation\njust words\n", "line 3"),
        ("method = magic\ntask.kind = nuisance_correlation\n", "unknown method"),
        ("method = vbda\ntask.kind = spirals\n", "unknown task kind"),
        ("method = vbda\ntask.kind = nuisance_correlation\ntask.rho = 2\n", "rho"),
        ("method = vbda\ntask.kind = digits\ntask.n = 5\n", "digits"),
    ],
)
def test_parse_errors(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config_text(text)


@pytest.mark.parametrize("method", sorted(METHOD_LAMBDAS))
def test_method_lambda_consistency_enforced(method):
    for lam in ("lambda_d", "lambda_ce", "lambda_s", "lambda_t"):
        text = f"method = {method}\ntask.kind = nuisance_correlation\ntrain.{lam} = 0.5\n"
        if lam in METHOD_LAMBDAS[method]:
            assert getattr(parse_config_text(text).train, lam) == 0.5
        else:
            with pytest.raises(ConfigError, match=f"requires train.{lam} = 0"):
                parse_config_text(text)


@pytest.mark.parametrize("kind", ["nuisance_correlation", "rotated_moons", "digits"])
def test_round_trip(kind):
    text = f"method = dann_ce\ntask.kind = {kind}\ntrain.lambda_ce = 0.25\nseeds = 3,4\n"
    spec = parse_config_text(text)
    assert parse_config_text(format_config(spec)) == spec


def test_digits_paths_resolve_relative_to_config(tmp_path):
    cfg = tmp_path / "sub" / "d.cfg"
    cfg.parent.mkdir()
    cfg.write_text("method = source_only\ntask.kind = digits\ndigits.source_images = ../imgs.idx\n")
    spec = parse_config(cfg)
    assert spec.task.source_images == str((tmp_path / "imgs.idx").resolve())


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "nope.cfg")


def test_print_defaults_lists_every_key():
    text = print_defaults()
    for f in TrainConfig.__dataclass_fields__:
        if f != "seed":
            assert f"train.{f} = " in text
    for f in SyntheticSpec.__dataclass_fields__:
        if f != "kind":
            assert f"task.{f} = " in text
    assert "digits.source_images" in text


# ---------------------------------------------------------------------------
# runners


def test_run_experiment_outputs(tmp_path):
    summary = run_experiment(tiny_spec(out=str(tmp_path / "r")))
    out = tmp_path / "r"
    assert len(summary.per_seed) == 2
    assert (out / "config.txt").read_text() == format_config(tiny_spec(out=str(out)))
    data = json.loads((out / "summary.json").read_text())
    assert set(data) == {"name", "method", "seeds", "per_seed", "mean", "std"}
    assert set(data["per_seed"][0]) == {"seed", "tgt_acc", "src_acc"}
    for seed in (0, 1):
        header = (out / f"metrics_seed{seed}.csv").read_text().splitlines()[0]
        assert header.split(",") == list(CSV_COLUMNS)
        assert (out / f"params_seed{seed}.txt").exists()


def test_summary_recomputable_from_csvs(tmp_path):
    summary = run_experiment(tiny_spec(out=str(tmp_path)))
    finals = [read_metrics_csv(p)[-1]["tgt_acc"] for p in summary.csv_paths]
    assert abs(np.mean(finals) - summary.mean) <= 1e-12
    assert abs(np.std(finals) - summary.std) <= 1e-12


def test_ms_column_zero_unless_requested(tmp_path):
    summary = run_experiment(tiny_spec(out=str(tmp_path / "a"), seeds=(0,)))
    assert all(row["ms"] == 0.0 for row in read_metrics_csv(summary.csv_paths[0]))
    spec = tiny_spec(out=str(tmp_path / "b"), seeds=(0,))
    spec = replace(spec, train=replace(spec.train, record_wallclock=True))
    rows = read_metrics_csv(run_experiment(spec).csv_paths[0])
    assert rows[-1]["ms"] > 0.0


def test_rerun_is_byte_identical(tmp_path):
    spec = tiny_spec(out=str(tmp_path))
    run_experiment(spec)
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    run_experiment(spec)
    second = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    assert first == second


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_output_fails_before_training(tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir()
    locked.chmod(0o500)
    try:
        with pytest.raises(OSError, match="not writable"):
            run_experiment(tiny_spec(out=str(locked / "run")))
    finally:
        locked.chmod(0o700)


def test_output_path_under_a_file_fails(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="not writable"):
        run_experiment(tiny_spec(out=str(blocker / "run")))
    assert blocker.read_text() == ""


def test_sweep_rows_and_single_value_equivalence(tmp_path):
    spec = tiny_spec(out=str(tmp_path / "s"))
    rows = run_sweep(spec, "lambda_s", [0.1, 0.01, 0.001])
    lines = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert len(rows) == 3 and len(lines) == 4
    single = run_experiment(replace(spec, train=replace(spec.train, lambda_s=0.01), out=str(tmp_path / "one")))
    assert rows[1].mean == single.mean and rows[1].per_seed == single.tgt_accs()


def test_sweep_rejects_unused_parameter(tmp_path):
    with pytest.raises(ConfigError):
        run_sweep(tiny_spec("dann_ce", out=str(tmp_path)), "lambda_s", [0.1])
    with pytest.raises(ConfigError):
        run_sweep(tiny_spec(out=str(tmp_path)), "lr", [0.1])


def test_baselines_table(tmp_path):
    results = run_baselines(TINY_TASK, tmp_path, seeds=(0,), train_overrides=TINY_TRAIN,
                            methods=("source_only", "vbda"))
    assert list(results) == ["source_only", "vbda"]
    lines = (tmp_path / "baselines.csv").read_text().splitlines()
    assert lines[0].startswith("method,mean_tgt_acc,std_tgt_acc")
    assert [ln.split(",")[0] for ln in lines[1:]] == ["source_only", "vbda"]


# ---------------------------------------------------------------------------
# CLI


def test_cli_print_defaults(capsys):
    assert main(["--print-defaults"]) == 0
    assert "train.lambda_s" in capsys.readouterr().out


def test_cli_run_and_seed_override(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(tiny_config_text(out="ignored"))
    out = tmp_path / "run"
    assert main(["run", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    assert json.loads((out / "summary.json").read_text())["seeds"] == [3]
    assert "target accuracy" in capsys.readouterr().out


def test_cli_config_error_exit_code(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("method = vbda\ntask.kind = nuisance_correlation\ntrain.lamda_s = 1\n")
    assert main(["run", str(cfg)]) == 2
    assert "lamda_s" in capsys.readouterr().err


def test_cli_sweep(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(tiny_config_text(out=str(tmp_path / "sw")))
    assert main(["sweep", str(cfg), "--param", "lambda_t", "--values", "0.01", "0.001"]) == 0
    assert len(Path(tmp_path / "sw" / "sweep.csv").read_text().splitlines()) == 3


def test_cli_no_command_prints_help(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().out
