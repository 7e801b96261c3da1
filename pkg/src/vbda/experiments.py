"""Experiment specs, the flat ``key = value`` config format, and multi-seed runners.

A config file is a list of ``key = value`` lines; ``#`` starts a comment.
Keys are either top-level (``name``, ``method``, ``seeds``, ``out``) or carry
a section prefix: ``task.*`` for synthetic generators, ``digits.*`` for the
IDX digits pair, ``train.*`` for :class:`~vbda.training.TrainConfig`.
Unknown keys are errors. Run ``vbda --print-defaults`` for the full list.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Union

import numpy as np

from .autodiff import RngStream
from .data import DomainPair, SyntheticSpec, generate, load_idx
from .errors import ConfigError
from .models import save_params
from .training import CSV_COLUMNS, TrainConfig, train

log = logging.getLogger(__name__)

LAMBDAS = ("lambda_d", "lambda_ce", "lambda_s", "lambda_t")
METHOD_LAMBDAS = {
    "source_only": (),
    "dann": ("lambda_d",),
    "dann_ce": ("lambda_d", "lambda_ce"),
    "vib_only": ("lambda_s", "lambda_t"),
    "vbda": LAMBDAS,
}
METHODS = tuple(METHOD_LAMBDAS)
SYNTHETIC_KINDS = ("nuisance_correlation", "rotated_moons")


@dataclass(frozen=True)
class DigitsSpec:
    source_images: str = "data/digits/mnist-images.idx"
    source_labels: str = "data/digits/mnist-labels.idx"
    target_images: str = "data/digits/uci16-images.idx"
    target_labels: str = "data/digits/uci16-labels.idx"
    source_downsample: bool = True
    target_downsample: bool = False
    source_crop: int = 4  # MNIST's empty 4-pixel frame; USPS-style digits fill the image
    target_crop: int = 0
    n: int = 2000


Task = Union[SyntheticSpec, DigitsSpec]


@dataclass(frozen=True)
class ExperimentSpec:
    method: str
    task: Task
    train: TrainConfig = field(default_factory=TrainConfig)
    name: str = ""
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out: str = "runs/experiment"

    def validate(self) -> None:
        if self.method not in METHOD_LAMBDAS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        allowed = METHOD_LAMBDAS[self.method]
        for lam in LAMBDAS:
            if lam not in allowed and getattr(self.train, lam) != 0:
                raise ConfigError(f"method {self.method} requires train.{lam} = 0, "
                                  f"got {getattr(self.train, lam)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        try:
            self.train.validate()
            if isinstance(self.task, SyntheticSpec):
                self.task.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def task_kind(self) -> str:
        return "digits" if isinstance(self.task, DigitsSpec) else self.task.kind


def method_defaults(method: str) -> TrainConfig:
    """Training defaults with every lambda the method does not use set to zero."""
    zeroed = {lam: 0.0 for lam in LAMBDAS if lam not in METHOD_LAMBDAS[method]}
    return replace(TrainConfig(), **zeroed)


def default_spec(method: str = "vbda", kind: str = "nuisance_correlation") -> ExperimentSpec:
    task = DigitsSpec() if kind == "digits" else SyntheticSpec(kind=kind)
    return ExperimentSpec(method=method, task=task, train=method_defaults(method),
                          name=f"{kind}_{method}", out=f"runs/{kind}_{method}")


# ---------------------------------------------------------------------------
# config text format


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(raw: str, kind: type, key: str, lineno: int):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError(raw)
            return value
        if kind == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: {key}: cannot read {raw!r} as {getattr(kind, '__name__', kind)}")


def _field_kinds(cls) -> dict[str, object]:
    kinds = {}
    for f in fields(cls):
        t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
        t = t.removesuffix(" | None")
        if t.startswith("tuple"):
            kinds[f.name] = "ints"
        else:
            kinds[f.name] = {"int": int, "float": float, "bool": bool, "str": str}[t]
    return kinds


_TOP_KINDS = {"name": str, "method": str, "seeds": "ints", "out": str}
_TASK_KINDS = _field_kinds(SyntheticSpec)
_DIGITS_KINDS = _field_kinds(DigitsSpec)
_TRAIN_KINDS = _field_kinds(TrainConfig)
_SECTIONS = {"task": _TASK_KINDS, "digits": _DIGITS_KINDS, "train": _TRAIN_KINDS}


def parse_config_text(text: str, base_dir: Path | None = None) -> ExperimentSpec:
    values: dict[str, dict] = {"": {}, "task": {}, "digits": {}, "train": {}}
    seen_lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen_lines:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} (first set on line {seen_lines[key]})")
        seen_lines[key] = lineno
        section, _, name = key.rpartition(".")
        kinds = _TOP_KINDS if section == "" else _SECTIONS.get(section)
        if kinds is None or name not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[section][name] = _parse_value(raw, kinds[name], key, lineno)

    top = values[""]
    for required in ("method",):
        if required not in top:
            raise ConfigError(f"missing required key {required!r}")
    if "kind" not in values["task"]:
        raise ConfigError("missing required key 'task.kind'")
    method, kind = top["method"], values["task"].pop("kind")
    if method not in METHOD_LAMBDAS:
        raise ConfigError(f"line {seen_lines['method']}: unknown method {method!r}")

    if kind == "digits":
        if values["task"]:
            extra = sorted(f"task.{k}" for k in values["task"])
            raise ConfigError(f"task.kind = digits takes digits.* keys, not {', '.join(extra)}")
        digits = values["digits"]
        if base_dir is not None:
            for k in ("source_images", "source_labels", "target_images", "target_labels"):
                if k in digits and not Path(digits[k]).is_absolute():
                    digits[k] = str((base_dir / digits[k]).resolve())
        task: Task = DigitsSpec(**digits)
    elif kind in SYNTHETIC_KINDS:
        if values["digits"]:
            raise ConfigError(f"digits.* keys need task.kind = digits (got {kind})")
        task = SyntheticSpec(kind=kind, **values["task"])
    else:
        raise ConfigError(f"line {seen_lines['task.kind']}: unknown task kind {kind!r}")

    train_cfg = replace(method_defaults(method), **values["train"])
    spec = ExperimentSpec(
        method=method, task=task, train=train_cfg,
        name=top.get("name", f"{kind}_{method}"),
        seeds=top.get("seeds", (0, 1, 2, 3, 4)),
        out=top.get("out", f"runs/{kind}_{method}"),
    )
    spec.validate()
    return spec


def parse_config(path) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), base_dir=path.parent)


def format_config(spec: ExperimentSpec) -> str:
    """Fully resolved config text; ``parse_config_text`` reads it back unchanged."""
    lines = [f"name = {spec.name}", f"method = {spec.method}",
             f"seeds = {_format_value(spec.seeds)}", f"out = {spec.out}",
             f"task.kind = {spec.task_kind}"]
    section = "digits" if isinstance(spec.task, DigitsSpec) else "task"
    for f in fields(spec.task):
        if f.name != "kind":
            lines.append(f"{section}.{f.name} = {_format_value(getattr(spec.task, f.name))}")
    for f in fields(spec.train):
        if f.name != "seed":
            lines.append(f"train.{f.name} = {_format_value(getattr(spec.train, f.name))}")
    return "\n".join(lines) + "\n"


DEFAULTS_HELP = """\
# Defaults for every config key. Only `method` and `task.kind` are required.
#   method       one of: source_only dann dann_ce vib_only vbda
#                lambdas a method does not use default to 0 and must stay 0
#   task.kind    nuisance_correlation | rotated_moons | digits
#   train.seed   is not a key: each entry of `seeds` is one run
#   train.ms     wall-clock is written to the CSV only with record_wallclock = true
"""


def print_defaults() -> str:
    parts = [DEFAULTS_HELP, "# --- synthetic tasks ---", format_config(default_spec("vbda")),
             "# --- digits task (replaces the task.* block) ---"]
    digits = format_config(default_spec("vbda", "digits")).splitlines()
    parts.append("\n".join(line for line in digits if line.startswith(("task.kind", "digits."))) + "\n")
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# running


@dataclass
class ExperimentSummary:
    name: str
    method: str
    seeds: list[int]
    per_seed: list[dict]
    mean: float
    std: float
    csv_paths: list[str]

    def tgt_accs(self) -> list[float]:
        return [row["tgt_acc"] for row in self.per_seed]

    def to_json(self) -> dict:
        return {"name": self.name, "method": self.method, "seeds": self.seeds,
                "per_seed": self.per_seed, "mean": self.mean, "std": self.std}


def _data_seed(task_seed: int, run_seed: int) -> int:
    return RngStream(task_seed).spawn(f"data:{run_seed}").seed


def build_pair(task: Task, run_seed: int) -> DomainPair:
    """Synthetic data is drawn per run seed; the digits pair is fixed."""
    if isinstance(task, SyntheticSpec):
        return generate(replace(task, seed=_data_seed(task.seed, run_seed)))
    source = load_idx(task.source_images, task.source_labels, task.source_downsample,
                      limit=task.n, n_classes=10, crop=task.source_crop)
    target = load_idx(task.target_images, task.target_labels, task.target_downsample,
                      limit=task.n, n_classes=10, crop=task.target_crop)
    return DomainPair(source, target)


def _ensure_writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc


def write_metrics_csv(path: Path, records, record_wallclock: bool) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            row = rec.as_dict()
            if not record_wallclock:
                row["ms"] = 0.0
            writer.writerow([row["step"]] + [repr(float(row[c])) for c in CSV_COLUMNS[1:]])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def run_experiment(spec: ExperimentSpec, pair_cache: dict | None = None) -> ExperimentSummary:
    """Train once per seed; write per-seed CSVs and checkpoints, the resolved
    config and ``summary.json`` under ``spec.out``."""
    spec.validate()
    out = Path(spec.out)
    _ensure_writable(out)
    (out / "config.txt").write_text(format_config(spec))

    per_seed, csv_paths = [], []
    for seed in spec.seeds:
        key = (spec.task, seed if isinstance(spec.task, SyntheticSpec) else None)
        if pair_cache is not None and key in pair_cache:
            pair = pair_cache[key]
        else:
            pair = build_pair(spec.task, seed)
            if pair_cache is not None:
                pair_cache[key] = pair
        cfg = replace(spec.train, seed=seed)
        params, records = train(cfg, pair)
        csv_path = out / f"metrics_seed{seed}.csv"
        write_metrics_csv(csv_path, records, cfg.record_wallclock)
        save_params(params, out / f"params_seed{seed}.txt")
        final = records[-1] if records else None
        per_seed.append({
            "seed": seed,
            "tgt_acc": final.tgt_acc if final else float("nan"),
            "src_acc": final.src_acc if final else float("nan"),
        })
        csv_paths.append(str(csv_path))
        log.info("%s seed %d: src %.4f tgt %.4f", spec.name, seed, per_seed[-1]["src_acc"],
                 per_seed[-1]["tgt_acc"])

    accs = np.array([row["tgt_acc"] for row in per_seed])
    summary = ExperimentSummary(spec.name, spec.method, list(spec.seeds), per_seed,
                                float(accs.mean()), float(accs.std()), csv_paths)
    (out / "summary.json").write_text(json.dumps(summary.to_json(), indent=2) + "\n")
    return summary


PARAM_ALIASES = {
    "lambda_s": "lambda_s", "λ_s": "lambda_s", "lam_s": "lambda_s",
    "lambda_t": "lambda_t", "λ_t": "lambda_t", "lam_t": "lambda_t",
    "lambda_ce": "lambda_ce", "λ_ce": "lambda_ce", "lam_ce": "lambda_ce",
}


@dataclass
class SweepRow:
    value: float
    mean: float
    std: float
    per_seed: list[float]


def run_sweep(spec: ExperimentSpec, param: str, values) -> list[SweepRow]:
    """One :func:`run_experiment` per value of ``param``; writes ``sweep.csv``."""
    name = PARAM_ALIASES.get(param.removeprefix("train."))
    if name is None:
        raise ConfigError(f"cannot sweep {param!r}; choose from lambda_s, lambda_t, lambda_ce")
    if name not in METHOD_LAMBDAS[spec.method]:
        raise ConfigError(f"method {spec.method} does not use {name}")
    base = Path(spec.out)
    _ensure_writable(base)
    rows, cache = [], {}
    for value in values:
        value = float(value)
        sub = replace(spec, train=replace(spec.train, **{name: value}),
                      name=f"{spec.name}[{name}={value!r}]", out=str(base / f"{name}={value!r}"))
        summary = run_experiment(sub, pair_cache=cache)
        rows.append(SweepRow(value, summary.mean, summary.std, summary.tgt_accs()))
    with open(base / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([name, "mean_tgt_acc", "std_tgt_acc"] + [f"seed_{s}" for s in spec.seeds])
        for row in rows:
            writer.writerow([repr(row.value), repr(row.mean), repr(row.std)] + [repr(a) for a in row.per_seed])
    return rows


def run_baselines(task: Task, out, seeds=(0, 1, 2, 3, 4), train_overrides: dict | None = None,
                  methods=METHODS) -> dict[str, ExperimentSummary]:
    """The method ladder on one task; writes ``baselines.csv`` under ``out``."""
    out = Path(out)
    _ensure_writable(out)
    kind = "digits" if isinstance(task, DigitsSpec) else task.kind
    results, cache = {}, {}
    for method in methods:
        overrides = {k: v for k, v in (train_overrides or {}).items()
                     if k not in LAMBDAS or k in METHOD_LAMBDAS[method]}
        spec = ExperimentSpec(method=method, task=task,
                              train=replace(method_defaults(method), **overrides),
                              name=f"{kind}_{method}", seeds=tuple(seeds), out=str(out / method))
        results[method] = run_experiment(spec, pair_cache=cache)
    with open(out / "baselines.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "mean_tgt_acc", "std_tgt_acc"] + [f"seed_{s}" for s in seeds])
        for method, summary in results.items():
            writer.writerow([method, repr(summary.mean), repr(summary.std)]
                            + [repr(a) for a in summary.tgt_accs()])
    return results
