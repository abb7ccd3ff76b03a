"""``mode-ts``: train, evaluate, predict, and run the complexity/robustness/lookback probes.

Every option can come from a YAML/JSON config file (``--config``); flags given
on the command line override it.  Outputs go to ``--output-dir``, or to
``$MODE_TS_OUTPUT_ROOT/<command>-<run id>`` (default root ``./runs``).
Exit codes: 0 success, 2 invalid arguments or inputs, 3 failure while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import resource
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import bench
from .counters import OpCounter
from .data import (
    DataError,
    RawSeries,
    SynthSpec,
    WindowDataset,
    destandardize,
    load_csv,
    prepare_irregular_splits,
    prepare_splits,
    standardize,
    synth_generate,
    write_csv,
)
from .model import ModelConfig, build_variant
from .numerics import NonFiniteError, no_grad
from .params import delta_from_timestamps
from .report import Report, report_emit
from .training import (
    Checkpoint,
    TrainConfig,
    TrainingError,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
OUTPUT_ENV = "MODE_TS_OUTPUT_ROOT"
COMMANDS = ("train", "eval", "predict", "bench-complexity", "bench-selection", "robustness",
            "lookback")


class ValidationError(ValueError):
    """Bad run spec; reported with the offending field and exit code 2."""


@dataclass
class RunSpec:
    command: str
    data: str | None = None
    synth: dict | None = None
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    output_dir: str | None = None
    seed: int = 0
    split: object = field(default_factory=lambda: [0.7, 0.1, 0.2])
    stride: int = 1
    eval_stride: int = 1
    keep_prob: float = 1.0
    horizons: list = field(default_factory=list)
    checkpoint: str | None = None
    std_list: list = field(default_factory=lambda: [0.0, 0.1, 0.3, 0.5])
    lookbacks: list = field(default_factory=list)
    d_list: list = field(default_factory=lambda: [16, 32, 64])
    r_list: list = field(default_factory=lambda: [4, 8, 16])
    seq_len: int = 96
    ode_steps: int = 4
    method: str = "euler"
    repeats: int = 3
    precision: int = 64
    segment: int = 8
    k_list: list = field(default_factory=lambda: [1, 2, 4])
    state: int = 16
    rank: int = 8

    def to_dict(self) -> dict:
        return asdict(self)

    def run_id(self) -> str:
        body = {k: v for k, v in self.to_dict().items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]


SPEC_FIELDS = {f.name for f in fields(RunSpec)}
MODEL_FIELDS = [f for f in fields(ModelConfig) if f.name != "v"]
TRAIN_FIELDS = [f for f in fields(TrainConfig) if f.name not in ("seed", "betas")]
OPTIONAL_TYPES = {"rank": int, "k_per_segment": int, "clamp": float,
                  "early_stop_patience": int, "clip_norm": float}


# -- argument parsing ------------------------------------------------------------

def _optional(kind):
    def parse(text):
        return None if text.lower() in ("none", "null") else kind(text)
    parse.__name__ = kind.__name__
    return parse


def _number_list(kind):
    def parse(text):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__}s") from exc
    return parse


def _split_arg(text):
    if text.lower() == "ett":
        return "ett"
    return _number_list(float)(text)


def _field_type(f):
    if f.name in OPTIONAL_TYPES:
        return _optional(OPTIONAL_TYPES[f.name])
    return type(f.default)


def _add_config_flags(p: argparse.ArgumentParser, with_data: bool = True) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", default=S, help="YAML/JSON file supplying any run-spec field")
    p.add_argument("--output-dir", dest="output_dir", default=S)
    p.add_argument("--seed", type=int, default=S)
    if not with_data:
        return
    p.add_argument("--data", default=S, help="CSV file: timestamp column then numeric columns")
    p.add_argument("--synth", default=S,
                   help="synthetic series: a YAML/JSON spec file, or 'default'")
    p.add_argument("--split", type=_split_arg, default=S, help="'ett' or three ratios, e.g. 0.7,0.1,0.2")
    p.add_argument("--stride", type=int, default=S)
    p.add_argument("--eval-stride", dest="eval_stride", type=int, default=S)
    p.add_argument("--keep-prob", dest="keep_prob", type=float, default=S,
                   help="keep each input row with this probability (irregular sampling)")
    p.add_argument("--horizons", type=_number_list(int), default=S)
    g = p.add_argument_group("model")
    for f in MODEL_FIELDS:
        g.add_argument("--" + f.name.replace("_", "-"), dest="model." + f.name, type=_field_type(f),
                       default=S)
    g = p.add_argument_group("training")
    for f in TRAIN_FIELDS:
        if f.name == "lambda_reg":
            continue    # shared with the model flag of the same name
        g.add_argument("--" + f.name.replace("_", "-"), dest="train." + f.name, type=_field_type(f),
                       default=S)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(prog="mode-ts", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    for name in ("train", "eval", "predict", "robustness", "lookback"):
        sp = sub.add_parser(name)
        _add_config_flags(sp)
        if name != "train" and name != "lookback":
            sp.add_argument("--checkpoint", default=S)
        if name == "robustness":
            sp.add_argument("--std-list", dest="std_list", type=_number_list(float), default=S)
        if name == "lookback":
            sp.add_argument("--lookbacks", type=_number_list(int), default=S)

    sp = sub.add_parser("bench-complexity")
    _add_config_flags(sp, with_data=False)
    sp.add_argument("--d-list", dest="d_list", type=_number_list(int), default=S)
    sp.add_argument("--r-list", dest="r_list", type=_number_list(int), default=S)
    sp.add_argument("--seq-len", dest="seq_len", type=int, default=S)
    sp.add_argument("--ode-steps", dest="ode_steps", type=int, default=S)
    sp.add_argument("--method", choices=("euler", "heun", "discrete"), default=S)
    sp.add_argument("--repeats", type=int, default=S, help="timing repeats; 0 reports counts only")
    sp.add_argument("--precision", type=int, choices=(32, 64), default=S)

    sp = sub.add_parser("bench-selection")
    _add_config_flags(sp, with_data=False)
    sp.add_argument("--segment", type=int, default=S, help="segment length S")
    sp.add_argument("--k-list", dest="k_list", type=_number_list(int), default=S)
    sp.add_argument("--seq-len", dest="seq_len", type=int, default=S)
    sp.add_argument("--state", type=int, default=S, help="state size d")
    sp.add_argument("--rank", type=int, default=S)
    sp.add_argument("--ode-steps", dest="ode_steps", type=int, default=S)
    sp.add_argument("--method", choices=("euler", "heun", "discrete"), default=S)
    return p


def _read_structured(path: str, what: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ValidationError(f"{what}: cannot read {path}: {exc.strerror or exc}") from exc
    try:
        out = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValidationError(f"{what}: {path} is not valid YAML/JSON: {exc}") from exc
    if out is None:
        return {}
    if not isinstance(out, dict):
        raise ValidationError(f"{what}: {path} must hold a mapping")
    return out


def spec_from_args(ns: argparse.Namespace) -> RunSpec:
    """Defaults, then the config file, then explicit flags."""
    given = dict(vars(ns))
    command = given.pop("command")
    merged: dict = {"model": {}, "train": {}}
    if "config" in given:
        cfg = _read_structured(given.pop("config"), "config")
        unknown = set(cfg) - SPEC_FIELDS
        if unknown:
            raise ValidationError(f"config: unknown fields {sorted(unknown)}")
        if cfg.get("command", command) != command:
            raise ValidationError(f"config: command {cfg['command']!r} does not match {command!r}")
        for key, val in cfg.items():
            if key in ("model", "train"):
                if not isinstance(val, dict):
                    raise ValidationError(f"config: {key} must be a mapping")
                merged[key].update(val)
            else:
                merged[key] = val
    for key, val in given.items():
        if key.startswith("model."):
            merged["model"][key[6:]] = val
            if key == "model.lambda_reg":
                merged["train"]["lambda_reg"] = val
        elif key.startswith("train."):
            merged["train"][key[6:]] = val
        else:
            merged[key] = val
    if isinstance(merged.get("synth"), str):
        merged["synth"] = {} if merged["synth"] == "default" else _read_structured(merged["synth"], "synth")
    merged["command"] = command
    spec = RunSpec(**merged)
    _check_types(spec)
    return spec


def _check_types(spec: RunSpec) -> None:
    ints = ("seed", "stride", "eval_stride", "seq_len", "ode_steps", "repeats", "precision",
            "segment", "state", "rank")
    for name in ints:
        val = getattr(spec, name)
        _check(isinstance(val, int) and not isinstance(val, bool), name, f"expected an integer, got {val!r}")
    for name in ("horizons", "std_list", "lookbacks", "d_list", "r_list", "k_list"):
        val = getattr(spec, name)
        _check(isinstance(val, list) and all(isinstance(x, (int, float)) for x in val), name,
               f"expected a list of numbers, got {val!r}")
    _check(isinstance(spec.keep_prob, (int, float)), "keep_prob", "expected a number")
    _check(spec.split == "ett" or (isinstance(spec.split, list) and len(spec.split) == 3), "split",
           "expected 'ett' or three ratios")
    _check(spec.synth is None or isinstance(spec.synth, dict), "synth", "expected a mapping")
    for name in ("data", "checkpoint", "output_dir"):
        val = getattr(spec, name)
        _check(val is None or isinstance(val, str), name, "expected a path string")


# -- validation ---------------------------------------------------------------

@dataclass
class Prepared:
    spec: RunSpec
    series: RawSeries | None = None
    datasets: dict | None = None
    model_cfg: ModelConfig | None = None
    train_cfg: TrainConfig | None = None
    checkpoint: Checkpoint | None = None


def _check(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ValidationError(f"{name}: {msg}")


def _load_series(spec: RunSpec) -> RawSeries:
    if spec.data is not None and spec.synth is not None:
        raise ValidationError("data: give either a CSV path or a synthetic spec, not both")
    if spec.data is None and spec.synth is None:
        raise ValidationError("data: a dataset path (--data) or synthetic spec (--synth) is required")
    if spec.data is not None:
        if not Path(spec.data).is_file():
            raise ValidationError(f"data: no such file {spec.data}")
        try:
            return load_csv(spec.data)
        except DataError as exc:
            raise ValidationError(f"data: {exc}") from exc
    try:
        return synth_generate(SynthSpec.from_dict(spec.synth))
    except (DataError, TypeError, ValueError) as exc:
        raise ValidationError(f"synth: {exc}") from exc


def _model_config(spec: RunSpec, v: int) -> ModelConfig:
    try:
        return ModelConfig.from_dict({**spec.model, "v": v})
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"model: {exc}") from exc


def _train_config(spec: RunSpec) -> TrainConfig:
    try:
        return TrainConfig.from_dict({**spec.train, "seed": spec.seed})
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"train: {exc}") from exc


def _datasets(spec: RunSpec, series: RawSeries, L: int, H: int) -> dict[str, WindowDataset]:
    _check(spec.stride >= 1 and spec.eval_stride >= 1, "stride", "must be >= 1")
    _check(0 < spec.keep_prob <= 1, "keep_prob", "must lie in (0, 1]")
    try:
        if spec.keep_prob < 1:
            return prepare_irregular_splits(series, L, H, spec.keep_prob, spec.split, spec.stride,
                                            spec.eval_stride, seed=spec.seed)
        return prepare_splits(series, L, H, spec.split, spec.stride, spec.eval_stride)
    except DataError as exc:
        raise ValidationError(f"split: {exc}") from exc


def validate(spec: RunSpec) -> Prepared:
    """Check everything that can be checked before any output is written."""
    _check(spec.command in COMMANDS, "command", f"must be one of {COMMANDS}")
    _check(isinstance(spec.seed, int) and spec.seed >= 0, "seed", "must be a non-negative integer")
    prep = Prepared(spec)
    if spec.command == "bench-complexity":
        _check(bool(spec.d_list) and bool(spec.r_list), "d_list/r_list", "must be non-empty")
        _check(min(spec.d_list) >= 1 and min(spec.r_list) >= 1, "d_list/r_list", "must be positive")
        _check(spec.seq_len >= 1 and spec.ode_steps >= 1, "seq_len/ode_steps", "must be >= 1")
        _check(spec.repeats >= 0, "repeats", "must be >= 0")
        _check(spec.method in ("euler", "heun", "discrete"), "method", "unknown integrator")
        _check(spec.precision in (32, 64), "precision", "must be 32 or 64")
        return prep
    if spec.command == "bench-selection":
        _check(spec.segment >= 1, "segment", "must be >= 1")
        _check(all(0 <= k <= spec.segment for k in spec.k_list), "k_list", "every k must satisfy k <= S")
        _check(spec.seq_len >= 1 and spec.ode_steps >= 1, "seq_len/ode_steps", "must be >= 1")
        _check(1 <= spec.rank <= spec.state, "rank", "must lie in [1, state]")
        _check(spec.method in ("euler", "heun", "discrete"), "method", "unknown integrator")
        return prep

    series = _load_series(spec)
    prep.series = series
    if spec.command in ("eval", "predict") or (spec.command == "robustness" and spec.checkpoint):
        _check(spec.checkpoint is not None, "checkpoint", "required for this command")
        _check(Path(spec.checkpoint).is_file(), "checkpoint", f"no such file {spec.checkpoint}")
        try:
            prep.checkpoint = load_checkpoint(spec.checkpoint)
            prep.model_cfg = ModelConfig.from_dict(prep.checkpoint.model_config)
        except (ValueError, KeyError) as exc:
            raise ValidationError(f"checkpoint: {exc}") from exc
        _check(prep.model_cfg.v == series.n_variates, "data",
               f"{series.n_variates} variates, checkpoint expects {prep.model_cfg.v}")
    else:
        prep.model_cfg = _model_config(spec, series.n_variates)
        prep.train_cfg = _train_config(spec)
    cfg = prep.model_cfg
    if spec.command == "predict":
        _check(len(series) >= cfg.lookback, "data", f"need at least {cfg.lookback} rows to predict")
        return prep
    if spec.command == "lookback":
        _check(bool(spec.lookbacks), "lookbacks", "must be non-empty")
        _check(min(spec.lookbacks) >= cfg.conv_width, "lookbacks", f"must be >= conv_width={cfg.conv_width}")
        return prep
    prep.datasets = _datasets(spec, series, cfg.lookback, cfg.horizon)
    _check("test" in prep.datasets, "split", "test segment too short for one window")
    for h in spec.horizons:
        _check(1 <= h <= cfg.horizon, "horizons", f"{h} outside 1..{cfg.horizon}")
    if spec.command == "robustness":
        _check(bool(spec.std_list) and min(spec.std_list) >= 0, "std_list", "must be non-empty and >= 0")
    return prep


# -- commands -----------------------------------------------------------------------

def peak_rss_bytes() -> int:
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


def window_op_counts(model, dataset: WindowDataset) -> OpCounter:
    """Exact counters for one forward pass over the first window."""
    counter = OpCounter()
    d = None if dataset.deltas is None else dataset.deltas[:1]
    with no_grad():
        model.forward(dataset.inputs[:1], d, counter=counter)
    return counter


def metrics_report(kind: str, model, test: WindowDataset, horizons, extra: dict) -> Report:
    hs = sorted(set(horizons) | {test.horizon})
    m = evaluate(model, test, horizons=hs)
    ops = window_op_counts(model, test)
    rows = [{"horizon": int(h), **m.per_horizon[str(h)]} for h in hs]
    summary = {"test_mse": m.mse, "test_mae": m.mae, "test_raw_mse": m.raw_mse,
               "test_raw_mae": m.raw_mae, "test_windows": len(test),
               "state_transition_ops": ops.state_transition,
               "selection_ops": ops.selection, **extra,
               "peak_rss_bytes": peak_rss_bytes()}
    return Report(kind, rows=rows, summary=summary)


def _train_model(prep: Prepared, out: Path):
    spec = prep.spec
    model = build_variant(prep.model_cfg, spec.seed)
    ds = prep.datasets
    res = train(model, ds["train"], prep.train_cfg, ds.get("val"))
    save_checkpoint(res.checkpoint, out / "checkpoint.mck")
    (out / "train_log.jsonl").write_text(res.log_lines(), encoding="utf-8")
    secs = [r["seconds"] for r in res.log]
    extra = {"epochs_run": len(res.log), "stopped_early": res.stopped_early,
             "best_val": res.checkpoint.best_val,
             "train_state_transition_ops": int(sum(r["op_count"] for r in res.log)),
             "seconds_per_epoch": float(np.mean(secs)) if secs else 0.0}
    return res.model, extra


def cmd_train(prep: Prepared, out: Path) -> Report:
    model, extra = _train_model(prep, out)
    return metrics_report("train", model, prep.datasets["test"], prep.spec.horizons, extra)


def cmd_eval(prep: Prepared, out: Path) -> Report:
    model = prep.checkpoint.build_model()
    return metrics_report("eval", model, prep.datasets["test"], prep.spec.horizons, {})


def cmd_predict(prep: Prepared, out: Path) -> Report:
    """Forecast the horizon after the final lookback rows of the series (original scale)."""
    model = prep.checkpoint.build_model()
    cfg, s = model.cfg, prep.series
    tail = s.slice(len(s) - cfg.lookback, len(s))
    w = standardize(WindowDataset(tail.values[None], np.zeros((1, cfg.horizon, cfg.v))))
    deltas = None
    if tail.timestamps is not None:
        deltas = delta_from_timestamps(tail.timestamps, s.median_interval(), cfg.delta_min,
                                       cfg.delta_max)[None]
        deltas[:, 0] = 1.0
    pred = destandardize(model.predict(w.inputs, deltas), w.stats)[0]
    last = tail.timestamps[-1] if tail.timestamps is not None else float(len(s) - 1)
    step = s.median_interval()
    times = last + step * np.arange(1, cfg.horizon + 1)
    write_csv(RawSeries(pred, times, list(s.variate_names)), out / "predictions.csv")
    rows = [{"step": i + 1, "timestamp": float(t),
             **{n: float(v) for n, v in zip(s.variate_names, pred[i])}} for i, t in enumerate(times)]
    return Report("predict", rows=rows, summary={"horizon": cfg.horizon, "file": "predictions.csv"})


def cmd_robustness(prep: Prepared, out: Path) -> Report:
    if prep.checkpoint is not None:
        model, extra = prep.checkpoint.build_model(), {"checkpoint": prep.spec.checkpoint}
    else:
        model, extra = _train_model(prep, out)
        extra = {"checkpoint": "checkpoint.mck", "epochs_run": extra["epochs_run"]}
    rep = bench.robustness_sweep(model, prep.datasets["test"], prep.spec.std_list, seed=prep.spec.seed)
    rep.summary.update(extra)
    return rep


def cmd_lookback(prep: Prepared, out: Path) -> Report:
    s = prep.spec
    return bench.lookback_sweep(prep.series, prep.model_cfg, prep.train_cfg, s.lookbacks, s.split,
                                s.stride, s.seed)


def cmd_bench_complexity(prep: Prepared, out: Path) -> Report:
    s = prep.spec
    dtype = np.float32 if s.precision == 32 else np.float64
    return bench.bench_complexity(s.d_list, s.r_list, s.seq_len, s.ode_steps, s.repeats, s.method,
                                  s.seed, dtype)


def cmd_bench_selection(prep: Prepared, out: Path) -> Report:
    s = prep.spec
    return bench.bench_selection(s.segment, s.k_list, s.seq_len, s.state, s.rank, s.ode_steps,
                                 s.method, s.seed)


HANDLERS = {
    "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "robustness": cmd_robustness,
    "lookback": cmd_lookback, "bench-complexity": cmd_bench_complexity,
    "bench-selection": cmd_bench_selection,
}


def output_dir(spec: RunSpec) -> Path:
    if spec.output_dir:
        return Path(spec.output_dir)
    root = Path(os.environ.get(OUTPUT_ENV) or "runs")
    return root / f"{spec.command}-{spec.run_id()}"


def run(spec: RunSpec, stream=None) -> tuple[Report, Path]:
    """Validate, create the output directory, run the command, write the report."""
    prep = validate(spec)
    out = output_dir(spec)
    out.mkdir(parents=True, exist_ok=True)
    (out / "runspec.json").write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")
    t0 = time.perf_counter()
    rep = HANDLERS[spec.command](prep, out)
    rep.run_id = spec.run_id()
    rep.config = spec.to_dict()
    rep.summary["wall_seconds"] = time.perf_counter() - t0
    report_emit(rep, out / "report.jsonl", stream=stream)
    return rep, out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        spec = spec_from_args(ns)
        rep, out = run(spec)
    except ValidationError as exc:
        print(f"mode-ts {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, NonFiniteError, DataError, ValueError, OSError, KeyError) as exc:
        print(f"mode-ts {ns.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"# outputs in {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
