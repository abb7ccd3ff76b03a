"""Counter-based complexity probes and evaluation sweeps that produce reports."""

from __future__ import annotations

import statistics
import time
from dataclasses import replace

import numpy as np

from .counters import OpCounter
from .data import DataError, RawSeries, inject_gaussian_noise, prepare_splits
from .model import ModelConfig, build_variant
from .numerics import get_default_dtype, no_grad, set_default_dtype
from .report import Report
from .ssm import STAGES, LowRankFactors, SegmentPlan, selective_scan_segmented
from .training import TrainConfig, evaluate, train


def scan_problem(d: int, r: int, L: int, v: int = 1, seed: int = 0, dtype=np.float64):
    """Random static factors (scaled so ||U V^T|| stays modest) and one input sequence."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d)
    U = (rng.normal(size=(d, r)) * scale).astype(dtype)
    V = (rng.normal(size=(d, r)) * scale).astype(dtype)
    B = (rng.normal(size=(d, v)) * scale).astype(dtype)
    C = (rng.normal(size=(v, d)) * scale).astype(dtype)
    f = LowRankFactors(U, V, B, C, None, 0.1)
    xs = rng.normal(size=(1, L, v)).astype(dtype)
    return f, xs


def _timed(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def count_scan(f: LowRankFactors, xs, plan: SegmentPlan, T: int, method: str,
               dense: bool = False) -> OpCounter:
    counter = OpCounter()
    with no_grad():
        selective_scan_segmented(f, xs, plan, a_decay=np.full(f.d, -0.5), ode_steps=T,
                                 method=method, counter=counter, dense_contrast=dense)
    return counter


def bench_complexity(d_list, r_list, L: int = 96, T: int = 4, repeats: int = 3,
                     method: str = "euler", seed: int = 0, dtype=np.float64) -> Report:
    """State-transition multiply-adds for one full scan per (d, r), plus the
    d x d contrast path, and ratio rows between neighbouring settings.

    Pairs with r > d are skipped with a note.  ``repeats=0`` drops timing.
    ``dtype=float32`` runs the whole probe in single precision (timing only;
    the counts do not depend on it).
    """
    previous = get_default_dtype()
    set_default_dtype(dtype)
    try:
        return _bench_complexity(d_list, r_list, L, T, repeats, method, seed, dtype)
    finally:
        set_default_dtype(previous)


def _bench_complexity(d_list, r_list, L, T, repeats, method, seed, dtype) -> Report:
    d_list, r_list = sorted(set(d_list)), sorted(set(r_list))
    if not d_list or not r_list:
        raise ValueError("d_list and r_list must be non-empty")
    if L < 1 or T < 1 or repeats < 0:
        raise ValueError("need L >= 1, T >= 1, repeats >= 0")
    stages = STAGES[method]
    rows, notes, counts = [], [], {}
    for d in d_list:
        for r in r_list:
            if r > d:
                notes.append(f"skipped d={d}, r={r}: rank exceeds state size")
                continue
            f, xs = scan_problem(d, r, L, seed=seed, dtype=dtype)
            plan = SegmentPlan.full((1, L))
            low = count_scan(f, xs, plan, T, method)
            den = count_scan(f, xs, plan, T, method, dense=True)
            model = 2 * L * T * d * r * stages
            row = {"table": "counts", "d": d, "r": r, "L": L, "T": T,
                   "state_transition": low.state_transition,
                   "dense_transition": den.dense_transition,
                   "model_2LTdr": model,
                   "matches_model": low.state_transition == model}
            if repeats > 0:
                row["median_seconds"] = _timed(lambda: count_scan(f, xs, plan, T, method), repeats)
                row["median_seconds_dense"] = _timed(
                    lambda: count_scan(f, xs, plan, T, method, dense=True), repeats)
            counts[(d, r)] = (low.state_transition, den.dense_transition)
            rows.append(row)
    for d in d_list:
        rs = [r for r in r_list if (d, r) in counts]
        for r0, r1 in zip(rs, rs[1:]):
            rows.append({"table": "ratio_r", "d": d, "from": r0, "to": r1,
                         "state_transition_ratio": counts[(d, r1)][0] / counts[(d, r0)][0]})
    for r in r_list:
        ds = [d for d in d_list if (d, r) in counts]
        for d0, d1 in zip(ds, ds[1:]):
            rows.append({"table": "ratio_d", "r": r, "from": d0, "to": d1,
                         "state_transition_ratio": counts[(d1, r)][0] / counts[(d0, r)][0],
                         "dense_transition_ratio": counts[(d1, r)][1] / counts[(d0, r)][1]})
    summary = {"all_match_model": all(r["matches_model"] for r in rows if r["table"] == "counts"),
               "method": method, "timed": repeats > 0}
    return Report("bench-complexity", rows=rows, summary=summary, notes=notes)


def bench_selection(S: int, k_list, L: int, d: int = 16, r: int = 8, T: int = 4,
                    method: str = "euler", seed: int = 0) -> Report:
    """Full-update and selection counts for each k, always including k = S."""
    ks = sorted(set(k_list) | {S})
    if S < 1 or any(not 0 <= k <= S for k in ks):
        raise ValueError(f"every k must lie in [0, S={S}]")
    f, xs = scan_problem(d, r, L, seed=seed)
    scores = np.random.default_rng(seed + 1).random((1, L))
    per_step = 2 * d * r * T * STAGES[method]
    rows = []
    base = None
    for k in sorted(ks, reverse=True):
        plan = SegmentPlan.build(scores, S, k)
        c = count_scan(f, xs, plan, T, method)
        expected = sum(min(k, min(S, L - s)) for s in range(0, L, S))
        row = {"k": k, "S": S, "L": L,
               "full_updates": c.full_updates,
               "expected_full_updates": expected,
               "state_transition": c.state_transition,
               "expected_state_transition": expected * per_step,
               "selection_ops": c.selection,
               "decay_ops": c.decay}
        if base is None:
            base = c.state_transition
        row["ratio_vs_k_eq_S"] = c.state_transition / base
        row["ok"] = c.full_updates == expected and c.state_transition == expected * per_step
        rows.append(row)
    rows.sort(key=lambda r: r["k"])
    summary = {"per_step_state_transition": per_step, "all_ok": all(r["ok"] for r in rows)}
    return Report("bench-selection", rows=rows, summary=summary)


def robustness_sweep(model, dataset, std_list, seed: int = 0) -> Report:
    """Evaluate one model under each input-noise level against the clean score."""
    stds = sorted(set(float(s) for s in std_list))
    if not stds or stds[0] < 0:
        raise ValueError("std_list must be non-empty and non-negative")
    base = evaluate(model, dataset)
    rows, notes = [], []
    for s in stds:
        m = base if s == 0 else evaluate(model, inject_gaussian_noise(dataset, s, seed=seed))
        row = {"std": s, "mse": m.mse, "mae": m.mae}
        for key, now, ref in (("mse_growth", m.mse, base.mse), ("mae_growth", m.mae, base.mae)):
            if ref > 0:
                row[key] = (now - ref) / ref
            else:
                row[key] = 0.0 if now == ref else None
                if now != ref:
                    notes.append(f"{key} undefined at std={s}: clean error is zero")
        rows.append(row)
    growth = [r["mse_growth"] for r in rows if r["mse_growth"] is not None]
    monotone = all(b >= a for a, b in zip(growth, growth[1:]))
    summary = {"clean_mse": base.mse, "clean_mae": base.mae,
               "monotone": "pass" if monotone else "warn"}
    return Report("robustness", rows=rows, summary=summary, notes=notes)


def lookback_sweep(series: RawSeries, model_cfg: ModelConfig, train_cfg: TrainConfig, L_list,
                   ratios=(0.7, 0.1, 0.2), stride: int = 1, seed: int = 0) -> Report:
    """Train and test one model per lookback with the same seed and budget."""
    rows, notes = [], []
    for L in sorted(set(L_list)):
        try:
            cfg = replace(model_cfg, lookback=L)
            ds = prepare_splits(series, L, model_cfg.horizon, ratios, stride=stride)
        except (DataError, ValueError) as exc:
            notes.append(f"skipped L={L}: {exc}")
            continue
        if "test" not in ds:
            notes.append(f"skipped L={L}: test segment too short for one window")
            continue
        t0 = time.perf_counter()
        res = train(build_variant(cfg, seed), ds["train"], train_cfg, ds.get("val"))
        m = evaluate(res.model, ds["test"])
        rows.append({"lookback": L, "mse": m.mse, "mae": m.mae, "raw_mse": m.raw_mse,
                     "raw_mae": m.raw_mae, "epochs": len(res.log),
                     "seconds": time.perf_counter() - t0})
    return Report("lookback", rows=rows, notes=notes)
