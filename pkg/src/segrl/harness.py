"""Run-level commands: train, simulate, clean and eval.

Each command takes a validated :class:`RunConfig` and an output directory and
writes its artifacts there.  Byte-level reproducibility holds for a fixed
config and seed as long as ``timing`` stays off.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .config import RunConfig
from .engine import TrainingLoop, evaluate, prompts_from_records
from .errors import ConfigError, InputError, NumericError
from .metrics import MetricsWriter, load_snapshot, save_snapshot, write_manifest
from .pipeline import (
    MetaSolver,
    NoisyOracleSolver,
    PipelineConfig,
    parse_jsonl,
    read_jsonl,
    run_pipeline,
    write_jsonl,
)
from .tasks import evaluate_chain, generate_tasks, warm_start
from .throughput import SIM_COLUMNS, LengthDistribution, calibrate_two_point, speedup_table

BAND_WINDOW = 25


def running_mean(values, window: int = BAND_WINDOW) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average what exists."""
    x = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def entropy_band_check(entropies, sigma: float, rel: float = 0.5, window: int = BAND_WINDOW) -> dict:
    """Is the running-mean entropy over the final two-thirds within ``sigma * (1 +- rel)``?"""
    x = np.asarray(entropies, dtype=np.float64)
    if x.size < 3:
        return {"evaluated": False, "reason": "fewer than 3 steps"}
    rm = running_mean(x, window)[x.size // 3 :]
    lo, hi = (1 - rel) * sigma, (1 + rel) * sigma
    return {
        "evaluated": True,
        "sigma": sigma,
        "band": [lo, hi],
        "window": window,
        "min": float(rm.min()),
        "max": float(rm.max()),
        "passed": bool(rm.min() >= lo and rm.max() <= hi),
    }


def load_records(path) -> list:
    records, rejected = parse_jsonl(read_jsonl(path))
    if rejected:
        first = rejected[0]
        raise InputError(f"{path}: {len(rejected)} malformed record(s); line {first['line']}: {first['error']}")
    return records


def training_records(cfg: RunConfig) -> list:
    family = cfg.task.family_obj()
    if cfg.task.dataset:
        return load_records(cfg.resolve(cfg.task.dataset))
    return generate_tasks(family, cfg.task.train_count, np.random.default_rng(cfg.task.data_seed))


def eval_records(cfg: RunConfig) -> list:
    if cfg.eval.dataset:
        return load_records(cfg.resolve(cfg.eval.dataset))
    return generate_tasks(cfg.task.family_obj(), cfg.eval.count, np.random.default_rng(cfg.eval.seed), id_prefix="e")


def initial_policy(cfg: RunConfig, records):
    """Warm start fitted to teacher demonstrations on ``records``."""
    ws = cfg.warm_start
    return warm_start(
        cfg.task.family_obj(),
        records,
        np.random.default_rng(ws.seed),
        teacher=ws.teacher(),
        demos_per_record=ws.demos_per_record,
        steps=ws.steps,
        learning_rate=ws.learning_rate,
        max_len=cfg.rollout.global_max_len,
    )


def cmd_train(cfg: RunConfig, out_dir, params=None) -> dict:
    out = Path(out_dir)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    family = cfg.task.family_obj()
    vocab = family.vocab
    checker = cfg.checker()
    records = training_records(cfg)
    prompts = prompts_from_records(records, family)
    params0 = params if params is not None else initial_policy(cfg, records)
    ev_prompts = prompts_from_records(eval_records(cfg), family)

    def run_eval(p):
        if not ev_prompts:
            return None
        return evaluate(p, ev_prompts, vocab, cfg.eval.k, cfg.rollout.global_max_len, cfg.eval.temperature, np.random.default_rng(cfg.eval.seed), checker)["accuracy"]

    manifest = {
        "package_version": __version__,
        "command": "train",
        "seed": cfg.seed,
        "total_steps": cfg.total_steps,
        "ratio_mode": cfg.trainer.ratio_mode.value,
        "masking": cfg.trainer.masking,
        "checker_id": checker.checker_id,
        "config": cfg.to_ini(),
        "metrics": "metrics.csv",
        "snapshots": [],
        "eval_note": "toy eval samples with temperature only; no top-p or top-k",
        "eval_initial": run_eval(params0),
    }
    save_snapshot(out / "snapshots" / "step_00000.npz", params0, 0)
    manifest["snapshots"].append("snapshots/step_00000.npz")

    loop = TrainingLoop(params0, prompts, cfg.rollout, cfg.trainer, vocab, np.random.default_rng(cfg.seed), checker, cfg.timing)
    entropies, pois_dev = [], 0.0
    with MetricsWriter(out / "metrics.csv", cfg.trainer.ratio_mode.value, checker.checker_id) as writer:
        for step in range(cfg.total_steps):
            try:
                rec = loop.step()
            except NumericError as exc:
                manifest.update(status="failed", failed_step=step, error=str(exc))
                write_manifest(out / "manifest.json", manifest)
                raise
            writer.write(rec.row)
            entropies.append(rec.row["mean_entropy"])
            if rec.pois_max_abs_log_ratio is not None:
                pois_dev = max(pois_dev, rec.pois_max_abs_log_ratio)
            if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
                name = f"snapshots/step_{step + 1:05d}.npz"
                save_snapshot(out / name, loop.params, step + 1)
                manifest["snapshots"].append(name)
    save_snapshot(out / "params_final.npz", loop.params, cfg.total_steps)
    manifest.update(
        status="ok",
        final_params="params_final.npz",
        final_version=loop.params.version,
        eval_final=run_eval(loop.params),
        max_abs_log_ratio_before_update=pois_dev,
    )
    if cfg.trainer.masking == "dynamic":
        manifest["entropy_band"] = entropy_band_check(entropies, cfg.trainer.sigma)
    write_manifest(out / "manifest.json", manifest)
    return manifest


def workload(cfg: RunConfig) -> tuple:
    """Length distribution, sampled lengths and calibration details for ``simulate``."""
    s = cfg.simulate
    L = s.global_max_len
    calib = None
    if s.distribution == "calibrated":
        calib = calibrate_two_point(s.target_speedup, s.calibrate_k, L, cfg.cost_model(), s.n_samples, cfg.seed)
        dist = LengthDistribution.two_point(calib.short_frac, max(1, int(round(calib.short_ratio * L))), L)
    elif s.distribution == "two_point":
        dist = LengthDistribution.two_point(s.short_frac, s.short_len, L)
    elif s.distribution == "lognormal":
        dist = LengthDistribution.lognormal(s.mu, s.lognormal_sigma, L)
    else:
        path = cfg.resolve(s.lengths)
        try:
            lengths = [int(x) for x in Path(path).read_text().split()]
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read lengths file {path}: {exc}") from None
        dist = LengthDistribution.empirical(lengths, L)
    lengths = dist.sample(s.n_samples, np.random.default_rng(cfg.seed))
    return dist, lengths, calib


def cmd_simulate(cfg: RunConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.simulate
    dist, lengths, calib = workload(cfg)
    rows = speedup_table(lengths, s.segment_counts, cfg.cost_model(), s.global_max_len, s.group_size)
    with open(out / "simulate.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIM_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], int) else repr(float(r[c])) for c in SIM_COLUMNS])
    info = {
        "package_version": __version__,
        "command": "simulate",
        "seed": cfg.seed,
        "distribution": {"family": dist.family, "params": dist.params, "mean_length": dist.mean},
        "cost_model": {"c": s.c, "h": s.h, "lanes": s.lanes, "group_size": s.group_size},
        "global_max_len": s.global_max_len,
        "n_samples": s.n_samples,
        "calibration": calib.to_dict() if calib else None,
        "speedups": {str(r["segment_count"]): r["speedup"] for r in rows},
        "config": cfg.to_ini(),
    }
    write_manifest(out / "calibration.json", info)
    return info


def oracle_answer(record) -> str:
    """Independent answer for synthetic chains, the stored reference otherwise."""
    if record.meta.get("family") == "modchain":
        try:
            return str(evaluate_chain(record.question))
        except ValueError:
            pass
    return record.reference_answer


def pipeline_config(cfg: RunConfig) -> PipelineConfig:
    p = cfg.pipeline
    if p.solver == "meta":
        solver = MetaSolver("solver_answers")
        ensemble = tuple(MetaSolver("ensemble_answers", i) for i in range(p.ensemble_size))
    else:
        solver = NoisyOracleSolver(oracle_answer, p.solver_noise, cfg.seed)
        ensemble = tuple(NoisyOracleSolver(oracle_answer, p.solver_noise, cfg.seed + 1 + i) for i in range(p.ensemble_size))
    return PipelineConfig(
        stages=tuple(p.stages),
        min_question_marks=p.min_question_marks,
        easy_k=p.easy_k,
        max_reference_len=p.max_reference_len,
        solver=solver,
        ensemble=ensemble,
        checker=cfg.checker(),
    )


def cmd_clean(cfg: RunConfig, out_dir, input_path: Optional[str] = None) -> dict:
    src = Path(input_path) if input_path else cfg.resolve(cfg.pipeline.input)
    if src is None:
        raise ConfigError("[pipeline] input is required for clean")
    try:
        lines = read_jsonl(src)
    except OSError as exc:
        raise InputError(f"cannot read {src}: {exc}") from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, report = run_pipeline(lines, pipeline_config(cfg))
    write_jsonl(records, out / "cleaned.jsonl")
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.summary() + "\n", encoding="utf-8")
    return report.to_dict()


def cmd_eval(cfg: RunConfig, out_dir, params_path: Optional[str] = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    family = cfg.task.family_obj()
    path = Path(params_path) if params_path else cfg.resolve(cfg.eval.params)
    if path is not None:
        try:
            params = load_snapshot(path)
        except OSError as exc:
            raise InputError(f"cannot load parameters {path}: {exc}") from None
        source = str(path)
    else:
        params = initial_policy(cfg, training_records(cfg))
        source = "warm_start"
    if params.vocab_size != family.vocab.size or params.context_width != family.context_width:
        raise InputError("parameter shape does not match the task family")
    records = eval_records(cfg)
    prompts = prompts_from_records(records, family)
    res = evaluate(
        params, prompts, family.vocab, cfg.eval.k, cfg.rollout.global_max_len, cfg.eval.temperature,
        np.random.default_rng(cfg.eval.seed), cfg.checker(),
    )
    with open(out / "eval_per_question.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "avg_reward"])
        for pid, acc in res["per_prompt"].items():
            w.writerow([pid, repr(acc)])
    summary = {
        "package_version": __version__,
        "command": "eval",
        "params": source,
        "accuracy": res["accuracy"],
        "k": res["k"],
        "questions": len(records),
        "temperature": cfg.eval.temperature,
        "note": "toy eval samples with temperature only; no top-p or top-k",
    }
    (out / "eval.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary
