"""Experiment runs, epsilon sweeps and run comparison.

Every aggregate written here is a plain function of the per-seed or
per-cell values written next to it, so any file can be re-derived from its
own contents.
"""

from __future__ import annotations

import hashlib
import html
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .attribution import agreement_report, read_reports, render_page, write_reports
from .config import ExperimentConfig
from .data import SPLIT_NAMES, load_corpus
from .errors import ConfigError
from .model import accuracy
from .training import prepare_corpus, train

log = logging.getLogger(__name__)


def _mean(values):
    values = [v for v in values if v is not None]
    return statistics.fmean(values) if values else None


def _std(values):
    values = [v for v in values if v is not None]
    return statistics.pstdev(values) if values else None


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def corpus_digest(corpus_dir, fmt="jsonl") -> str:
    h = hashlib.sha256()
    for name in SPLIT_NAMES:
        f = Path(corpus_dir) / f"{name}.{fmt}"
        if f.is_file():
            h.update(name.encode() + b"\0" + f.read_bytes() + b"\0")
    return h.hexdigest()


def check_corpus(config: ExperimentConfig):
    root = Path(config.corpus_dir)
    if not root.is_dir():
        raise ConfigError("corpus_dir", f"{root} is not a directory")
    if not (root / f"train.{config.corpus_format}").is_file():
        raise ConfigError("corpus_dir", f"{root} has no train.{config.corpus_format}")
    try:
        return load_corpus(root, config.corpus_format)
    except ValueError as exc:
        raise ConfigError("corpus_dir", str(exc)) from None


def aggregate_seeds(per_seed: list[dict]) -> dict:
    accs = [r["test_acc"] for r in per_seed]
    taus = [r["mean_tau"] for r in per_seed]
    return {
        "acc_mean": _mean(accs),
        "acc_std": _std(accs),
        "tau_mean": _mean(taus),
        "tau_std": _std(taus),
    }


def run(config: ExperimentConfig) -> Path:
    """Train every seed, evaluate on test, write ``summary.json``."""
    corpus = check_corpus(config)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    data = prepare_corpus(config, corpus)
    eval_batch = data.test if data.test is not None else data.valid

    per_seed = []
    for seed in config.seeds:
        seed_dir = out / f"seed_{seed}"
        log.info("training %s eps=%g seed=%d", config.variant, config.epsilon, seed)
        result = train(config, data, seed=seed, out_dir=seed_dir)
        acc = accuracy(result.model, eval_batch)
        reports, summary = agreement_report(result.model, eval_batch, config.reduction, data.label_names)
        write_reports(seed_dir / "reports.jsonl", reports)
        (seed_dir / "heatmaps.html").write_text(
            render_page(reports[: config.report_limit], f"{config.variant} {seed_dir.name}", data.label_names),
            encoding="utf-8",
        )
        _write_json(seed_dir / "agreement.json", summary.to_json())
        per_seed.append(
            {
                "seed": seed,
                "test_acc": acc,
                "mean_tau": summary.mean_tau,
                "median_tau": summary.median_tau,
                "skipped": summary.skipped,
                "best_val_acc": result.state.best_val_acc,
                "best_epoch": result.state.best_epoch,
                "steps": result.state.step,
            }
        )
        log.info("seed %d: acc=%.4f tau=%s", seed, acc, summary.mean_tau)

    summary = {
        "variant": config.variant,
        "epsilon": config.epsilon,
        "score_kind": config.score_kind,
        "config_hash": config.identity_hash(),
        "corpus": {"dir": str(Path(config.corpus_dir)), "digest": corpus_digest(config.corpus_dir, config.corpus_format)},
        "eval_split": "test" if data.test is not None else "valid",
        "per_seed": per_seed,
        "aggregates": aggregate_seeds(per_seed),
    }
    _write_json(out / "summary.json", summary)
    return out


@dataclass
class SweepResult:
    grid: list[float]
    cells: list[dict]  # one per (epsilon, seed)
    per_epsilon: list[dict]
    robustness: float

    def to_json(self) -> dict:
        return {
            "grid": self.grid,
            "cells": self.cells,
            "per_epsilon": self.per_epsilon,
            "robustness": self.robustness,
        }


def validate_grid(grid) -> list[float]:
    grid = [float(e) for e in grid]
    if not grid:
        raise ConfigError("grid", "must contain at least one epsilon")
    if any(not e > 0 for e in grid):
        raise ConfigError("grid", "all epsilons must be > 0")
    if len(set(grid)) != len(grid):
        raise ConfigError("grid", "duplicate epsilon values")
    return grid


def aggregate_sweep(grid, cells) -> SweepResult:
    per_eps = []
    for eps in grid:
        mine = [c for c in cells if c["epsilon"] == eps]
        accs = [c["test_acc"] for c in mine]
        taus = [c["mean_tau"] for c in mine]
        per_eps.append(
            {
                "epsilon": eps,
                "acc_mean": _mean(accs),
                "acc_std": _std(accs),
                "tau_mean": _mean(taus),
                "tau_std": _std(taus),
            }
        )
    robustness = statistics.pstdev([p["acc_mean"] for p in per_eps])
    return SweepResult(list(grid), cells, per_eps, robustness)


def _eps_dir(out: Path, eps: float) -> Path:
    return out / f"eps_{eps:g}"


def sweep(config: ExperimentConfig, grid, jobs: int = 1) -> SweepResult:
    """Run the full epsilon x seed cross and write ``sweep.json``.

    Each epsilon is an independent ``run`` in ``eps_<value>/``; with
    ``jobs > 1`` they execute in worker processes.
    """
    grid = validate_grid(grid)
    check_corpus(config)
    out = Path(config.output_dir)
    configs = [config.replace(epsilon=e, output_dir=str(_eps_dir(out, e))) for e in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run, configs))
    else:
        for c in configs:
            run(c)

    cells = []
    for eps in grid:
        summary = json.loads((_eps_dir(out, eps) / "summary.json").read_text())
        for rec in summary["per_seed"]:
            cells.append({"epsilon": eps, "seed": rec["seed"], "test_acc": rec["test_acc"], "mean_tau": rec["mean_tau"]})
    result = aggregate_sweep(grid, cells)
    _write_json(
        out / "sweep.json",
        {"variant": config.variant, "config_hash": config.replace(epsilon=grid[0]).identity_hash(), **result.to_json()},
    )
    return result


def load_summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.is_file():
        raise ConfigError("runs", f"{run_dir} has no summary.json")
    return json.loads(path.read_text())


def _diff(a, b):
    return None if a is None or b is None else a - b


def compare(run_dirs, out_dir) -> dict:
    """Side-by-side table plus per-seed differences against the first run."""
    if len(run_dirs) < 2:
        raise ConfigError("runs", "compare needs at least two run directories")
    summaries = [load_summary(d) for d in run_dirs]
    digests = {s["corpus"]["digest"] for s in summaries}
    if len(digests) != 1:
        raise ConfigError("runs", "run directories were trained on different corpora")

    rows = [
        {"run": str(d), "variant": s["variant"], "epsilon": s["epsilon"], **s["aggregates"]}
        for d, s in zip(run_dirs, summaries)
    ]
    base = {r["seed"]: r for r in summaries[0]["per_seed"]}
    paired = []
    for d, s in zip(run_dirs[1:], summaries[1:]):
        diffs = [
            {
                "seed": r["seed"],
                "acc_diff": _diff(r["test_acc"], base[r["seed"]]["test_acc"]),
                "tau_diff": _diff(r["mean_tau"], base[r["seed"]]["mean_tau"]),
            }
            for r in s["per_seed"]
            if r["seed"] in base
        ]
        paired.append(
            {
                "run": str(d),
                "baseline": str(run_dirs[0]),
                "per_seed": diffs,
                "acc_diff_mean": _mean([x["acc_diff"] for x in diffs]),
                "tau_diff_mean": _mean([x["tau_diff"] for x in diffs]),
            }
        )
    result = {"corpus_digest": digests.pop(), "rows": rows, "paired": paired}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "compare.json", result)
    (out / "compare.html").write_text(render_compare(result), encoding="utf-8")
    return result


def _fmt(x):
    return "n/a" if x is None else f"{x:.4f}"


def render_compare(result: dict) -> str:
    head = "<tr><th>run</th><th>variant</th><th>epsilon</th><th>acc mean</th><th>acc std</th><th>tau mean</th><th>tau std</th></tr>"
    body = "".join(
        f"<tr><td>{html.escape(r['run'])}</td><td>{html.escape(r['variant'])}</td><td>{r['epsilon']:g}</td>"
        f"<td>{_fmt(r['acc_mean'])}</td><td>{_fmt(r['acc_std'])}</td>"
        f"<td>{_fmt(r['tau_mean'])}</td><td>{_fmt(r['tau_std'])}</td></tr>"
        for r in result["rows"]
    )
    pairs = "".join(
        f"<tr><td>{html.escape(p['run'])}</td><td>{_fmt(p['acc_diff_mean'])}</td><td>{_fmt(p['tau_diff_mean'])}</td></tr>"
        for p in result["paired"]
    )
    return (
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>run comparison</title>"
        "<style>body{font-family:sans-serif}td,th{padding:2px 8px;text-align:right}</style></head><body>\n"
        f"<table>{head}{body}</table>\n<h2>paired differences vs first run</h2>\n"
        f"<table><tr><th>run</th><th>acc diff</th><th>tau diff</th></tr>{pairs}</table>\n</body></html>\n"
    )


def rerender(run_dir) -> list[Path]:
    """Rebuild ``heatmaps.html`` in every seed directory from ``reports.jsonl``."""
    root = Path(run_dir)
    written = []
    limit, variant = 50, "run"
    cfg_file = root / "config.json"
    if cfg_file.is_file():
        cfg = json.loads(cfg_file.read_text())
        limit, variant = cfg.get("report_limit", limit), cfg.get("variant", variant)
    seed_dirs = sorted(p for p in root.glob("seed_*") if (p / "reports.jsonl").is_file())
    if not seed_dirs and (root / "reports.jsonl").is_file():
        seed_dirs = [root]
    if not seed_dirs:
        raise ConfigError("run_dir", f"{root} contains no reports.jsonl")
    for d in seed_dirs:
        labels = None
        if (d / "labels.json").is_file():
            labels = json.loads((d / "labels.json").read_text())
        reports = read_reports(d / "reports.jsonl")
        (d / "heatmaps.html").write_text(render_page(reports[:limit], f"{variant} {d.name}", labels), encoding="utf-8")
        written.append(d / "heatmaps.html")
    return written
