# =========================================
# file: tools/sv_experiment.py
# =========================================
"""
The experiment matrix: every configured system over every configured seed,
evaluated on each held-out condition, merged into report tables.

Layout under the output directory:

  corpus.bin, trials.<condition>.txt
  seed<k>/<system>.ckpt, seed<k>/<system>.metrics.csv,
  seed<k>/<system>.<condition>.scores.txt
  report.csv, summary.csv, expectations.csv, report.html
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from tools import sv_persistence as P
from tools.sv_config import REPORT_SYSTEMS, SYSTEMS, ConfigError, RunConfig
from tools.sv_corpus import generate_corpus
from tools.sv_eval import (
    DcfParams,
    SystemScores,
    TrialSet,
    build_condition_trials,
    evaluate_system,
    fuse_scores,
)
from tools.sv_trainer import STAGE1_OF, TrainResult, train_system
from tools.sv_visuals import figures_to_html, loss_curve_chart, system_metric_bars

logger = logging.getLogger(__name__)

THREADS_ENV = "METASV_THREADS"
FUSED = ("mltc", "acl")

REPORT_COLUMNS = ["system", "condition", "seed", "eer", "min_dcf", "n_target", "n_nontarget"]

# (name, system, compared against min of, required)
TREND_CHECKS: Tuple[Tuple[str, str, Tuple[str, ...], bool], ...] = (
    ("pn <= baseline", "pn", ("baseline",), True),
    ("mltc <= pn", "mltc", ("pn",), True),
    ("acl <= pn", "acl", ("pn",), True),
    ("mltc-acl <= min(mltc, acl)", "mltc-acl", ("mltc", "acl"), True),
    ("fusion <= min(mltc, acl)", "fusion", ("mltc", "acl"), True),
    ("mltc <= mlft", "mltc", ("mlft",), False),
    ("acl <= acl-q", "acl", ("acl-q",), False),
)


@dataclass(frozen=True)
class SeedCell:
    config: RunConfig
    seed: int
    corpus_path: Path
    trial_paths: Tuple[Tuple[str, Path], ...]
    out_dir: Path


@dataclass
class ExperimentResult:
    report: pd.DataFrame
    summary: pd.DataFrame
    expectations: pd.DataFrame
    out_dir: Path

    @property
    def required_passed(self) -> bool:
        req = self.expectations.loc[self.expectations["required"].astype(bool)]
        return bool(req["passed"].all())


# -------------------------
# Planning
# -------------------------
def worker_cap(requested: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return requested
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if cap < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return min(requested, cap)


def systems_to_train(systems: Sequence[str]) -> List[str]:
    """Requested systems plus the ones they depend on, in training order."""
    needed = {s for s in systems if s != "fusion"}
    if "fusion" in systems:
        needed.update(FUSED)
    needed.update(STAGE1_OF[s] for s in list(needed) if s in STAGE1_OF)
    return [s for s in SYSTEMS if s in needed]


# -------------------------
# One seed
# -------------------------
def run_seed_cell(cell: SeedCell) -> List[Dict[str, object]]:
    """Train, save and evaluate every needed system for one seed. Returns report rows."""
    cfg = cell.config.with_seed(cell.seed)
    corpus = P.load_corpus(cell.corpus_path)
    trials = {c: P.load_trials(p) for c, p in cell.trial_paths}
    dcf = DcfParams.from_config(cfg.eval)
    cell.out_dir.mkdir(parents=True, exist_ok=True)

    results: Dict[str, TrainResult] = {}
    scored: Dict[str, Dict[str, TrialSet]] = {}
    rows: List[Dict[str, object]] = []
    reported = set(cfg.experiment.systems)

    for system in systems_to_train(cfg.experiment.systems):
        logger.info(f"[seed {cell.seed}] training {system}")
        result = train_system(
            corpus, cfg.with_system(system).train, stage1=results.get(STAGE1_OF.get(system, ""))
        )
        results[system] = result
        P.save_checkpoint(cell.out_dir / f"{system}.ckpt", result.params, result.coeffs)
        P.write_csv_atomic(cell.out_dir / f"{system}.metrics.csv", result.report.to_frame())

        scores = evaluate_system(corpus, result.params, result.coeffs, trials, cfg.eval, system)
        scored[system] = scores.by_condition
        _save_scores(cell.out_dir, system, scores.by_condition)
        if system in reported:
            rows.extend(_rows(scores.metrics(dcf), cell.seed))

    if "fusion" in reported:
        fused = {c: fuse_scores(scored[FUSED[0]][c], scored[FUSED[1]][c]) for c in trials}
        _save_scores(cell.out_dir, "fusion", fused)
        rows.extend(_rows(SystemScores("fusion", fused).metrics(dcf), cell.seed))

    logger.info(f"[seed {cell.seed}] done: {len(rows)} report rows")
    return rows


def _save_scores(out_dir: Path, system: str, by_condition: Dict[str, TrialSet]) -> None:
    for condition, ts in by_condition.items():
        P.save_scores(out_dir / f"{system}.{condition}.scores.txt", ts)


def _rows(metrics, seed: int) -> List[Dict[str, object]]:
    return [
        {
            "system": m.system,
            "condition": m.condition,
            "seed": seed,
            "eer": m.eer,
            "min_dcf": m.min_dcf,
            "n_target": m.n_target,
            "n_nontarget": m.n_nontarget,
        }
        for m in metrics
    ]


# -------------------------
# Tables
# -------------------------
def report_table(rows: Sequence[Dict[str, object]], systems: Sequence[str], conditions: Sequence[str]) -> pd.DataFrame:
    df = pd.DataFrame(list(rows), columns=REPORT_COLUMNS)
    order = {s: i for i, s in enumerate(REPORT_SYSTEMS)}
    cond = {c: i for i, c in enumerate(conditions)}
    df = df[df["system"].isin(systems)]
    df = df.assign(_s=df["system"].map(order), _c=df["condition"].map(cond))
    return df.sort_values(["_s", "_c", "seed"], kind="stable").drop(columns=["_s", "_c"]).reset_index(drop=True)


def summary_table(report: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation over seeds, per system and condition."""
    summary = (
        report.groupby(["system", "condition"], sort=False)
        .agg(
            eer_mean=("eer", "mean"),
            eer_std=("eer", "std"),
            min_dcf_mean=("min_dcf", "mean"),
            min_dcf_std=("min_dcf", "std"),
            seeds=("seed", "count"),
        )
        .reset_index()
    )
    return summary


def expectations_table(summary: pd.DataFrame, slack: float) -> pd.DataFrame:
    """Directional mean-EER checks for every condition where all involved systems ran."""
    eer = {(r.system, r.condition): r.eer_mean for r in summary.itertuples()}
    rows = []
    for condition in summary["condition"].unique():
        for name, lhs, rhs, required in TREND_CHECKS:
            if (lhs, condition) not in eer or any((s, condition) not in eer for s in rhs):
                continue
            lhs_eer = eer[(lhs, condition)]
            rhs_eer = min(eer[(s, condition)] for s in rhs)
            rows.append(
                {
                    "check": name,
                    "condition": condition,
                    "lhs_eer": lhs_eer,
                    "rhs_eer": rhs_eer,
                    "slack": slack,
                    "passed": bool(lhs_eer <= rhs_eer + slack),
                    "required": required,
                }
            )
    return pd.DataFrame(rows, columns=["check", "condition", "lhs_eer", "rhs_eer", "slack", "passed", "required"])


def report_html(summary: pd.DataFrame, out_dir: Path, seeds: Sequence[int]) -> str:
    figures = [
        ("eer", system_metric_bars(summary, "eer", "Held-out EER by system")),
        ("min_dcf", system_metric_bars(summary, "min_dcf", "Held-out minDCF by system")),
    ]
    first = out_dir / f"seed{seeds[0]}"
    for system in summary["system"].unique():
        path = first / f"{system}.metrics.csv"
        if path.is_file():
            figures.append(
                (f"loss_{system}", loss_curve_chart(pd.read_csv(path), f"Training loss: {system} (seed {seeds[0]})"))
            )
    return figures_to_html(figures, "metasv experiment report")


# -------------------------
# Driver
# -------------------------
def prepare_inputs(config: RunConfig, out_dir: Path) -> Tuple[Path, Dict[str, Path]]:
    """Corpus file and per-condition trial files shared by every cell."""
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(config.corpus)
    corpus_path = P.save_corpus(out_dir / "corpus.bin", corpus)
    trial_paths = {}
    for condition, ts in build_condition_trials(corpus, config.eval, config.seed).items():
        trial_paths[condition] = P.save_trials(out_dir / f"trials.{condition}.txt", ts)
    return corpus_path, trial_paths


def run_experiment(config: RunConfig, out_dir: Optional[Path] = None) -> ExperimentResult:
    out_dir = Path(out_dir or config.output_dir)
    exp = config.experiment
    logger.info(f"Experiment: systems {list(exp.systems)}, seeds {list(exp.seeds)} -> {out_dir}")

    corpus_path, trial_paths = prepare_inputs(config, out_dir)
    cells = [
        SeedCell(config, seed, corpus_path, tuple(trial_paths.items()), out_dir / f"seed{seed}")
        for seed in exp.seeds
    ]

    workers = min(worker_cap(exp.workers), len(cells))
    rows: List[Dict[str, object]] = []
    if workers <= 1:
        for cell in cells:
            rows.extend(_run_cell_with_context(cell))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for cell_rows in pool.map(_run_cell_with_context, cells):
                rows.extend(cell_rows)

    report = report_table(rows, exp.systems, list(trial_paths))
    summary = summary_table(report)
    expectations = expectations_table(summary, exp.trend_slack)

    P.write_csv_atomic(out_dir / "report.csv", report)
    P.write_csv_atomic(out_dir / "summary.csv", summary)
    P.write_csv_atomic(out_dir / "expectations.csv", expectations)
    P.write_text_atomic(out_dir / "report.html", report_html(summary, out_dir, exp.seeds))

    for r in expectations.itertuples():
        level = logging.INFO if r.passed else logging.WARNING
        logger.log(level, f"{r.check} [{r.condition}]: {r.lhs_eer:.4f} vs {r.rhs_eer:.4f} {'ok' if r.passed else 'MISSED'}")
    return ExperimentResult(report, summary, expectations, out_dir)


def _run_cell_with_context(cell: SeedCell) -> List[Dict[str, object]]:
    try:
        return run_seed_cell(cell)
    except Exception as e:
        raise RuntimeError(f"experiment cell seed={cell.seed} failed: {e}") from e
