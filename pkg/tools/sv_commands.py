# =========================================
# file: tools/sv_commands.py
# =========================================
"""
Sub-command handlers. Each takes the parsed argparse namespace and returns
an exit status; errors propagate to app.main, which maps them to statuses.
"""
from __future__ import annotations

import argparse
import json
import logging
from pathlib import Path
from typing import Dict, List

from tools import sv_persistence as P
from tools.sv_config import SYSTEMS, ConfigError, EvalConfig, RunConfig, load_run_config
from tools.sv_corpus import generate_corpus
from tools.sv_eval import (
    DcfParams,
    build_condition_trials,
    center_embeddings,
    compute_metrics,
    embed_utterances,
    fuse_scores,
    score_trials,
)
from tools.sv_experiment import run_experiment
from tools.sv_gradcheck import run_suite
from tools.sv_trainer import STAGE1_OF, train_stage2_only, train_system
from tools.sv_visuals import figures_to_html, loss_curve_chart

logger = logging.getLogger(__name__)


class UsageError(ValueError):
    """Flags that parse but do not make sense together."""


# -------------------------
# Helpers
# -------------------------
def _load_config(args: argparse.Namespace) -> RunConfig:
    overrides: List[str] = list(getattr(args, "set", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={int(args.seed)}")
    return load_run_config(args.config, overrides)


def _sibling(path: Path, suffix: str) -> Path:
    """checkpoint.ckpt -> checkpoint<suffix>"""
    return path.with_name(path.stem + suffix)


def condition_paths(path: Path, conditions: List[str]) -> Dict[str, Path]:
    """trials.txt -> trials.<condition>.txt, or the path itself for a single condition."""
    if len(conditions) == 1:
        return {conditions[0]: path}
    return {c: path.with_name(f"{path.stem}.{c}{path.suffix}") for c in conditions}


# -------------------------
# gen-corpus
# -------------------------
def cmd_gen_corpus(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    corpus = generate_corpus(cfg.corpus)
    out = P.save_corpus(args.out, corpus)
    logger.info(f"Wrote corpus {out} ({len(corpus.utterances)} utterances, sha256 {P.file_sha256(out)[:12]})")

    if args.trials_out:
        trials = build_condition_trials(corpus, cfg.eval, cfg.seed)
        for condition, path in condition_paths(Path(args.trials_out), list(trials)).items():
            P.save_trials(path, trials[condition])
            logger.info(f"Wrote {len(trials[condition])} {condition} trials to {path}")
    return 0


# -------------------------
# train
# -------------------------
def cmd_train(args: argparse.Namespace) -> int:
    if args.system not in SYSTEMS:
        raise UsageError(f"unknown system {args.system!r}; choose from {', '.join(SYSTEMS)}")
    if args.stage2_only and args.system not in STAGE1_OF:
        raise UsageError(f"--stage2-only applies to {sorted(STAGE1_OF)}, not {args.system}")
    if args.stage2_only and not args.init_checkpoint:
        raise UsageError(
            f"--stage2-only needs --init-checkpoint pointing at a {STAGE1_OF[args.system]} stage-1 checkpoint"
        )
    if args.init_checkpoint and not args.stage2_only:
        raise UsageError("--init-checkpoint is only used together with --stage2-only")

    cfg = _load_config(args).with_system(args.system)
    corpus = P.load_corpus(args.corpus)
    if args.stage2_only:
        theta, _ = P.load_checkpoint(args.init_checkpoint)
        result = train_stage2_only(corpus, cfg.train, theta)
    else:
        result = train_system(corpus, cfg.train)

    out = Path(args.out)
    P.save_checkpoint(out, result.params, result.coeffs)
    metrics_path = Path(args.metrics_out) if args.metrics_out else _sibling(out, ".metrics.csv")
    frame = result.report.to_frame()
    P.write_csv_atomic(metrics_path, frame)
    result.report.checkpoint = str(out)
    logger.info(f"Wrote checkpoint {out} and metrics log {metrics_path} ({len(frame)} steps)")

    if args.plot:
        html = figures_to_html([("loss", loss_curve_chart(frame, f"Training loss: {args.system}"))], args.system)
        plot_path = P.write_text_atomic(out.with_name("loss.html"), html)
        logger.info(f"Wrote loss curves to {plot_path}")
    return 0


# -------------------------
# eval
# -------------------------
def cmd_eval(args: argparse.Namespace) -> int:
    eval_cfg = _load_config(args).eval if args.config else EvalConfig()
    theta, coeffs = P.load_checkpoint(args.checkpoint)
    corpus = P.load_corpus(args.corpus)
    trials = P.load_trials(args.trials)
    if theta.dims.input_dim != corpus.feature_dim:
        raise ValueError(
            f"checkpoint expects {theta.dims.input_dim}-dim features, corpus has {corpus.feature_dim}"
        )

    needed = {i for t in trials.trials for i in t.key}
    by_id = corpus.by_id()
    missing = sorted(needed - set(by_id))
    if missing:
        raise ValueError(f"trial file references utterance {missing[0]}, not in corpus {args.corpus}")
    embeddings = embed_utterances([by_id[i] for i in sorted(needed)], theta, coeffs)
    center = (
        center_embeddings(corpus, theta, coeffs, eval_cfg.center_utterances)
        if eval_cfg.center_embeddings
        else None
    )
    scored = score_trials(trials, embeddings, center)

    system = args.system or Path(args.checkpoint).stem
    metrics = compute_metrics(scored, system, DcfParams.from_config(eval_cfg))
    out = Path(args.out)
    scores_path = Path(args.scores_out) if args.scores_out else _sibling(out, ".scores.txt")
    P.save_scores(scores_path, scored)
    P.save_metrics(out, metrics)
    logger.info(f"{system}: EER {metrics.eer:.4f}, minDCF {metrics.min_dcf:.4f} -> {out}, {scores_path}")
    print(json.dumps(metrics.to_json()))
    return 0


# -------------------------
# fuse
# -------------------------
def cmd_fuse(args: argparse.Namespace) -> int:
    a = P.load_scores(args.scores_a)
    b = P.load_scores(args.scores_b)
    fused = fuse_scores(a, b)
    out = P.save_scores(args.out, fused)
    logger.info(f"Wrote {len(fused)} fused scores to {out}")

    if args.trials:
        eval_cfg = _load_config(args).eval if args.config else EvalConfig()
        labeled = fused.with_labels_from(P.load_trials(args.trials))
        metrics = compute_metrics(labeled, args.system, DcfParams.from_config(eval_cfg))
        metrics_path = Path(args.metrics_out) if args.metrics_out else _sibling(Path(args.out), ".metrics.json")
        P.save_metrics(metrics_path, metrics)
        logger.info(f"{args.system}: EER {metrics.eer:.4f}, minDCF {metrics.min_dcf:.4f} -> {metrics_path}")
        print(json.dumps(metrics.to_json()))
    return 0


# -------------------------
# experiment
# -------------------------
def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out_dir).resolve() if args.out_dir else cfg.output_dir
    result = run_experiment(cfg, out_dir)
    print(result.summary.to_string(index=False))
    if not result.required_passed:
        logger.warning("Some directional expectations were missed; see expectations.csv")
    return 0


# -------------------------
# gradcheck
# -------------------------
def cmd_gradcheck(args: argparse.Namespace) -> int:
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    result = run_suite(range(args.seeds), tolerance=args.tolerance)
    for report in result.failures:
        logger.error(f"{report.name}: max relative error {report.worst:.3g} >= {report.tolerance:g}")
    print(f"{len(result.reports) - len(result.failures)}/{len(result.reports)} gradient checks passed")
    return 0 if result.passed else 1


USAGE_ERRORS = (UsageError, ConfigError)
