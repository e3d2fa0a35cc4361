# =========================================
# file: tools/sv_trainer.py
# =========================================
"""
Training procedures for the seven systems.

Stage 1 (baseline, pn, acl, acl-q) trains the whole network on episodic
batches. Stage 2 either learns transformation coefficients on a frozen
backbone (mltc, mltc-acl) or fine-tunes the backbone with the PN loss alone
(mlft). Every run is a pure function of (corpus, config).
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from tools import sv_grad as G
from tools import sv_losses as L
from tools.sv_config import TrainConfig, derive_rng
from tools.sv_corpus import Corpus, group_by_speaker
from tools.sv_episodes import Episode, augment_query, augment_support, sample_episode
from tools.sv_network import (
    NetworkDims,
    NetworkParams,
    TransformCoeffs,
    as_constants,
    as_leaves,
    extractor_graph,
    head_graph,
    init_params,
)

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["step", "lr", "loss_total", "loss_ce", "loss_pn", "loss_contra"]


class TrainingDiverged(RuntimeError):
    def __init__(self, system: str, step: int, value: float):
        super().__init__(f"{system}: loss became non-finite ({value}) at step {step}")
        self.system = system
        self.step = step


class FrozenBackboneViolation(RuntimeError):
    """A stage-2 run changed the backbone it was handed."""


# -------------------------
# Reports
# -------------------------
@dataclass
class TrainReport:
    system: str
    seed: int
    rows: List[Dict[str, float]] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: Optional[str] = None

    def record(self, step: int, lr: float, total: float, ce: float = 0.0, pn: float = 0.0, contra: float = 0.0) -> None:
        self.rows.append(
            {"step": int(step), "lr": lr, "loss_total": total, "loss_ce": ce, "loss_pn": pn, "loss_contra": contra}
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=METRICS_COLUMNS)

    def continued_as(self, system: str) -> "TrainReport":
        return TrainReport(system=system, seed=self.seed, rows=list(self.rows), wall_time=self.wall_time)


@dataclass
class TrainResult:
    params: NetworkParams
    report: TrainReport
    coeffs: Optional[TransformCoeffs] = None


# -------------------------
# Schedule / optimizer
# -------------------------
def lr_at(start: float, end: float, step: int, total: int) -> float:
    """Exponential interpolation: start at step 0, end at step total - 1."""
    if total <= 1:
        return float(start)
    if step == total - 1:
        return float(end)
    return float(start * (end / start) ** (step / (total - 1)))


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, tensors: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in tensors.items()},
            v={k: np.zeros_like(v) for k, v in tensors.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected adaptive-moment update. Inputs are not modified."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError(
            f"adam_step: parameter/gradient/state keys differ: {sorted(set(params) ^ set(grads))}"
        )
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise G.ShapeError(f"adam_step: gradient for {key} has shape {g.shape}, parameter {p.shape}")
        m = beta1 * state.m[key] + (1.0 - beta1) * g
        v = beta2 * state.v[key] + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params[key] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[key], new_v[key] = m, v
    return new_params, AdamState(new_m, new_v, t)


# -------------------------
# Helpers
# -------------------------
def network_dims(corpus: Corpus, config: TrainConfig) -> NetworkDims:
    return NetworkDims(
        input_dim=corpus.feature_dim,
        frame_dims=tuple(config.frame_dims),
        embed_dim=config.embed_dim,
        fc2_dim=config.fc2_dim,
        num_classes=corpus.num_train_speakers,
    )


def loss_config(config: TrainConfig) -> L.LossConfig:
    return L.LossConfig(lam=config.lam, metric=config.metric, normalize_embeddings=config.normalize_embeddings)


class _EpisodeSource:
    """Episodes of the training speakers from a dedicated stream."""

    def __init__(self, corpus: Corpus, config: TrainConfig, stream: int = 1):
        self.pool = group_by_speaker(corpus.train_utterances)
        self.class_of = {spk: i for i, spk in enumerate(self.pool)}
        self.config = config
        self.rng = derive_rng(config.seed, "episodes", stream)
        self.erase_rng = derive_rng(config.seed, "erase", stream)

    def next(self, augment: Optional[str] = None) -> Episode:
        ep_cfg = self.config.episode
        episode = sample_episode(self.pool, ep_cfg, self.rng)
        if augment == "support":
            episode = augment_support(episode, ep_cfg.erase_fraction, ep_cfg.erase_mode, self.erase_rng)
        elif augment == "query":
            episode = augment_query(episode, ep_cfg.erase_fraction, ep_cfg.erase_mode, self.erase_rng)
        return episode

    def labels(self, episode: Episode) -> List[int]:
        sup = [self.class_of[s] for s, g in zip(episode.speakers, episode.support) for _ in g]
        qry = [self.class_of[s] for s, g in zip(episode.speakers, episode.query) for _ in g]
        return sup + qry


def _rows(start: int, count: int) -> List[int]:
    return list(range(start, start + count))


def _episode_losses(
    theta: Mapping[str, G.Node],
    dims: NetworkDims,
    episode: Episode,
    labels: List[int],
    cfg: L.LossConfig,
    objective: str,
    coeffs: Optional[Mapping[str, G.Node]] = None,
) -> Tuple[G.Node, Dict[str, float]]:
    """
    Build one step's loss graph.

    objective: "ce" (baseline), "cp" (CE + lam PN), "cpc-support" /
    "cpc-query" (CE + lam (PN + contrastive)), or "pn" (PN only).
    """
    support = Episode.flatten(episode.support)
    query = Episode.flatten(episode.query)
    aug: List[np.ndarray] = []
    if objective == "cpc-support":
        aug = Episode.flatten(episode.support_aug)
    elif objective == "cpc-query":
        aug = Episode.flatten(episode.query_aug)

    n_s, n_q = len(support), len(query)
    emb = extractor_graph(support + query + aug, theta, dims, coeffs)

    ce = None
    if objective != "pn":
        ce = L.ce_loss(head_graph(G.take_rows(emb, _rows(0, n_s + n_q)), theta), labels)
        if objective == "ce":
            return ce, {"ce": ce.item(), "pn": 0.0, "contra": 0.0}

    z = L.normalize(emb) if cfg.normalize_embeddings else emb
    zs = G.take_rows(z, _rows(0, n_s))
    zq = G.take_rows(z, _rows(n_s, n_q))
    pn = L.pn_loss(zs, episode.support_sizes, zq, episode.query_sizes, cfg.metric)
    if objective == "pn":
        return pn, {"ce": 0.0, "pn": pn.item(), "contra": 0.0}
    if objective == "cp":
        return L.combined_cp(ce, pn, cfg.lam), {"ce": ce.item(), "pn": pn.item(), "contra": 0.0}

    za = G.take_rows(z, _rows(n_s + n_q, len(aug)))
    if objective == "cpc-support":
        contra = L.contrastive_loss(zs, za, episode.support_sizes, cfg.metric)
    else:
        contra = L.contrastive_loss(zq, za, episode.query_sizes, cfg.metric)
    total = L.combined_cpc(ce, pn, contra, cfg.lam)
    return total, {"ce": ce.item(), "pn": pn.item(), "contra": contra.item()}


def _optimize(
    tensors: Dict[str, np.ndarray],
    steps: int,
    lr_range: Tuple[float, float],
    loss_fn: Callable[[Mapping[str, G.Node]], Tuple[G.Node, Dict[str, float]]],
    config: TrainConfig,
    report: TrainReport,
    step_offset: int,
    decay: bool,
    stage: str,
) -> Dict[str, np.ndarray]:
    state = AdamState.zeros(tensors)
    for t in range(steps):
        lr = lr_at(lr_range[0], lr_range[1], t, steps)
        leaves = as_leaves(tensors)
        total, parts = loss_fn(leaves)
        value = total.item()
        if not np.isfinite(value) or not all(np.isfinite(v) for v in parts.values()):
            raise TrainingDiverged(report.system, step_offset + t, value)

        grads = dict(zip(leaves, G.backward(total, leaves.values())))
        if decay and config.weight_decay > 0:
            for key in grads:
                if key.endswith(".W"):
                    grads[key] = grads[key] + config.weight_decay * tensors[key]
        tensors, state = adam_step(
            tensors, grads, state, lr, config.adam_beta1, config.adam_beta2, config.adam_eps
        )
        report.record(step_offset + t, lr, value, parts["ce"], parts["pn"], parts["contra"])

        if t % config.log_every == 0 or t == steps - 1:
            logger.info(
                f"[{report.system} {stage}] step {step_offset + t} lr={lr:.3g} loss={value:.4f} "
                f"ce={parts['ce']:.4f} pn={parts['pn']:.4f} contra={parts['contra']:.4f}"
            )
    return tensors


# -------------------------
# Stage 1
# -------------------------
def _train_stage1(corpus: Corpus, config: TrainConfig, objective: str, system: str) -> TrainResult:
    started = time.perf_counter()
    dims = network_dims(corpus, config)
    params = init_params(dims, derive_rng(config.seed, "init"))
    source = _EpisodeSource(corpus, config)
    cfg = loss_config(config)
    augment = {"cpc-support": "support", "cpc-query": "query"}.get(objective)
    report = TrainReport(system=system, seed=config.seed)
    logger.info(f"Training {system}: {config.steps_stage1} steps, seed {config.seed}, objective {objective}")

    def loss_fn(theta):
        episode = source.next(augment)
        return _episode_losses(theta, dims, episode, source.labels(episode), cfg, objective)

    tensors = _optimize(
        dict(params.tensors), config.steps_stage1, config.lr_stage1, loss_fn, config, report,
        step_offset=0, decay=True, stage="stage1",
    )
    report.wall_time = time.perf_counter() - started
    logger.info(f"Finished {system} stage 1 in {report.wall_time:.1f}s")
    return TrainResult(params=NetworkParams(dims, tensors), report=report)


def train_baseline(corpus: Corpus, config: TrainConfig) -> TrainResult:
    """Cross-entropy only; episodes serve as plain minibatches."""
    return _train_stage1(corpus, config, "ce", "baseline")


def train_pn(corpus: Corpus, config: TrainConfig) -> TrainResult:
    """L_CE + lambda * L_PN."""
    return _train_stage1(corpus, config, "cp", "pn")


def train_acl(corpus: Corpus, config: TrainConfig) -> TrainResult:
    """L_CE + lambda * (L_PN + L_Contra) with erased support copies as positives."""
    return _train_stage1(corpus, config, "cpc-support", "acl")


def train_acl_q(corpus: Corpus, config: TrainConfig) -> TrainResult:
    """As train_acl but the erased copies are made from the query set."""
    return _train_stage1(corpus, config, "cpc-query", "acl-q")


# -------------------------
# Stage 2
# -------------------------
def train_mltc_stage2(
    corpus: Corpus,
    theta: NetworkParams,
    config: TrainConfig,
    report: Optional[TrainReport] = None,
    system: str = "mltc",
) -> TrainResult:
    """
    Learn transformation coefficients with the PN loss on a frozen backbone.

    Coefficients start at identity plus uniform +-1e-3 noise.
    """
    started = time.perf_counter()
    report = report or TrainReport(system=system, seed=config.seed)
    dims = theta.dims
    before = theta.checksum()
    frozen = as_constants(theta.tensors)
    coeffs = TransformCoeffs.near_identity(dims, derive_rng(config.seed, "coeffs"))
    source = _EpisodeSource(corpus, config, stream=2)
    cfg = loss_config(config)
    logger.info(f"Training {system} coefficients: {config.steps_stage2} steps, backbone {before[:12]}")

    def loss_fn(c):
        episode = source.next()
        return _episode_losses(frozen, dims, episode, source.labels(episode), cfg, "pn", coeffs=c)

    tensors = _optimize(
        dict(coeffs.tensors), config.steps_stage2, config.lr_stage2, loss_fn, config, report,
        step_offset=len(report.rows), decay=False, stage="stage2",
    )
    after = theta.checksum()
    if after != before:
        raise FrozenBackboneViolation(f"{system}: backbone checksum changed {before[:12]} -> {after[:12]}")
    logger.info(f"Backbone unchanged after {system} stage 2 ({after[:12]})")

    report.wall_time += time.perf_counter() - started
    return TrainResult(params=theta, report=report, coeffs=TransformCoeffs(dims, tensors))


def train_mlft(
    corpus: Corpus,
    theta: NetworkParams,
    config: TrainConfig,
    report: Optional[TrainReport] = None,
) -> TrainResult:
    """Fine-tune every backbone parameter with the PN loss alone."""
    started = time.perf_counter()
    report = report or TrainReport(system="mlft", seed=config.seed)
    source = _EpisodeSource(corpus, config, stream=2)
    cfg = loss_config(config)
    dims = theta.dims
    logger.info(f"Fine-tuning backbone with PN loss: {config.steps_stage2} steps")

    def loss_fn(t):
        episode = source.next()
        return _episode_losses(t, dims, episode, source.labels(episode), cfg, "pn")

    tensors = _optimize(
        {k: v.copy() for k, v in theta.tensors.items()}, config.steps_stage2, config.lr_stage2,
        loss_fn, config, report, step_offset=len(report.rows), decay=False, stage="stage2",
    )
    report.wall_time += time.perf_counter() - started
    return TrainResult(params=NetworkParams(dims, tensors), report=report)


def train_mltc(corpus: Corpus, config: TrainConfig, stage1: Optional[TrainResult] = None) -> TrainResult:
    stage1 = stage1 or train_pn(corpus, config)
    return train_mltc_stage2(corpus, stage1.params, config, stage1.report.continued_as("mltc"), "mltc")


def train_combined(corpus: Corpus, config: TrainConfig, stage1: Optional[TrainResult] = None) -> TrainResult:
    """ACL backbone, then coefficients with the PN loss."""
    stage1 = stage1 or train_acl(corpus, config)
    return train_mltc_stage2(
        corpus, stage1.params, config, stage1.report.continued_as("mltc-acl"), "mltc-acl"
    )


def train_mlft_system(corpus: Corpus, config: TrainConfig, stage1: Optional[TrainResult] = None) -> TrainResult:
    stage1 = stage1 or train_pn(corpus, config)
    return train_mlft(corpus, stage1.params, config, stage1.report.continued_as("mlft"))


# -------------------------
# Dispatch
# -------------------------
STAGE1_OF = {"mltc": "pn", "mlft": "pn", "mltc-acl": "acl"}

_STAGE1 = {
    "baseline": train_baseline,
    "pn": train_pn,
    "acl": train_acl,
    "acl-q": train_acl_q,
}
_TWO_STAGE = {
    "mltc": train_mltc,
    "mltc-acl": train_combined,
    "mlft": train_mlft_system,
}


def train_system(
    corpus: Corpus,
    config: TrainConfig,
    stage1: Optional[TrainResult] = None,
) -> TrainResult:
    """
    Train `config.system`. For two-stage systems a finished stage-1 result
    may be passed in; it is used as-is instead of being retrained.
    """
    system = config.system
    if system in _STAGE1:
        return _STAGE1[system](corpus, config)
    if system in _TWO_STAGE:
        return _TWO_STAGE[system](corpus, config, stage1)
    raise ValueError(f"unknown system {system!r}")


def train_stage2_only(corpus: Corpus, config: TrainConfig, theta: NetworkParams) -> TrainResult:
    """Second stage of a two-stage system on a backbone loaded from disk."""
    system = config.system
    if system not in _TWO_STAGE:
        raise ValueError(f"system {system!r} has no second stage")
    if theta.dims != network_dims(corpus, config):
        raise G.ShapeError(
            f"checkpoint dimension chain {theta.dims.chain} does not match the configured "
            f"network {network_dims(corpus, config).chain}"
        )
    report = TrainReport(system=system, seed=config.seed)
    if system == "mlft":
        return train_mlft(corpus, theta, config, report)
    return train_mltc_stage2(corpus, theta, config, report, system)


def with_system(config: TrainConfig, system: str) -> TrainConfig:
    return replace(config, system=system)
