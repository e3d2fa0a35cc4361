# =========================================
# file: tools/sv_eval.py
# =========================================
"""
Verification trials, cosine scoring, EER / minDCF and equal-weight fusion.

Operating points: a trial is accepted when score >= threshold. Thresholds
run over every distinct score plus +inf, so the sweep starts at
"accept everything" (P_miss = 0, P_fa = 1) and ends at "reject everything"
(P_miss = 1, P_fa = 0).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from tools.sv_config import EvalConfig, derive_rng
from tools.sv_corpus import Corpus, Utterance, group_by_speaker
from tools.sv_network import NetworkParams, TransformCoeffs, embed_batch

logger = logging.getLogger(__name__)

TARGET = "target"
NONTARGET = "nontarget"


# -------------------------
# Types
# -------------------------
@dataclass(frozen=True)
class Trial:
    enroll: int
    test: int
    target: Optional[bool] = None  # None when read back from a score file

    def __post_init__(self):
        if self.enroll == self.test:
            raise ValueError(f"trial enrolls and tests the same utterance {self.enroll}")

    @property
    def key(self) -> Tuple[int, int]:
        return self.enroll, self.test

    @property
    def label(self) -> str:
        if self.target is None:
            raise ValueError(f"trial {self.enroll} {self.test} has no label")
        return TARGET if self.target else NONTARGET


@dataclass(frozen=True)
class TrialSet:
    trials: Tuple[Trial, ...]
    scores: Optional[np.ndarray] = None
    condition: str = ""

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        if self.scores is not None:
            scores = np.asarray(self.scores, dtype=np.float64)
            if scores.shape != (len(self.trials),):
                raise ValueError(f"{len(self.trials)} trials but {scores.shape[0]} scores")
            object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def keys(self) -> List[Tuple[int, int]]:
        return [t.key for t in self.trials]

    @property
    def labeled(self) -> bool:
        return all(t.target is not None for t in self.trials)

    def labels(self) -> np.ndarray:
        if not self.labeled:
            raise ValueError("trial set carries no target/nontarget labels")
        return np.array([t.target for t in self.trials], dtype=bool)

    @property
    def n_target(self) -> int:
        return int(self.labels().sum())

    @property
    def n_nontarget(self) -> int:
        return len(self.trials) - self.n_target

    def with_scores(self, scores: np.ndarray) -> "TrialSet":
        return replace(self, scores=np.asarray(scores, dtype=np.float64))

    def with_labels_from(self, reference: "TrialSet") -> "TrialSet":
        """Copy labels from a labeled trial list with the same pairs in the same order."""
        _check_aligned(self, reference, "attach labels")
        return replace(self, trials=reference.trials)


@dataclass(frozen=True)
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1:
            raise ValueError(f"p_target must be in (0, 1), got {self.p_target}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError(f"detection costs must be > 0, got c_miss={self.c_miss}, c_fa={self.c_fa}")

    @classmethod
    def from_config(cls, config: EvalConfig) -> "DcfParams":
        return cls(p_target=config.p_target, c_miss=config.c_miss, c_fa=config.c_fa)


@dataclass(frozen=True)
class Metrics:
    system: str
    eer: float
    min_dcf: float
    n_target: int
    n_nontarget: int
    condition: str = ""

    def to_json(self) -> Dict[str, object]:
        return {
            "system": self.system,
            "eer": self.eer,
            "min_dcf": self.min_dcf,
            "n_target": self.n_target,
            "n_nontarget": self.n_nontarget,
        }


# -------------------------
# Trials
# -------------------------
def build_trials(
    utterances: Sequence[Utterance],
    targets_per_speaker: int,
    nontargets_per_speaker: int,
    seed: int | np.random.Generator,
    condition: str = "",
) -> TrialSet:
    """
    Per speaker (ascending id): `targets_per_speaker` same-speaker pairs and
    `nontargets_per_speaker` pairs enrolling one of its utterances against
    another speaker's. No unordered pair appears twice.
    """
    rng = seed if isinstance(seed, np.random.Generator) else derive_rng(seed, "trials")
    groups = group_by_speaker(utterances)
    if len(groups) < 2:
        raise ValueError(f"trial construction needs >= 2 speakers, got {len(groups)}")
    short = [s for s, utts in groups.items() if len(utts) < 2]
    if short:
        raise ValueError(f"trial construction needs >= 2 utterances per speaker; speaker {short[0]} has fewer")
    if targets_per_speaker < 0 or nontargets_per_speaker < 0:
        raise ValueError("trial counts must be >= 0")

    used: set = set()
    trials: List[Trial] = []

    def take(candidates: List[Tuple[int, int]], count: int, target: bool, speaker: int) -> None:
        taken = 0
        for i in rng.permutation(len(candidates)):
            a, b = candidates[i]
            pair = (min(a, b), max(a, b))
            if pair in used:
                continue
            used.add(pair)
            trials.append(Trial(a, b, target))
            taken += 1
            if taken == count:
                return
        if taken < count:
            kind = TARGET if target else NONTARGET
            raise ValueError(
                f"speaker {speaker}: requested {count} {kind} trials, only {taken} distinct pairs available"
            )

    for spk, utts in groups.items():
        ids = [u.utterance_id for u in utts]
        others = [u.utterance_id for s, g in groups.items() if s != spk for u in g]
        same = [(ids[i], ids[j]) for i in range(len(ids)) for j in range(i + 1, len(ids))]
        cross = [(a, b) for a in ids for b in others]
        if targets_per_speaker:
            take(same, targets_per_speaker, True, spk)
        if nontargets_per_speaker:
            take(cross, nontargets_per_speaker, False, spk)

    return TrialSet(tuple(trials), condition=condition)


def split_conditions(speaker_ids: Sequence[int], conditions: Sequence[str]) -> Dict[str, List[int]]:
    """Round-robin assignment of speakers (ascending id) to evaluation conditions."""
    out: Dict[str, List[int]] = {c: [] for c in conditions}
    for i, spk in enumerate(sorted(speaker_ids)):
        out[conditions[i % len(conditions)]].append(spk)
    return out


def build_condition_trials(corpus: Corpus, config: EvalConfig, seed: int) -> Dict[str, TrialSet]:
    """One trial list per evaluation condition over the held-out speakers."""
    held_out = corpus.held_out_utterances
    groups = group_by_speaker(held_out)
    split = split_conditions(list(groups), config.conditions)
    out = {}
    for index, (condition, speakers) in enumerate(split.items()):
        utts = [u for s in speakers for u in groups[s]]
        out[condition] = build_trials(
            utts,
            config.targets_per_speaker,
            config.nontargets_per_speaker,
            derive_rng(seed, "trials", index),
            condition=condition,
        )
        logger.info(f"Condition {condition}: {len(speakers)} speakers, {len(out[condition])} trials")
    return out


# -------------------------
# Embeddings / scoring
# -------------------------
def centering_utterances(corpus: Corpus, limit: int) -> List[Utterance]:
    """Up to `limit` training utterances, evenly strided through the corpus."""
    train = corpus.train_utterances
    if len(train) <= limit:
        return train
    picks = np.unique(np.linspace(0, len(train) - 1, limit).round().astype(int))
    return [train[i] for i in picks]


def center_embeddings(
    corpus: Corpus,
    theta: NetworkParams,
    coeffs: Optional[TransformCoeffs],
    limit: int,
) -> np.ndarray:
    """Mean training-set embedding, subtracted before length normalization."""
    utts = centering_utterances(corpus, limit)
    if not utts:
        raise ValueError("corpus has no training utterances to center embeddings with")
    return embed_batch([u.features for u in utts], theta, coeffs).mean(axis=0)


def embed_utterances(
    utterances: Sequence[Utterance],
    theta: NetworkParams,
    coeffs: Optional[TransformCoeffs] = None,
) -> Dict[int, np.ndarray]:
    vectors = embed_batch([u.features for u in utterances], theta, coeffs)
    return {u.utterance_id: vectors[i] for i, u in enumerate(utterances)}


def score_trials(
    ts: TrialSet,
    embeddings: Mapping[int, np.ndarray],
    center: Optional[np.ndarray] = None,
) -> TrialSet:
    """Cosine similarity of (optionally centered) length-normalized embeddings."""
    needed = sorted({i for t in ts.trials for i in t.key})
    missing = [i for i in needed if i not in embeddings]
    if missing:
        raise ValueError(f"no embedding for utterance {missing[0]}")

    index = {uid: row for row, uid in enumerate(needed)}
    table = np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in needed])
    if center is not None:
        table = table - np.asarray(center, dtype=np.float64)
    norms = np.linalg.norm(table, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm embedding for utterance {needed[int(np.flatnonzero(norms[:, 0] == 0)[0])]}")
    table = table / norms

    enroll = table[[index[t.enroll] for t in ts.trials]]
    test = table[[index[t.test] for t in ts.trials]]
    scores = np.clip(np.einsum("ij,ij->i", enroll, test), -1.0, 1.0)
    return ts.with_scores(scores)


# -------------------------
# Metrics
# -------------------------
def _scored(ts: TrialSet) -> Tuple[np.ndarray, np.ndarray]:
    if ts.scores is None:
        raise ValueError("trial set has not been scored")
    labels = ts.labels()
    if labels.all() or not labels.any():
        raise ValueError("metrics need at least one target and one nontarget trial")
    return ts.scores, labels


def operating_points(ts: TrialSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, P_miss, P_fa), thresholds ascending and ending with +inf."""
    scores, labels = _scored(ts)
    tgt = np.sort(scores[labels])
    non = np.sort(scores[~labels])
    thresholds = np.append(np.unique(scores), np.inf)
    p_miss = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    p_fa = 1.0 - np.searchsorted(non, thresholds, side="left") / non.size
    return thresholds, p_miss, p_fa


def eer(ts: TrialSet) -> float:
    """Crossing of P_miss and P_fa, linearly interpolated between the bracketing points."""
    _, p_miss, p_fa = operating_points(ts)
    diff = p_miss - p_fa
    i = int(np.flatnonzero(diff >= 0)[0])
    if i == 0 or diff[i] == 0:
        return float(p_miss[i])
    s = -diff[i - 1] / (diff[i] - diff[i - 1])
    return float(p_miss[i - 1] + s * (p_miss[i] - p_miss[i - 1]))


def min_dcf(ts: TrialSet, p: DcfParams = DcfParams()) -> float:
    _, p_miss, p_fa = operating_points(ts)
    dcf = p.c_miss * p.p_target * p_miss + p.c_fa * (1.0 - p.p_target) * p_fa
    c_def = min(p.c_miss * p.p_target, p.c_fa * (1.0 - p.p_target))
    return float(dcf.min() / c_def)


def compute_metrics(ts: TrialSet, system: str, p: DcfParams = DcfParams()) -> Metrics:
    return Metrics(
        system=system,
        eer=eer(ts),
        min_dcf=min_dcf(ts, p),
        n_target=ts.n_target,
        n_nontarget=ts.n_nontarget,
        condition=ts.condition,
    )


# -------------------------
# Fusion
# -------------------------
def _check_aligned(a: TrialSet, b: TrialSet, what: str) -> None:
    if len(a) != len(b):
        raise ValueError(f"cannot {what}: {len(a)} trials vs {len(b)} trials")
    for line, (ka, kb) in enumerate(zip(a.keys, b.keys), start=1):
        if ka != kb:
            raise ValueError(f"cannot {what}: trial {line} differs ({ka[0]} {ka[1]} vs {kb[0]} {kb[1]})")


def fuse_scores(a: TrialSet, b: TrialSet) -> TrialSet:
    """Equal-weight mean of two score sets over the same trial list."""
    _check_aligned(a, b, "fuse scores")
    if a.scores is None or b.scores is None:
        raise ValueError("cannot fuse unscored trial sets")
    trials = a.trials if a.labeled else b.trials
    return TrialSet(trials, scores=(a.scores + b.scores) / 2.0, condition=a.condition or b.condition)


# -------------------------
# System-level evaluation
# -------------------------
@dataclass
class SystemScores:
    """Scored trial sets per condition for one trained system."""

    system: str
    by_condition: Dict[str, TrialSet] = field(default_factory=dict)

    def metrics(self, p: DcfParams) -> List[Metrics]:
        return [replace(compute_metrics(ts, self.system, p), condition=c) for c, ts in self.by_condition.items()]


def evaluate_system(
    corpus: Corpus,
    theta: NetworkParams,
    coeffs: Optional[TransformCoeffs],
    trials: Mapping[str, TrialSet],
    config: EvalConfig,
    system: str,
) -> SystemScores:
    needed = {i for ts in trials.values() for t in ts.trials for i in t.key}
    embeddings = embed_utterances([u for u in corpus.utterances if u.utterance_id in needed], theta, coeffs)
    center = center_embeddings(corpus, theta, coeffs, config.center_utterances) if config.center_embeddings else None
    out = SystemScores(system)
    for condition, ts in trials.items():
        out.by_condition[condition] = score_trials(ts, embeddings, center)
    return out
