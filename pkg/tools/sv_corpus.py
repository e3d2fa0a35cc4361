# =========================================
# file: tools/sv_corpus.py
# =========================================
"""
Synthetic multi-speaker corpus standing in for FBank features.

Each utterance is the speaker's projected latent broadcast over time, plus a
per-utterance session offset and per-frame noise. Training and held-out
speakers share one projection and have disjoint ids.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from tools.sv_config import CorpusConfig, derive_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    latent: np.ndarray


@dataclass(frozen=True)
class Utterance:
    features: np.ndarray  # (T, d)
    speaker_id: int
    utterance_id: int

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Corpus:
    utterances: List[Utterance]
    num_train_speakers: int
    feature_dim: int
    speakers: List[SpeakerProfile] = field(default_factory=list)

    @property
    def train_utterances(self) -> List[Utterance]:
        return [u for u in self.utterances if u.speaker_id < self.num_train_speakers]

    @property
    def held_out_utterances(self) -> List[Utterance]:
        return [u for u in self.utterances if u.speaker_id >= self.num_train_speakers]

    @property
    def num_speakers(self) -> int:
        return len({u.speaker_id for u in self.utterances})

    def by_id(self) -> Dict[int, Utterance]:
        return {u.utterance_id: u for u in self.utterances}


def group_by_speaker(utterances: Sequence[Utterance]) -> Dict[int, List[Utterance]]:
    """Speaker id -> utterances, in ascending speaker-id order."""
    groups: Dict[int, List[Utterance]] = {}
    for u in utterances:
        groups.setdefault(u.speaker_id, []).append(u)
    return dict(sorted(groups.items()))


def projection_matrix(config: CorpusConfig) -> np.ndarray:
    """The fixed L -> d map, scaled so projected latents have unit variance."""
    rng = derive_rng(config.seed, "projection")
    return rng.standard_normal((config.feature_dim, config.latent_dim)) / np.sqrt(config.latent_dim)


def _speaker_utterances(
    config: CorpusConfig,
    projection: np.ndarray,
    speaker_id: int,
    count: int,
    first_utterance_id: int,
):
    rng = derive_rng(config.seed, "corpus", speaker_id)
    latent = rng.standard_normal(config.latent_dim)
    latent.setflags(write=False)
    center = projection @ latent

    utts = []
    for i in range(count):
        T = int(rng.integers(config.min_frames, config.max_frames + 1))
        session = config.session_noise * rng.standard_normal(config.feature_dim)
        frames = config.frame_noise * rng.standard_normal((T, config.feature_dim))
        features = (center + session) + frames
        utts.append(Utterance(features=features, speaker_id=speaker_id, utterance_id=first_utterance_id + i))
    return SpeakerProfile(speaker_id=speaker_id, latent=latent), utts


def generate_corpus(config: CorpusConfig) -> Corpus:
    """
    Deterministic corpus for a config: training speakers first, then held-out.

    Every speaker draws from its own sub-stream, so the result is independent
    of generation order.
    """
    projection = projection_matrix(config)
    plan = [(s, config.utterances_per_speaker) for s in range(config.num_speakers)]
    plan += [
        (config.num_speakers + s, config.held_out_utterances) for s in range(config.held_out_speakers)
    ]

    speakers: List[SpeakerProfile] = []
    utterances: List[Utterance] = []
    for speaker_id, count in plan:
        profile, utts = _speaker_utterances(config, projection, speaker_id, count, len(utterances))
        speakers.append(profile)
        utterances.extend(utts)

    logger.info(
        f"Generated corpus: {config.num_speakers} training + {config.held_out_speakers} held-out "
        f"speakers, {len(utterances)} utterances, d={config.feature_dim}"
    )
    return Corpus(
        utterances=utterances,
        num_train_speakers=config.num_speakers,
        feature_dim=config.feature_dim,
        speakers=speakers,
    )


def random_crop(
    u: Utterance | np.ndarray,
    len_min: int,
    len_max: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Contiguous slice with length uniform in [len_min, min(len_max, T)]."""
    x = u.features if isinstance(u, Utterance) else np.asarray(u)
    T = int(x.shape[0])
    if len_min < 1 or len_min > len_max:
        raise ValueError(f"crop bounds need 1 <= len_min <= len_max, got {len_min}, {len_max}")
    if T < len_min:
        uid = f" {u.utterance_id}" if isinstance(u, Utterance) else ""
        raise ValueError(f"utterance{uid} has {T} frames, shorter than crop minimum {len_min}")

    length = int(rng.integers(len_min, min(len_max, T) + 1))
    start = int(rng.integers(0, T - length + 1))
    return x[start:start + length].copy()


def nearest_centroid_accuracy(utterances: Sequence[Utterance], centroids: Optional[Dict[int, np.ndarray]] = None) -> float:
    """Accuracy of classifying utterance means by the closest speaker centroid."""
    means = np.stack([u.features.mean(axis=0) for u in utterances])
    labels = np.array([u.speaker_id for u in utterances])
    if centroids is None:
        centroids = {s: means[labels == s].mean(axis=0) for s in np.unique(labels)}
    ids = np.array(list(centroids))
    table = np.stack([centroids[s] for s in ids])
    d = ((means[:, None, :] - table[None, :, :]) ** 2).sum(axis=-1)
    return float((ids[d.argmin(axis=1)] == labels).mean())
