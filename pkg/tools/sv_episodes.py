# =========================================
# file: tools/sv_episodes.py
# =========================================
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from tools.sv_config import ERASE_MODES, EpisodeConfig
from tools.sv_corpus import Utterance, random_crop

Group = Tuple[np.ndarray, ...]


@dataclass(frozen=True)
class Episode:
    speakers: Tuple[int, ...]
    support: Tuple[Group, ...]
    query: Tuple[Group, ...]
    support_aug: Optional[Tuple[Group, ...]] = None
    query_aug: Optional[Tuple[Group, ...]] = None
    # utterance ids per speaker, support then query; kept for disjointness checks
    support_ids: Tuple[Tuple[int, ...], ...] = ()
    query_ids: Tuple[Tuple[int, ...], ...] = ()

    def __post_init__(self):
        if len(set(self.speakers)) != len(self.speakers):
            raise ValueError(f"episode speakers must be distinct, got {self.speakers}")
        if not (len(self.support) == len(self.query) == len(self.speakers)):
            raise ValueError("episode support/query must have one group per speaker")
        if any(len(g) < 1 for g in self.support) or any(len(g) < 1 for g in self.query):
            raise ValueError("every speaker needs at least one support and one query sample")
        for name, aug, orig in (("support_aug", self.support_aug, self.support), ("query_aug", self.query_aug, self.query)):
            if aug is not None and _shape_of(aug) != _shape_of(orig):
                raise ValueError(f"{name} must mirror the shape of its original set")

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    @property
    def support_sizes(self) -> List[int]:
        return [len(g) for g in self.support]

    @property
    def query_sizes(self) -> List[int]:
        return [len(g) for g in self.query]

    @staticmethod
    def flatten(groups: Sequence[Group]) -> List[np.ndarray]:
        """Speaker-major list of matrices."""
        return [x for g in groups for x in g]


def _shape_of(groups: Sequence[Group]):
    return [[x.shape for x in g] for g in groups]


# -------------------------
# Sampling
# -------------------------
def sample_episode(
    pool: Mapping[int, Sequence[Utterance]],
    config: EpisodeConfig,
    rng: np.random.Generator,
) -> Episode:
    """
    Draw N speakers without replacement, then k_support + k_query distinct
    utterances per speaker, split in draw order and cropped.
    """
    need = config.k_support + config.k_query
    eligible = [s for s, utts in pool.items() if len(utts) >= need]
    if len(eligible) < config.n_speakers:
        raise ValueError(
            f"episode needs {config.n_speakers} speakers with >= {need} utterances each, "
            f"corpus has {len(eligible)} (of {len(pool)} speakers)"
        )

    chosen = rng.choice(np.asarray(eligible), size=config.n_speakers, replace=False)
    speakers, support, query, support_ids, query_ids = [], [], [], [], []
    for spk in chosen:
        utts = pool[int(spk)]
        picks = rng.choice(len(utts), size=need, replace=False)
        crops = [random_crop(utts[i], config.crop_min, config.crop_max, rng) for i in picks]
        ids = [utts[i].utterance_id for i in picks]
        speakers.append(int(spk))
        support.append(tuple(crops[: config.k_support]))
        query.append(tuple(crops[config.k_support:]))
        support_ids.append(tuple(ids[: config.k_support]))
        query_ids.append(tuple(ids[config.k_support:]))

    return Episode(
        speakers=tuple(speakers),
        support=tuple(support),
        query=tuple(query),
        support_ids=tuple(support_ids),
        query_ids=tuple(query_ids),
    )


# -------------------------
# Random erasing
# -------------------------
def erase_count(T: int, d: int, rho: float) -> int:
    """floor(rho * T * d) in exact arithmetic on the decimal value of rho."""
    return math.floor(Fraction(repr(float(rho))) * T * d)


def _rectangle_sides(T: int, d: int, n: int, rng: np.random.Generator) -> Tuple[int, int]:
    heights = np.arange(1, T + 1)
    exact = heights[(n % heights == 0) & (n // heights <= d)]
    if exact.size:
        h = int(rng.choice(exact))
        return h, n // h
    # no factor pair fits the grid: largest block of area <= n
    widths = np.minimum(d, n // heights)
    areas = heights * widths
    best = heights[areas == areas.max()]
    h = int(rng.choice(best))
    return h, int(min(d, n // h))


def erase_mask(shape: Tuple[int, int], rho: float, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of the entries random erasing sets to zero."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"erase fraction must be in [0, 1], got {rho}")
    if mode not in ERASE_MODES:
        raise ValueError(f"erase mode must be one of {ERASE_MODES}, got {mode!r}")
    T, d = shape
    n = erase_count(T, d, rho)
    mask = np.zeros((T, d), dtype=bool)
    if n == 0:
        return mask
    if mode == "scattered":
        mask.flat[rng.choice(T * d, size=n, replace=False)] = True
        return mask
    h, w = _rectangle_sides(T, d, n, rng)
    top = int(rng.integers(0, T - h + 1))
    left = int(rng.integers(0, d - w + 1))
    mask[top:top + h, left:left + w] = True
    return mask


def apply_mask(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.array(x, dtype=np.float64, copy=True)
    out[mask] = 0.0
    return out


def random_erase(x: np.ndarray, rho: float, mode: str, rng: np.random.Generator) -> np.ndarray:
    return apply_mask(x, erase_mask(x.shape, rho, mode, rng))


def _erase_groups(groups: Sequence[Group], rho: float, mode: str, rng) -> Tuple[Group, ...]:
    return tuple(tuple(random_erase(x, rho, mode, rng) for x in g) for g in groups)


def augment_support(e: Episode, rho: float, mode: str, rng: np.random.Generator) -> Episode:
    """Pair every support sample with an erased copy of itself."""
    if e.support_aug is not None:
        raise ValueError("episode support set is already augmented")
    return replace(e, support_aug=_erase_groups(e.support, rho, mode, rng))


def augment_query(e: Episode, rho: float, mode: str, rng: np.random.Generator) -> Episode:
    if e.query_aug is not None:
        raise ValueError("episode query set is already augmented")
    return replace(e, query_aug=_erase_groups(e.query, rho, mode, rng))
