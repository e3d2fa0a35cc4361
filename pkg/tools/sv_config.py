# =========================================
# file: tools/sv_config.py
# =========================================
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Sequence, Tuple

import numpy as np

SYSTEMS = ("baseline", "pn", "mltc", "acl", "mltc-acl", "mlft", "acl-q")
REPORT_SYSTEMS = SYSTEMS + ("fusion",)
ERASE_MODES = ("rectangle", "scattered")
METRICS = ("sqeuclidean", "cosine")


class ConfigError(ValueError):
    """A run config is missing a key, has an unknown key, or holds a bad value."""


# -------------------------
# Seed sub-streams
# -------------------------
def derive_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """
    Independent generator for a named sub-stream of the top-level seed.

    Extra integers key further (e.g. per speaker) so results do not depend
    on the order or parallelism in which streams are drawn.
    """
    key = [int(seed), zlib.crc32(stream.encode("utf-8"))] + [int(e) for e in extra]
    return np.random.default_rng(np.random.SeedSequence(key))


# -------------------------
# Sections
# -------------------------
@dataclass(frozen=True)
class CorpusConfig:
    num_speakers: int = 200
    utterances_per_speaker: int = 30
    held_out_speakers: int = 50
    held_out_utterances: int = 10
    feature_dim: int = 40
    latent_dim: int = 16
    min_frames: int = 200
    max_frames: int = 400
    session_noise: float = 0.75
    frame_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.num_speakers < 2:
            raise ConfigError(f"corpus.num_speakers must be >= 2, got {self.num_speakers}")
        if self.utterances_per_speaker < 1:
            raise ConfigError("corpus.utterances_per_speaker must be >= 1")
        if self.held_out_speakers < 0 or self.held_out_utterances < 0:
            raise ConfigError("corpus.held_out_* must be >= 0")
        if self.held_out_speakers > 0 and self.held_out_utterances < 1:
            raise ConfigError("corpus.held_out_utterances must be >= 1 when held-out speakers exist")
        if self.feature_dim < 1 or self.latent_dim < 1:
            raise ConfigError("corpus.feature_dim and corpus.latent_dim must be >= 1")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError(
                f"corpus frame bounds need 1 <= min_frames <= max_frames, "
                f"got {self.min_frames}, {self.max_frames}"
            )
        if self.session_noise < 0 or self.frame_noise < 0:
            raise ConfigError("corpus noise scales must be >= 0")


@dataclass(frozen=True)
class EpisodeConfig:
    n_speakers: int = 20
    k_support: int = 1
    k_query: int = 3
    crop_min: int = 200
    crop_max: int = 400
    erase_fraction: float = 0.1
    erase_mode: str = "rectangle"
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers < 1 or self.k_support < 1 or self.k_query < 1:
            raise ConfigError(
                f"episode needs n_speakers, k_support, k_query >= 1, got "
                f"{self.n_speakers}, {self.k_support}, {self.k_query}"
            )
        if not 1 <= self.crop_min <= self.crop_max:
            raise ConfigError(f"episode crop bounds invalid: {self.crop_min}, {self.crop_max}")
        if not 0.0 <= self.erase_fraction <= 1.0:
            raise ConfigError(f"episode.erase_fraction must be in [0, 1], got {self.erase_fraction}")
        if self.erase_mode not in ERASE_MODES:
            raise ConfigError(f"episode.erase_mode must be one of {ERASE_MODES}, got {self.erase_mode!r}")

    @property
    def batch_size(self) -> int:
        return self.n_speakers * (self.k_support + self.k_query)


@dataclass(frozen=True)
class TrainConfig:
    system: str = "pn"
    steps_stage1: int = 2000
    steps_stage2: int = 500
    lr_stage1: Tuple[float, float] = (1e-3, 1e-4)
    lr_stage2: Tuple[float, float] = (1e-4, 1e-5)
    lam: float = 0.5
    metric: str = "sqeuclidean"
    normalize_embeddings: bool = True
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    frame_dims: Tuple[int, ...] = (128, 128, 128)
    embed_dim: int = 64
    fc2_dim: int = 64
    log_every: int = 50
    seed: int = 0
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ConfigError(f"train.system must be one of {SYSTEMS}, got {self.system!r}")
        if self.steps_stage1 < 0 or self.steps_stage2 < 0:
            raise ConfigError("train step counts must be >= 0")
        for key in ("lr_stage1", "lr_stage2"):
            start, end = getattr(self, key)
            if not (start > 0 and end > 0 and end <= start):
                raise ConfigError(f"train.{key} must be positive and non-increasing, got {start}, {end}")
        if self.lam < 0:
            raise ConfigError(f"train.lam must be >= 0, got {self.lam}")
        if self.metric not in METRICS:
            raise ConfigError(f"train.metric must be one of {METRICS}, got {self.metric!r}")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("train adam hyperparameters out of range")
        if not self.frame_dims or min(self.frame_dims) < 1 or self.embed_dim < 1 or self.fc2_dim < 1:
            raise ConfigError("train network widths must be >= 1")
        if self.log_every < 1:
            raise ConfigError("train.log_every must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    targets_per_speaker: int = 10
    nontargets_per_speaker: int = 40
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    center_embeddings: bool = True
    center_utterances: int = 2000
    conditions: Tuple[str, ...] = ("dev", "eval")

    def __post_init__(self):
        if self.targets_per_speaker < 0 or self.nontargets_per_speaker < 0:
            raise ConfigError("eval trial counts must be >= 0")
        if not 0 < self.p_target < 1:
            raise ConfigError(f"eval.p_target must be in (0, 1), got {self.p_target}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ConfigError("eval costs must be > 0")
        if self.center_utterances < 1:
            raise ConfigError("eval.center_utterances must be >= 1")
        if not self.conditions or len(set(self.conditions)) != len(self.conditions):
            raise ConfigError(f"eval.conditions must be distinct and nonempty, got {self.conditions}")


@dataclass(frozen=True)
class ExperimentConfig:
    systems: Tuple[str, ...] = REPORT_SYSTEMS
    seeds: Tuple[int, ...] = (0, 1, 2)
    workers: int = 1
    trend_slack: float = 0.005

    def __post_init__(self):
        unknown = [s for s in self.systems if s not in REPORT_SYSTEMS]
        if unknown:
            raise ConfigError(f"experiment.systems has unknown entries {unknown}")
        if not self.systems or not self.seeds:
            raise ConfigError("experiment.systems and experiment.seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"experiment.seeds must be distinct, got {self.seeds}")
        if self.workers < 1:
            raise ConfigError("experiment.workers must be >= 1")
        if self.trend_slack < 0:
            raise ConfigError("experiment.trend_slack must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusConfig
    episode: EpisodeConfig
    train: TrainConfig
    eval: EvalConfig
    experiment: ExperimentConfig
    output_dir: Path
    seed: int = 0

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run, different training seed; corpus and trials stay put."""
        return replace(
            self,
            train=replace(self.train, seed=int(seed), episode=replace(self.episode, seed=int(seed))),
        )

    def with_system(self, system: str) -> "RunConfig":
        return replace(self, train=replace(self.train, system=system))


# -------------------------
# Loading
# -------------------------
# keys the JSON document carries per section; seeds come from the top level
_SECTION_KEYS: Dict[str, Tuple[str, ...]] = {
    "corpus": tuple(f.name for f in fields(CorpusConfig) if f.name != "seed"),
    "episode": tuple(f.name for f in fields(EpisodeConfig) if f.name != "seed"),
    "train": tuple(f.name for f in fields(TrainConfig) if f.name not in ("seed", "system", "episode")),
    "eval": tuple(f.name for f in fields(EvalConfig)),
    "experiment": tuple(f.name for f in fields(ExperimentConfig)),
}
_TOP_KEYS = ("seed", "output_dir") + tuple(_SECTION_KEYS)

_TUPLE_KEYS = {"lr_stage1", "lr_stage2", "frame_dims", "conditions", "systems", "seeds"}
_BOOL_KEYS = {"normalize_embeddings", "center_embeddings"}
_STR_KEYS = {"metric", "erase_mode"}
_FLOAT_KEYS = {
    "session_noise", "frame_noise", "erase_fraction", "lam", "weight_decay",
    "adam_beta1", "adam_beta2", "adam_eps", "p_target", "c_miss", "c_fa", "trend_slack",
}


def _coerce(section: str, key: str, raw: Any) -> Any:
    dotted = f"{section}.{key}"
    if key in _TUPLE_KEYS:
        if not isinstance(raw, (list, tuple)):
            raise ConfigError(f"{dotted} must be a list, got {raw!r}")
        if key in ("conditions", "systems"):
            return tuple(str(v) for v in raw)
        if key in ("lr_stage1", "lr_stage2"):
            if len(raw) != 2:
                raise ConfigError(f"{dotted} must be [start, end], got {raw!r}")
            return tuple(_number(dotted, v, float) for v in raw)
        return tuple(_number(dotted, v, int) for v in raw)
    if key in _BOOL_KEYS:
        if not isinstance(raw, bool):
            raise ConfigError(f"{dotted} must be true/false, got {raw!r}")
        return raw
    if key in _STR_KEYS:
        if not isinstance(raw, str):
            raise ConfigError(f"{dotted} must be a string, got {raw!r}")
        return raw
    if key in _FLOAT_KEYS:
        return _number(dotted, raw, float)
    return _number(dotted, raw, int)


def _number(dotted: str, raw: Any, kind):
    if isinstance(raw, bool) or not isinstance(raw, (int, float)):
        raise ConfigError(f"{dotted} must be a number, got {raw!r}")
    if kind is int and float(raw) != int(raw):
        raise ConfigError(f"{dotted} must be an integer, got {raw!r}")
    return kind(raw)


def _section(payload: Mapping[str, Any], name: str) -> Dict[str, Any]:
    body = payload.get(name)
    if not isinstance(body, dict):
        raise ConfigError(f"missing config section: {name}")
    expected = _SECTION_KEYS[name]
    unknown = sorted(set(body) - set(expected))
    if unknown:
        raise ConfigError(f"unknown config key: {name}.{unknown[0]}")
    for key in expected:
        if key not in body:
            raise ConfigError(f"missing config key: {name}.{key}")
    return {key: _coerce(name, key, body[key]) for key in expected}


def run_config_from_dict(payload: Mapping[str, Any], base_dir: Path | None = None) -> RunConfig:
    if not isinstance(payload, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = sorted(set(payload) - set(_TOP_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    for key in ("seed", "output_dir"):
        if key not in payload:
            raise ConfigError(f"missing config key: {key}")

    seed = _number("seed", payload["seed"], int)
    if not isinstance(payload["output_dir"], str) or not payload["output_dir"]:
        raise ConfigError("output_dir must be a nonempty string")
    out = Path(payload["output_dir"]).expanduser()
    if not out.is_absolute():
        out = (base_dir or Path.cwd()) / out

    episode = EpisodeConfig(seed=seed, **_section(payload, "episode"))
    return RunConfig(
        corpus=CorpusConfig(seed=seed, **_section(payload, "corpus")),
        episode=episode,
        train=TrainConfig(seed=seed, episode=episode, **_section(payload, "train")),
        eval=EvalConfig(**_section(payload, "eval")),
        experiment=ExperimentConfig(**_section(payload, "experiment")),
        output_dir=out.resolve(),
        seed=seed,
    )


def apply_overrides(payload: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """
    Apply `section.key=value` strings onto a raw config document.

    Values parse as JSON, falling back to a bare string.
    """
    doc = json.loads(json.dumps(payload))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = dotted.strip().split(".")
        if len(parts) == 1:
            if parts[0] not in _TOP_KEYS or parts[0] in _SECTION_KEYS:
                raise ConfigError(f"unknown config key: {dotted}")
            doc[parts[0]] = value
        elif len(parts) == 2 and parts[0] in _SECTION_KEYS:
            if parts[1] not in _SECTION_KEYS[parts[0]]:
                raise ConfigError(f"unknown config key: {dotted}")
            doc.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"unknown config key: {dotted}")
    return doc


def load_run_config(path: Path | str, overrides: Sequence[str] = ()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    if overrides:
        payload = apply_overrides(payload, overrides)
    return run_config_from_dict(payload, base_dir=path.parent)


def run_config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    """Inverse of run_config_from_dict (seeds folded back to the top level)."""

    def _plain(obj, keys):
        out = {}
        for key in keys:
            value = getattr(obj, key)
            out[key] = list(value) if isinstance(value, tuple) else value
        return out

    return {
        "seed": cfg.seed,
        "output_dir": str(cfg.output_dir),
        "corpus": _plain(cfg.corpus, _SECTION_KEYS["corpus"]),
        "episode": _plain(cfg.episode, _SECTION_KEYS["episode"]),
        "train": _plain(cfg.train, _SECTION_KEYS["train"]),
        "eval": _plain(cfg.eval, _SECTION_KEYS["eval"]),
        "experiment": _plain(cfg.experiment, _SECTION_KEYS["experiment"]),
    }
