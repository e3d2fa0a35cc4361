# =========================================
# file: tools/sv_persistence.py
# =========================================
"""
On-disk formats.

Binary files are little-endian: u32 header fields, float64 row-major data.

  corpus:      "MSVC" version n_utterances n_speakers n_train_speakers d
               then per utterance: speaker_id T (T*d float64)
  checkpoint:  "MSVK" version chain_len chain[...]
               then every parameter tensor in declaration order
               then has_coeffs (u32); if 1: "MSTC" + every coefficient tensor

Every writer goes through a temp file renamed into place on success.
"""
from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd

from tools.sv_corpus import Corpus, Utterance
from tools.sv_eval import NONTARGET, TARGET, Metrics, Trial, TrialSet
from tools.sv_network import NetworkDims, NetworkParams, TransformCoeffs

CORPUS_MAGIC = b"MSVC"
CHECKPOINT_MAGIC = b"MSVK"
COEFF_MAGIC = b"MSTC"
FORMAT_VERSION = 1

_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")


class FileFormatError(ValueError):
    """A file is truncated, has the wrong magic/version, or holds a malformed line."""


# -------------------------
# Atomic writes
# -------------------------
@contextmanager
def atomic_path(path: Path | str) -> Iterator[Path]:
    """Yield a temp path next to `path`; rename it over `path` only if the block succeeds."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_bytes_atomic(path: Path | str, data: bytes) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)
    return Path(path)


def write_text_atomic(path: Path | str, text: str) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")
    return Path(path)


def write_csv_atomic(path: Path | str, frame: pd.DataFrame) -> Path:
    with atomic_path(path) as tmp:
        frame.to_csv(tmp, index=False, lineterminator="\n")
    return Path(path)


def file_sha256(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -------------------------
# Binary reader
# -------------------------
class _Reader:
    def __init__(self, path: Path):
        self.path = path
        self.data = path.read_bytes()
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FileFormatError(f"{self.path}: truncated while reading {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str, count: int = 1) -> np.ndarray:
        return np.frombuffer(self.take(4 * count, what), dtype=_U32).astype(np.int64)

    def f64(self, shape: Tuple[int, ...], what: str) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(8 * n, what), dtype=_F64).reshape(shape).astype(np.float64)

    def magic(self, expected: bytes, what: str) -> None:
        got = self.take(len(expected), f"{what} magic")
        if got != expected:
            raise FileFormatError(f"{self.path}: not a {what} file (magic {got!r}, expected {expected!r})")

    def version(self, what: str) -> None:
        v = int(self.u32(f"{what} version")[0])
        if v != FORMAT_VERSION:
            raise FileFormatError(f"{self.path}: unsupported {what} version {v}")

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FileFormatError(f"{self.path}: {len(self.data) - self.pos} trailing bytes")


def _u32(*values: int) -> bytes:
    return np.asarray(values, dtype=_U32).tobytes()


def _f64(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype=_F64).tobytes()


def _require(path: Path | str, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# -------------------------
# Corpus
# -------------------------
def corpus_to_bytes(corpus: Corpus) -> bytes:
    parts = [
        CORPUS_MAGIC,
        _u32(FORMAT_VERSION, len(corpus.utterances), corpus.num_speakers, corpus.num_train_speakers, corpus.feature_dim),
    ]
    for u in corpus.utterances:
        parts.append(_u32(u.speaker_id, u.num_frames))
        parts.append(_f64(u.features))
    return b"".join(parts)


def save_corpus(path: Path | str, corpus: Corpus) -> Path:
    return write_bytes_atomic(path, corpus_to_bytes(corpus))


def read_corpus_header(path: Path | str) -> Dict[str, int]:
    r = _Reader(_require(path, "corpus file"))
    r.magic(CORPUS_MAGIC, "corpus")
    r.version("corpus")
    n_utt, n_spk, n_train, d = (int(v) for v in r.u32("corpus header", 4))
    return {"n_utterances": n_utt, "n_speakers": n_spk, "n_train_speakers": n_train, "feature_dim": d}


def load_corpus(path: Path | str) -> Corpus:
    """Utterance ids are the record index."""
    r = _Reader(_require(path, "corpus file"))
    r.magic(CORPUS_MAGIC, "corpus")
    r.version("corpus")
    n_utt, n_spk, n_train, d = (int(v) for v in r.u32("corpus header", 4))
    utterances: List[Utterance] = []
    for i in range(n_utt):
        speaker, frames = (int(v) for v in r.u32(f"utterance {i} header", 2))
        features = r.f64((frames, d), f"utterance {i} features")
        utterances.append(Utterance(features=features, speaker_id=speaker, utterance_id=i))
    r.finish()
    corpus = Corpus(utterances=utterances, num_train_speakers=n_train, feature_dim=d)
    if corpus.num_speakers != n_spk:
        raise FileFormatError(f"{path}: header says {n_spk} speakers, records hold {corpus.num_speakers}")
    return corpus


# -------------------------
# Checkpoints
# -------------------------
def checkpoint_to_bytes(params: NetworkParams, coeffs: Optional[TransformCoeffs] = None) -> bytes:
    chain = params.dims.chain
    parts = [CHECKPOINT_MAGIC, _u32(FORMAT_VERSION, len(chain), *chain)]
    parts.extend(_f64(params.tensors[k]) for k in params.names())
    if coeffs is None:
        parts.append(_u32(0))
    else:
        if coeffs.dims != params.dims:
            raise ValueError("coefficients and parameters were built for different networks")
        parts.append(_u32(1))
        parts.append(COEFF_MAGIC)
        parts.extend(_f64(coeffs.tensors[k]) for k in coeffs.names())
    return b"".join(parts)


def save_checkpoint(path: Path | str, params: NetworkParams, coeffs: Optional[TransformCoeffs] = None) -> Path:
    return write_bytes_atomic(path, checkpoint_to_bytes(params, coeffs))


def load_checkpoint(path: Path | str) -> Tuple[NetworkParams, Optional[TransformCoeffs]]:
    r = _Reader(_require(path, "checkpoint"))
    r.magic(CHECKPOINT_MAGIC, "checkpoint")
    r.version("checkpoint")
    chain_len = int(r.u32("chain length")[0])
    try:
        dims = NetworkDims.from_chain(r.u32("dimension chain", chain_len))
    except ValueError as e:
        raise FileFormatError(f"{path}: {e}") from None
    params = NetworkParams(dims, {k: r.f64(s, k) for k, s in dims.param_shapes().items()})
    coeffs = None
    if int(r.u32("coefficient flag")[0]):
        r.magic(COEFF_MAGIC, "coefficient section")
        coeffs = TransformCoeffs(dims, {k: r.f64(s, k) for k, s in dims.coeff_shapes().items()})
    r.finish()
    return params, coeffs


# -------------------------
# Text files
# -------------------------
def _lines(path: Path) -> Iterator[Tuple[int, List[str]]]:
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            yield number, line.split()


def _int_id(path: Path, number: int, token: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise FileFormatError(f"{path}:{number}: utterance id {token!r} is not an integer") from None


def trials_to_text(ts: TrialSet) -> str:
    return "".join(f"{t.enroll} {t.test} {t.label}\n" for t in ts.trials)


def save_trials(path: Path | str, ts: TrialSet) -> Path:
    return write_text_atomic(path, trials_to_text(ts))


def load_trials(path: Path | str) -> TrialSet:
    path = _require(path, "trial file")
    trials = []
    for number, tokens in _lines(path):
        if len(tokens) != 3 or tokens[2] not in (TARGET, NONTARGET):
            raise FileFormatError(f"{path}:{number}: expected 'enroll-id test-id target|nontarget'")
        try:
            trials.append(Trial(_int_id(path, number, tokens[0]), _int_id(path, number, tokens[1]), tokens[2] == TARGET))
        except FileFormatError:
            raise
        except ValueError as e:
            raise FileFormatError(f"{path}:{number}: {e}") from None
    if not trials:
        raise FileFormatError(f"{path}: trial file contains no trials")
    return TrialSet(tuple(trials))


def scores_to_text(ts: TrialSet) -> str:
    if ts.scores is None:
        raise ValueError("trial set has not been scored")
    return "".join(f"{t.enroll} {t.test} {float(s)!r}\n" for t, s in zip(ts.trials, ts.scores))


def save_scores(path: Path | str, ts: TrialSet) -> Path:
    return write_text_atomic(path, scores_to_text(ts))


def load_scores(path: Path | str) -> TrialSet:
    """Score files carry no labels; attach them with TrialSet.with_labels_from."""
    path = _require(path, "score file")
    trials, scores = [], []
    for number, tokens in _lines(path):
        if len(tokens) != 3:
            raise FileFormatError(f"{path}:{number}: expected 'enroll-id test-id score'")
        try:
            score = float(tokens[2])
        except ValueError:
            raise FileFormatError(f"{path}:{number}: score {tokens[2]!r} is not a number") from None
        if not np.isfinite(score):
            raise FileFormatError(f"{path}:{number}: score is not finite")
        trials.append(Trial(_int_id(path, number, tokens[0]), _int_id(path, number, tokens[1])))
        scores.append(score)
    if not trials:
        raise FileFormatError(f"{path}: score file contains no scores")
    return TrialSet(tuple(trials), scores=np.asarray(scores))


def metrics_to_json(metrics: Metrics) -> str:
    return json.dumps(metrics.to_json(), indent=2) + "\n"


def save_metrics(path: Path | str, metrics: Metrics) -> Path:
    return write_text_atomic(path, metrics_to_json(metrics))


def load_metrics(path: Path | str) -> Dict[str, Any]:
    return json.loads(_require(path, "metrics file").read_text(encoding="utf-8"))
