# =========================================
# file: tools/sv_network.py
# =========================================
"""
Embedding extractor: per-frame affine+ReLU stack, statistics pooling,
fc1 (the embedding, taken before its activation), fc2, classifier head.

Transformation coefficients rescale each extractor layer's weight columns
(S1, one scale per output unit) and shift its bias (S2). The classifier is
never transformed.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from tools import sv_grad as G
from tools.sv_grad import Node


@dataclass(frozen=True)
class NetworkDims:
    input_dim: int = 40
    frame_dims: Tuple[int, ...] = (128, 128, 128)
    embed_dim: int = 64
    fc2_dim: int = 64
    num_classes: int = 200

    def __post_init__(self):
        if min(self.chain) < 1 or not self.frame_dims:
            raise ValueError(f"network dimensions must be positive, got chain {self.chain}")

    @property
    def chain(self) -> Tuple[int, ...]:
        return (self.input_dim, *self.frame_dims, self.embed_dim, self.fc2_dim, self.num_classes)

    @classmethod
    def from_chain(cls, chain: Sequence[int]) -> "NetworkDims":
        chain = [int(c) for c in chain]
        if len(chain) < 5:
            raise ValueError(f"dimension chain too short: {chain}")
        return cls(
            input_dim=chain[0],
            frame_dims=tuple(chain[1:-3]),
            embed_dim=chain[-3],
            fc2_dim=chain[-2],
            num_classes=chain[-1],
        )

    def layers(self) -> List[Tuple[str, int, int]]:
        """(name, fan_in, fan_out) in declaration order."""
        out = []
        d_in = self.input_dim
        for i, d_out in enumerate(self.frame_dims):
            out.append((f"frame{i}", d_in, d_out))
            d_in = d_out
        out.append(("fc1", 2 * d_in, self.embed_dim))
        out.append(("fc2", self.embed_dim, self.fc2_dim))
        out.append(("classifier", self.fc2_dim, self.num_classes))
        return out

    def extractor_layers(self) -> List[Tuple[str, int, int]]:
        return [layer for layer in self.layers() if layer[0] != "classifier"]

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for name, fan_in, fan_out in self.layers():
            shapes[f"{name}.W"] = (fan_in, fan_out)
            shapes[f"{name}.b"] = (fan_out,)
        return shapes

    def coeff_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for name, _, fan_out in self.extractor_layers():
            shapes[f"{name}.S1"] = (1, fan_out)
            shapes[f"{name}.S2"] = (fan_out,)
        return shapes


def _checksum(tensors: Mapping[str, np.ndarray], order: Sequence[str]) -> str:
    h = hashlib.sha256()
    for key in order:
        h.update(key.encode("utf-8"))
        h.update(np.ascontiguousarray(tensors[key], dtype="<f8").tobytes())
    return h.hexdigest()


def _validated(tensors: Mapping[str, np.ndarray], shapes: Mapping[str, Tuple[int, ...]], what: str) -> Dict[str, np.ndarray]:
    missing = [k for k in shapes if k not in tensors]
    extra = [k for k in tensors if k not in shapes]
    if missing or extra:
        raise ValueError(f"{what}: missing {missing}, unexpected {extra}")
    out = {}
    for key, shape in shapes.items():
        arr = np.asarray(tensors[key], dtype=np.float64)
        if arr.shape != shape:
            raise G.ShapeError(f"{what}: {key} has shape {arr.shape}, expected {shape}")
        out[key] = arr
    return out


@dataclass
class NetworkParams:
    dims: NetworkDims
    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        self.tensors = _validated(self.tensors, self.dims.param_shapes(), "network params")

    def names(self) -> List[str]:
        return list(self.dims.param_shapes())

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    def checksum(self) -> str:
        return _checksum(self.tensors, self.names())


@dataclass
class TransformCoeffs:
    dims: NetworkDims
    tensors: Dict[str, np.ndarray]

    def __post_init__(self):
        self.tensors = _validated(self.tensors, self.dims.coeff_shapes(), "transform coefficients")

    def names(self) -> List[str]:
        return list(self.dims.coeff_shapes())

    def copy(self) -> "TransformCoeffs":
        return TransformCoeffs(self.dims, {k: v.copy() for k, v in self.tensors.items()})

    @classmethod
    def identity(cls, dims: NetworkDims) -> "TransformCoeffs":
        tensors = {}
        for key, shape in dims.coeff_shapes().items():
            tensors[key] = np.ones(shape) if key.endswith(".S1") else np.zeros(shape)
        return cls(dims, tensors)

    @classmethod
    def near_identity(cls, dims: NetworkDims, rng: np.random.Generator, noise: float = 1e-3) -> "TransformCoeffs":
        base = cls.identity(dims)
        for key, value in base.tensors.items():
            base.tensors[key] = value + rng.uniform(-noise, noise, size=value.shape)
        return base


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    normalized: bool = False

    def unit(self) -> "Embedding":
        if self.normalized:
            return self
        norm = float(np.linalg.norm(self.vector))
        if norm == 0:
            raise ValueError("cannot normalize an all-zero embedding")
        return Embedding(self.vector / norm, normalized=True)


# -------------------------
# Init
# -------------------------
def init_params(dims: NetworkDims, seed: int | np.random.Generator) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    tensors = {}
    for name, fan_in, fan_out in dims.layers():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[f"{name}.W"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        tensors[f"{name}.b"] = np.zeros(fan_out)
    return NetworkParams(dims, tensors)


def as_leaves(tensors: Mapping[str, np.ndarray]) -> Dict[str, Node]:
    return {k: G.leaf(v, name=k) for k, v in tensors.items()}


def as_constants(tensors: Mapping[str, np.ndarray]) -> Dict[str, Node]:
    return {k: G.constant(v) for k, v in tensors.items()}


# -------------------------
# Graph builders
# -------------------------
def _affine(x: Node, theta: Mapping[str, Node], layer: str, coeffs: Optional[Mapping[str, Node]]) -> Node:
    W, b = theta[f"{layer}.W"], theta[f"{layer}.b"]
    if coeffs is not None:
        W = G.bmul(W, coeffs[f"{layer}.S1"])
        b = G.add(b, coeffs[f"{layer}.S2"])
    return G.add(G.matmul(x, W), b)


def _check_inputs(xs: Sequence[np.ndarray], dims: NetworkDims) -> None:
    if not xs:
        raise ValueError("no utterances to embed")
    for x in xs:
        if x.ndim != 2 or x.shape[0] < 1:
            raise G.ShapeError(f"feature matrix must be (T >= 1, d), got shape {x.shape}")
        if x.shape[1] != dims.input_dim:
            raise G.ShapeError(f"feature width {x.shape[1]} does not match network input {dims.input_dim}")


def extractor_graph(
    xs: Sequence[np.ndarray],
    theta: Mapping[str, Node],
    dims: NetworkDims,
    coeffs: Optional[Mapping[str, Node]] = None,
) -> Node:
    """Embeddings of a batch of variable-length utterances, shape (B, embed_dim)."""
    _check_inputs(xs, dims)
    lengths = [int(x.shape[0]) for x in xs]
    h: Node = G.constant(np.concatenate([np.asarray(x, dtype=np.float64) for x in xs], axis=0))
    for i in range(len(dims.frame_dims)):
        h = G.relu(_affine(h, theta, f"frame{i}", coeffs))
    mean = G.time_mean(h, lengths)
    std = G.sqrt(G.add(G.time_var(h, lengths), G.VAR_EPS))
    pooled = G.concat([mean, std], axis=1)
    return _affine(pooled, theta, "fc1", coeffs)


def head_graph(
    embeddings: Node,
    theta: Mapping[str, Node],
    coeffs: Optional[Mapping[str, Node]] = None,
) -> Node:
    """Classifier logits from fc1 embeddings, shape (B, num_classes)."""
    h = G.relu(_affine(G.relu(embeddings), theta, "fc2", coeffs))
    return _affine(h, theta, "classifier", None)


# -------------------------
# Public ops
# -------------------------
def embed(x: np.ndarray, theta: NetworkParams) -> Embedding:
    out = extractor_graph([x], as_constants(theta.tensors), theta.dims)
    return Embedding(out.value[0].copy())


def embed_transformed(x: np.ndarray, theta: NetworkParams, c: TransformCoeffs) -> Embedding:
    if c.dims != theta.dims:
        raise G.ShapeError(f"coefficients built for {c.dims.chain}, network is {theta.dims.chain}")
    out = extractor_graph([x], as_constants(theta.tensors), theta.dims, as_constants(c.tensors))
    return Embedding(out.value[0].copy())


def classify(emb: Embedding, theta: NetworkParams) -> np.ndarray:
    vec = np.asarray(emb.vector, dtype=np.float64)
    if vec.shape != (theta.dims.embed_dim,):
        raise G.ShapeError(f"embedding has shape {vec.shape}, classifier expects ({theta.dims.embed_dim},)")
    logits = head_graph(G.constant(vec[None, :]), as_constants(theta.tensors))
    return G.softmax(logits).value[0]


def embed_batch(
    xs: Sequence[np.ndarray],
    theta: NetworkParams,
    coeffs: Optional[TransformCoeffs] = None,
    chunk_size: int = 64,
) -> np.ndarray:
    """Embeddings for many utterances without gradients, (B, embed_dim)."""
    const = as_constants(theta.tensors)
    cconst = as_constants(coeffs.tensors) if coeffs is not None else None
    rows = []
    for start in range(0, len(xs), chunk_size):
        rows.append(extractor_graph(xs[start:start + chunk_size], const, theta.dims, cconst).value)
    return np.concatenate(rows, axis=0)
