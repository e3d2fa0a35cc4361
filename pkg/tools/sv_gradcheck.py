# =========================================
# file: tools/sv_gradcheck.py
# =========================================
"""
Finite-difference suite: every primitive, every loss, and both forward
paths of a tiny network, over a set of seeds.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Sequence, Tuple

import numpy as np
import pandas as pd

from tools import sv_grad as G
from tools import sv_losses as L
from tools.sv_network import NetworkDims, TransformCoeffs, extractor_graph, head_graph, init_params

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = tuple(range(10))

# network-check inputs
KINK_MARGIN = 1e-2
MIN_FRAME_STD = 0.05
MAX_DRAWS = 2000

Check = Tuple[str, Callable[[Mapping[str, G.Node]], G.Node], Dict[str, np.ndarray]]


@dataclass
class GradSuiteResult:
    tolerance: float
    reports: List[G.GradCheckReport] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def failures(self) -> List[G.GradCheckReport]:
        return [r for r in self.reports if not r.passed]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"check": r.name, "max_rel_error": r.worst, "passed": r.passed} for r in self.reports]
        )


# -------------------------
# Inputs
# -------------------------
def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    """Random values with |x| >= margin, so ReLU kinks stay out of reach of the step."""
    x = rng.standard_normal(shape)
    return np.sign(x) * (margin + np.abs(x))


def _primitive_checks(rng: np.random.Generator) -> List[Check]:
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    row = rng.standard_normal((1, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    m = rng.standard_normal((4, 2))
    frames = rng.standard_normal((7, 3))
    lengths = [3, 4]
    w = {name: rng.standard_normal(shape) for name, shape in {
        "same": (3, 4), "row": (3, 4), "mm": (3, 2), "t": (4, 3), "rs": (2, 6), "cat": (6, 4),
        "rows": (2, 4), "pick": (3,), "seg": (2, 3), "norm": (3, 1), "pair": (3, 3),
    }.items()}

    def wsum(node: G.Node, key: str) -> G.Node:
        return G.sum_all(G.mul(node, w[key]))

    return [
        ("add", lambda p: wsum(G.add(p["a"], p["b"]), "same"), {"a": a, "b": b}),
        ("sub", lambda p: wsum(G.sub(p["a"], p["b"]), "same"), {"a": a, "b": b}),
        ("mul", lambda p: wsum(G.mul(p["a"], p["b"]), "same"), {"a": a, "b": b}),
        ("bmul", lambda p: wsum(G.bmul(p["a"], p["r"]), "row"), {"a": a, "r": row}),
        ("div", lambda p: wsum(G.div(p["a"], p["c"]), "same"), {"a": a, "c": pos}),
        ("relu", lambda p: wsum(G.relu(p["a"]), "same"), {"a": _away_from_zero(rng, (3, 4))}),
        ("sqrt", lambda p: wsum(G.sqrt(p["c"]), "same"), {"c": pos}),
        ("log", lambda p: wsum(G.log(p["c"]), "same"), {"c": pos}),
        ("exp", lambda p: wsum(G.exp(p["a"]), "same"), {"a": a}),
        ("matmul", lambda p: wsum(G.matmul(p["a"], p["m"]), "mm"), {"a": a, "m": m}),
        ("transpose", lambda p: wsum(G.transpose(p["a"]), "t"), {"a": a}),
        ("reshape", lambda p: wsum(G.reshape(p["a"], (2, 6)), "rs"), {"a": a}),
        ("concat", lambda p: wsum(G.concat([p["a"], p["b"]], axis=0), "cat"), {"a": a, "b": b}),
        ("take_rows", lambda p: wsum(G.take_rows(p["a"], [2, 0]), "rows"), {"a": a}),
        ("pick", lambda p: wsum(G.pick(p["a"], [1, 3, 0]), "pick"), {"a": a}),
        ("time_mean", lambda p: wsum(G.time_mean(p["x"], lengths), "seg"), {"x": frames}),
        ("time_var", lambda p: wsum(G.time_var(p["x"], lengths), "seg"), {"x": frames}),
        ("l2_norm", lambda p: wsum(G.l2_norm(p["a"]), "norm"), {"a": a}),
        ("softmax", lambda p: wsum(G.softmax(p["a"]), "same"), {"a": a}),
        ("log_softmax", lambda p: wsum(G.log_softmax(p["a"]), "same"), {"a": a}),
        ("sq_euclidean", lambda p: wsum(G.sq_euclidean(p["a"], p["b"]), "pair"), {"a": a, "b": b}),
        ("normalize_rows", lambda p: wsum(G.normalize_rows(p["a"]), "same"), {"a": a}),
        ("cosine_similarity", lambda p: wsum(G.cosine_similarity(p["a"], p["b"]), "pair"), {"a": a, "b": b}),
    ]


def _loss_checks(rng: np.random.Generator) -> List[Check]:
    n = int(rng.integers(2, 5))
    k_s = int(rng.integers(1, 4))
    k_q = int(rng.integers(1, 4))
    dim = int(rng.integers(2, 9))
    n_classes = n + 2
    s_sizes, q_sizes = [k_s] * n, [k_q] * n
    support = rng.standard_normal((n * k_s, dim))
    queries = rng.standard_normal((n * k_q, dim))
    augmented = support + 0.1 * rng.standard_normal(support.shape)
    logits = rng.standard_normal((n * k_q, n_classes))
    labels = rng.integers(0, n_classes, size=n * k_q)
    lam = float(rng.uniform(0.1, 1.0))

    def pn(p, metric="sqeuclidean"):
        return L.pn_loss(L.normalize(p["s"]), s_sizes, L.normalize(p["q"]), q_sizes, metric)

    def contra(p):
        return L.contrastive_loss(L.normalize(p["s"]), L.normalize(p["a"]), s_sizes)

    episode = {"s": support, "q": queries}
    full = {"s": support, "q": queries, "a": augmented, "z": logits}
    return [
        ("pn_loss", pn, episode),
        ("pn_loss[cosine]", lambda p: pn(p, "cosine"), episode),
        ("pn_loss[raw]", lambda p: L.pn_loss(p["s"], s_sizes, p["q"], q_sizes), episode),
        ("ce_loss", lambda p: L.ce_loss(p["z"], labels), {"z": logits}),
        ("contrastive_loss", contra, {"s": support, "a": augmented}),
        ("combined_cp", lambda p: L.combined_cp(L.ce_loss(p["z"], labels), pn(p), lam), full),
        ("combined_cpc", lambda p: L.combined_cpc(L.ce_loss(p["z"], labels), pn(p), contra(p), lam), full),
    ]


def _frame_activations(xs: Sequence[np.ndarray], theta: Mapping[str, np.ndarray], coeffs) -> List[np.ndarray]:
    """Pre-activations of the single frame layer, one array per utterance."""
    W, b = theta["frame0.W"], theta["frame0.b"]
    if coeffs is not None:
        W, b = W * coeffs["frame0.S1"], b + coeffs["frame0.S2"]
    return [x @ W + b for x in xs]


def _clear_of_kinks(
    xs: Sequence[np.ndarray],
    theta: Mapping[str, np.ndarray],
    coeffs: Mapping[str, np.ndarray],
) -> bool:
    """
    Every ReLU input at least KINK_MARGIN from zero, every frame unit active in
    two or more frames of each utterance with a spread of MIN_FRAME_STD, on
    both forward paths.
    """
    for c in (None, coeffs):
        for pre in _frame_activations(xs, theta, c):
            if np.abs(pre).min() < KINK_MARGIN:
                return False
            h = np.maximum(pre, 0.0)
            if (h > 0).sum(axis=0).min() < 2 or h.std(axis=0).min() < MIN_FRAME_STD:
                return False

    # head path of the classifier check: relu(fc1) and relu(fc2)
    pooled = []
    for pre in _frame_activations(xs, theta, None):
        h = np.maximum(pre, 0.0)
        pooled.append(np.concatenate([h.mean(axis=0), np.sqrt(h.var(axis=0) + G.VAR_EPS)]))
    emb = np.stack(pooled) @ theta["fc1.W"] + theta["fc1.b"]
    fc2 = np.maximum(emb, 0.0) @ theta["fc2.W"] + theta["fc2.b"]
    return bool(np.abs(emb).min() >= KINK_MARGIN and np.abs(fc2).min() >= KINK_MARGIN)


def network_inputs(
    rng: np.random.Generator,
    dims: NetworkDims,
    theta: Mapping[str, np.ndarray],
    coeffs: Mapping[str, np.ndarray],
    n_utterances: int = 3,
) -> List[np.ndarray]:
    """Random utterances redrawn until _clear_of_kinks holds."""
    if len(dims.frame_dims) != 1:
        raise ValueError(f"network checks use one frame layer, got {dims.frame_dims}")
    for _ in range(MAX_DRAWS):
        xs = [rng.standard_normal((int(rng.integers(6, 10)), dims.input_dim)) for _ in range(n_utterances)]
        if _clear_of_kinks(xs, theta, coeffs):
            return xs
    raise RuntimeError(f"no kink-free network inputs after {MAX_DRAWS} draws")


def _network_checks(rng: np.random.Generator) -> List[Check]:
    dims = NetworkDims(input_dim=3, frame_dims=(4,), embed_dim=3, fc2_dim=3, num_classes=4)
    theta = init_params(dims, rng).tensors
    coeffs = TransformCoeffs.near_identity(dims, rng, noise=0.2).tensors
    xs = network_inputs(rng, dims, theta, coeffs)
    labels = rng.integers(0, dims.num_classes, size=len(xs))
    w = rng.standard_normal((len(xs), dims.embed_dim))

    def theta_of(p):
        return {k: p[k] for k in theta}

    def coeffs_of(p):
        return {k: p[k] for k in coeffs}

    return [
        ("embed", lambda p: G.sum_all(G.mul(extractor_graph(xs, p, dims), w)), theta),
        (
            "embed_transformed",
            lambda p: G.sum_all(G.mul(extractor_graph(xs, theta_of(p), dims, coeffs_of(p)), w)),
            {**theta, **coeffs},
        ),
        (
            "classifier",
            lambda p: L.ce_loss(head_graph(extractor_graph(xs, p, dims), p), labels),
            theta,
        ),
    ]


# -------------------------
# Runner
# -------------------------
def suite_checks(seed: int) -> Iterable[Check]:
    rng = np.random.default_rng(seed)
    for group in (_primitive_checks, _loss_checks, _network_checks):
        for name, f, params in group(rng):
            yield f"{name}/seed{seed}", f, params


def run_suite(
    seeds: Iterable[int] = DEFAULT_SEEDS,
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradSuiteResult:
    started = time.perf_counter()
    result = GradSuiteResult(tolerance=tolerance)
    for seed in seeds:
        for name, f, params in suite_checks(seed):
            report = G.finite_difference_check(f, params, step=step, tolerance=tolerance, name=name)
            result.reports.append(report)
            if not report.passed:
                logger.warning(f"gradient check {name} failed: max relative error {report.worst:.3g}")
    result.wall_time = time.perf_counter() - started
    logger.info(
        f"Gradient suite: {len(result.reports) - len(result.failures)}/{len(result.reports)} checks passed "
        f"in {result.wall_time:.1f}s"
    )
    return result
