"""Gating network, routing distributions and batch-level routing statistics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DomainError, RoutingError, StatisticsError
from .numerics import Tensor

MODES = ("hard", "soft", "topk")
DEFAULT_TOP_K = 3
SIMPLEX_TOL = 1e-9


@dataclass
class Router:
    gate_weight: Tensor  # (E, d_in)
    top_k: int = DEFAULT_TOP_K
    renormalize_topk: bool = False
    mode: str = "soft"

    def __post_init__(self):
        if self.gate_weight.ndim != 2:
            raise ConfigurationError(f"gate weight must be 2-D, got shape {self.gate_weight.shape}")
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown routing mode {self.mode!r}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigurationError(f"top_k={self.top_k} must lie in [1, {self.num_experts}]")

    @property
    def num_experts(self) -> int:
        return self.gate_weight.shape[0]

    @property
    def d_in(self) -> int:
        return self.gate_weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.gate_weight]


def init_router(num_experts: int, d_in: int, seed: int, top_k: int = DEFAULT_TOP_K,
                renormalize_topk: bool = False, mode: str = "soft", std: float = 0.01) -> Router:
    if num_experts < 1:
        raise ConfigurationError("a router needs at least one expert")
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, std, size=(num_experts, d_in)).astype(nx.get_default_dtype())
    return Router(Tensor(w, requires_grad=True), top_k=min(top_k, num_experts),
                  renormalize_topk=renormalize_topk, mode=mode)


@dataclass
class RoutingDistribution:
    logits: Tensor          # (batch, E)
    probs: Tensor           # (batch, E)
    selected: np.ndarray    # (batch, k) expert indices, best first
    weights: Tensor         # (batch, E), zero outside `selected`
    mode: str
    top_k: int

    @property
    def num_experts(self) -> int:
        return self.probs.shape[-1]

    @property
    def token_count(self) -> int:
        return self.probs.shape[0]

    def selection_mask(self) -> np.ndarray:
        mask = np.zeros(self.probs.shape, dtype=bool)
        np.put_along_axis(mask, self.selected, True, axis=1)
        return mask


def argmax_tiebreak(row) -> int:
    """Index of the largest entry; ties go to the lowest index."""
    row = np.asarray(row)
    if row.size == 0:
        raise DomainError("argmax of an empty row")
    return int(np.argmax(row))


def topk_indices(probs: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k largest entries, best first, lowest index on ties."""
    order = np.argsort(-probs, axis=-1, kind="stable")
    return order[..., :k]


def route(router: Router, x: Tensor, domain_id=None, mode: str | None = None,
          top_k: int | None = None) -> RoutingDistribution:
    """Route every row of ``x`` according to ``mode`` (defaults to the router's own).

    ``top_k`` overrides the router's inference K for this call only.
    """
    mode = mode or router.mode
    top_k = router.top_k if top_k is None else int(top_k)
    if not 1 <= top_k <= router.num_experts:
        raise ConfigurationError(f"top_k={top_k} must lie in [1, {router.num_experts}]")
    if mode not in MODES:
        raise ConfigurationError(f"unknown routing mode {mode!r}")
    x = nx.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != router.d_in:
        raise RoutingError(f"router expects (batch, {router.d_in}) input, got {x.shape}")
    n, num_e = x.shape[0], router.num_experts

    if mode == "hard":
        if domain_id is None:
            raise RoutingError("hard routing requires a domain_id")
        dom = np.broadcast_to(np.asarray(domain_id, dtype=np.intp), (n,))
        if np.any(dom < 0) or np.any(dom >= num_e):
            raise IndexError(f"domain_id outside [0, {num_e})")
        with nx.no_grad():  # logged, never differentiated
            logits = nx.linear(x, router.gate_weight)
            probs = nx.softmax(logits)
        onehot = np.zeros((n, num_e), dtype=x.dtype)
        onehot[np.arange(n), dom] = 1.0
        return RoutingDistribution(logits, probs, dom.reshape(n, 1).copy(), Tensor(onehot), mode, 1)

    logits = nx.linear(x, router.gate_weight)
    probs = nx.softmax(logits)
    if mode == "soft":
        selected = np.broadcast_to(np.arange(num_e), (n, num_e)).copy()
        return RoutingDistribution(logits, probs, selected, probs, mode, top_k)

    selected = topk_indices(probs.data, top_k)
    mask = np.zeros((n, num_e), dtype=x.dtype)
    np.put_along_axis(mask, selected, 1.0, axis=1)
    weights = probs * mask
    if router.renormalize_topk:
        weights = weights / nx.tsum(weights, axis=-1, keepdims=True)
    return RoutingDistribution(logits, probs, selected, weights, mode, top_k)


# ---------------------------------------------------------------------------
# entropy
# ---------------------------------------------------------------------------

def _check_simplex(p: np.ndarray) -> None:
    if np.any(p < -SIMPLEX_TOL):
        raise DomainError("probability row has a negative entry")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise DomainError("probability row does not sum to 1")


def entropy(probs_row) -> float:
    """-sum p log p with 0 log 0 = 0."""
    p = np.asarray(probs_row, dtype=np.float64)
    _check_simplex(p)
    p = np.clip(p, 0.0, None)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(max(0.0, -terms.sum()))


def entropy_grad_unconstrained(probs_row) -> np.ndarray:
    """Coordinate-wise derivative of -sum p log p, ignoring the simplex: -log p_i - 1."""
    p = np.asarray(probs_row, dtype=np.float64)
    if np.any(p <= 0):
        raise DomainError("entropy gradient needs strictly positive probabilities")
    return -np.log(p) - 1.0


def token_entropy(dist: RoutingDistribution) -> Tensor:
    """Differentiable per-token entropy, computed from logits for stability."""
    logp = nx.log_softmax(dist.logits)
    return -nx.tsum(dist.probs * logp, axis=-1)


# ---------------------------------------------------------------------------
# batch statistics
# ---------------------------------------------------------------------------

@dataclass
class RoutingBatchStats:
    p_bar: Tensor            # (E,), differentiable through the token probabilities
    f_bar: np.ndarray        # (E,), a batch constant
    mean_entropy: Tensor     # scalar, differentiable
    routing_variance: float
    token_count: int
    assignment_mode: str = "top1"
    extras: dict = field(default_factory=dict)

    @property
    def num_experts(self) -> int:
        return self.f_bar.shape[0]

    def as_dict(self) -> dict:
        return {
            "p_bar": self.p_bar.data.tolist(),
            "f_bar": self.f_bar.tolist(),
            "mean_entropy": float(self.mean_entropy.data),
            "routing_variance": float(self.routing_variance),
            "token_count": int(self.token_count),
        }


def assignment_frequency(probs: np.ndarray, mode: str = "top1", k: int = 1) -> np.ndarray:
    """Normalised per-expert assignment counts (top-1 argmax or top-k membership)."""
    n, num_e = probs.shape
    if mode == "top1":
        picks = topk_indices(probs, 1).reshape(-1)
        counts = np.bincount(picks, minlength=num_e).astype(np.float64)
        return counts / n
    if mode == "topk":
        picks = topk_indices(probs, k).reshape(-1)
        counts = np.bincount(picks, minlength=num_e).astype(np.float64)
        return counts / (n * k)
    raise ConfigurationError(f"unknown assignment mode {mode!r}")


def batch_stats(dist: RoutingDistribution, assignment_mode: str = "top1", k: int | None = None) -> RoutingBatchStats:
    """Aggregate a routed batch; ``k`` (top-k assignment only) defaults to the distribution's K."""
    n = dist.token_count
    if n == 0:
        raise StatisticsError("cannot compute routing statistics of an empty batch")
    p_bar = nx.mean(dist.probs, axis=0)
    f_bar = assignment_frequency(dist.probs.data, assignment_mode, dist.top_k if k is None else k)
    mean_h = nx.mean(token_entropy(dist))
    # shifted by the first row: exact zero for identical rows, stable otherwise
    diff = dist.probs.data - dist.probs.data[0]
    centre = diff.mean(axis=0)
    variance = max(0.0, float(np.mean(np.sum(diff * diff, axis=-1)) - np.dot(centre, centre)))
    return RoutingBatchStats(p_bar, f_bar, mean_h, variance, n, assignment_mode)


def stats_from_logits(logits, assignment_mode: str = "top1", k: int = 1) -> RoutingBatchStats:
    """Statistics for a bare logit table, bypassing any router."""
    logits = nx.as_tensor(logits)
    probs = nx.softmax(logits)
    dist = RoutingDistribution(logits, probs, topk_indices(probs.data, k), probs, "soft", k)
    return batch_stats(dist, assignment_mode)


def merge_stats(parts: Sequence[RoutingBatchStats]) -> RoutingBatchStats:
    """Token-count-weighted combination of detached per-shard statistics."""
    parts = list(parts)
    if not parts:
        raise StatisticsError("nothing to merge")
    total = sum(s.token_count for s in parts)
    if total == 0:
        raise StatisticsError("cannot merge empty shards")
    w = [s.token_count / total for s in parts]
    p_bar = sum(wi * s.p_bar.data for wi, s in zip(w, parts))
    f_bar = sum(wi * s.f_bar for wi, s in zip(w, parts))
    mean_h = sum(wi * float(s.mean_entropy.data) for wi, s in zip(w, parts))
    # law of total variance over shards
    variance = sum(
        wi * (s.routing_variance + float(np.sum((s.p_bar.data - p_bar) ** 2)))
        for wi, s in zip(w, parts)
    )
    return RoutingBatchStats(Tensor(p_bar), np.asarray(f_bar), Tensor(mean_h), variance, total,
                             parts[0].assignment_mode)


def max_entropy(num_experts: int) -> float:
    return math.log(num_experts)
