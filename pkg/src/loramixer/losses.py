"""Training objectives: task loss, balance losses, expert preservation and their total.

The balance-consistency term is ``alpha * sum_i p_bar_i * f_bar_i`` where
``f_bar`` is a batch constant (argmax counts carry no gradient). The entropy
term is applied with one of two signs:

* ``"penalty"`` (default): ``+ lam * mean H``; minimising it sharpens each
  token's routing, which is what produces specialised, high-variance routing.
* ``"bonus"``: ``- lam * mean H``, the algebraic form usually written down,
  whose minimisation flattens routing instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np

from . import numerics as nx
from .errors import AnchorError, ConfigurationError, LabelError, NonFiniteError
from .lora import LoraExpert
from .numerics import Tensor
from .routing import RoutingBatchStats

ENTROPY_MODES = ("penalty", "bonus")

ExpertKey = tuple[str, int]  # (layer name, expert id)


@dataclass
class LossWeights:
    alpha: float = 0.01
    lam: float = 0.001
    beta: float = 0.1
    outer_rsl_weight: float = 1.0
    entropy_mode: str = "penalty"

    def __post_init__(self):
        for name in ("alpha", "lam", "beta", "outer_rsl_weight"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"loss weight {name} must be finite and nonnegative, got {v}")
        if self.entropy_mode not in ENTROPY_MODES:
            raise ConfigurationError(f"entropy_mode must be one of {ENTROPY_MODES}")


def aux_loss(stats: RoutingBatchStats, alpha: float) -> Tensor:
    return nx.tsum(stats.p_bar * stats.f_bar) * float(alpha)


def rsl_loss(stats: RoutingBatchStats, w: LossWeights) -> Tensor:
    aux = aux_loss(stats, w.alpha)
    if w.lam == 0.0:
        return aux
    sign = 1.0 if w.entropy_mode == "penalty" else -1.0
    return aux + stats.mean_entropy * (sign * w.lam)


@dataclass(frozen=True)
class PreservationAnchor:
    anchored: Mapping[ExpertKey, tuple[np.ndarray, np.ndarray]]
    constrained_set: frozenset

    def __post_init__(self):
        missing = set(self.constrained_set) - set(self.anchored)
        if missing:
            raise AnchorError(f"constrained experts without an anchor: {sorted(missing)}")

    @classmethod
    def snapshot(cls, experts: Mapping[ExpertKey, LoraExpert], constrained=None) -> "PreservationAnchor":
        """Deep, read-only copies of every expert's (A, B)."""
        anchored = {}
        for key, e in experts.items():
            a, b = e.A.data.copy(), e.B.data.copy()
            a.setflags(write=False)
            b.setflags(write=False)
            anchored[key] = (a, b)
        keys = set(anchored) if constrained is None else set(constrained)
        return cls(MappingProxyType(anchored), frozenset(keys))


def preservation_loss(experts: Mapping[ExpertKey, LoraExpert], anchor: PreservationAnchor, beta: float) -> Tensor:
    """beta * sum over constrained experts of ||theta - theta0||^2 (A and B entries)."""
    terms = []
    for key in sorted(anchor.constrained_set):
        if key not in experts:
            raise AnchorError(f"constrained expert {key} is not present in the model")
        if key not in anchor.anchored:
            raise AnchorError(f"no anchor for constrained expert {key}")
        e = experts[key]
        a0, b0 = anchor.anchored[key]
        da = e.A - a0
        db = e.B - b0
        terms.append(nx.tsum(da * da) + nx.tsum(db * db))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * float(beta)


def expert_drift(experts: Mapping[ExpertKey, LoraExpert], anchor: PreservationAnchor) -> float:
    """L2 norm of the stacked deviation of all constrained experts from their anchors."""
    sq = 0.0
    for key in anchor.constrained_set:
        a0, b0 = anchor.anchored[key]
        e = experts[key]
        sq += float(np.sum((e.A.data - a0) ** 2) + np.sum((e.B.data - b0) ** 2))
    return math.sqrt(sq)


def task_loss(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy, log-sum-exp stabilised."""
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    return nx.cross_entropy(logits, labels)


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(task, rsl, preserve, w: LossWeights):
    for name, comp in (("task", task), ("rsl", rsl), ("preserve", preserve)):
        if not math.isfinite(_value(comp)):
            raise NonFiniteError(f"loss component {name} is not finite")
    return task + rsl * w.outer_rsl_weight + preserve


@dataclass
class LossReport:
    task: float
    rsl: float
    aux: float
    preserve: float
    total: float
    outer_rsl_weight: float = 1.0
    layer_stats: dict[str, RoutingBatchStats] = field(default_factory=dict)

    def recomputed_total(self) -> float:
        return self.task + self.outer_rsl_weight * self.rsl + self.preserve

    def to_record(self, step: int) -> dict:
        stats = list(self.layer_stats.values())
        mean_h = float(np.mean([float(s.mean_entropy.data) for s in stats])) if stats else 0.0
        var = float(np.mean([s.routing_variance for s in stats])) if stats else 0.0
        return {
            "step": int(step),
            "task": self.task,
            "rsl": self.rsl,
            "aux": self.aux,
            "preserve": self.preserve,
            "total": self.total,
            "mean_entropy": mean_h,
            "routing_variance": var,
        }
