"""Two-phase training: experts under hard routing, then routers under soft fusion.

Phase 1 sends every token to the expert of its sample's domain and trains
on the task loss alone. Phase 2 snapshots the experts as a preservation
anchor and trains the routers (optionally the experts too, tethered to the
anchor) on task + balance + preservation. Evaluation uses sparse top-K
routing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import numerics as nx
from .errors import AnchorError, ConfigurationError, DivergenceError, EvaluationError, NonFiniteError, RoutingError
from .losses import (
    LossReport,
    LossWeights,
    PreservationAnchor,
    aux_loss,
    preservation_loss,
    rsl_loss,
    task_loss,
    total_loss,
)
from .mixer import MixerLayer
from .numerics import Tensor
from .routing import DEFAULT_TOP_K, RoutingBatchStats, batch_stats, merge_stats
from .workbench import Batch, LabeledSample, by_domain, iter_batches, mixed_stream

PHASES = ("expert_phase", "router_phase")
TRAINABLE_SETS = ("experts_only", "router_only", "router_plus_constrained_experts")
RSL_AGGREGATION = ("sum", "mean")


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay. Parameters without a gradient are skipped entirely."""

    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        if lr < 0 or not math.isfinite(lr):
            raise ConfigurationError(f"learning rate must be finite and nonnegative, got {lr}")
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = float(lr), tuple(betas), float(eps), float(weight_decay)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = [0] * len(self.params)

    def step(self) -> None:
        b1, b2 = self.betas
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.t[i] += 1
            t = self.t[i]
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1 ** t)
            v_hat = self.v[i] / (1 - b2 ** t)
            p.data = p.data * (1 - self.lr * self.weight_decay) - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v], "t": list(self.t)}


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    params = [p for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if not math.isfinite(norm):
        raise NonFiniteError("gradient norm is not finite")
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return norm


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------

@dataclass
class PhaseConfig:
    phase: str = "expert_phase"
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 1e-5
    expert_learning_rate: float | None = None  # phase 2 only; defaults to learning_rate
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0
    trainable_set: str | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    constrained: list | None = None  # (layer, expert_id) pairs; None means every trainable expert
    rsl_aggregation: str = "sum"
    assignment_mode: str = "top1"
    top_k_eval: int = DEFAULT_TOP_K
    proportions: list[float] | None = None
    schedule: str = "per_domain"  # phase 1 with a sample list: each expert on its own domain, or one mixed stream
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigurationError(f"phase must be one of {PHASES}")
        if self.trainable_set is None:
            self.trainable_set = "experts_only" if self.phase == "expert_phase" else "router_plus_constrained_experts"
        if self.trainable_set not in TRAINABLE_SETS:
            raise ConfigurationError(f"trainable_set must be one of {TRAINABLE_SETS}")
        if self.phase == "expert_phase" and self.trainable_set != "experts_only":
            raise ConfigurationError("the expert phase trains experts only")
        if self.phase == "router_phase" and self.trainable_set == "experts_only":
            raise ConfigurationError("the router phase must train the router")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")
        if self.schedule not in ("per_domain", "mixed"):
            raise ConfigurationError("schedule must be 'per_domain' or 'mixed'")
        if self.rsl_aggregation not in RSL_AGGREGATION:
            raise ConfigurationError(f"rsl_aggregation must be one of {RSL_AGGREGATION}")
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.betas = tuple(self.betas)

    @property
    def routing_mode(self) -> str:
        return "hard" if self.phase == "expert_phase" else "soft"

    @property
    def trains_experts(self) -> bool:
        return self.trainable_set in ("experts_only", "router_plus_constrained_experts")

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["loss_weights"] = dict(self.loss_weights.__dict__)
        out["betas"] = list(self.betas)
        out["constrained"] = None if self.constrained is None else [list(c) for c in self.constrained]
        return out


@dataclass
class TrainState:
    step: int = 0
    optimizers: dict = field(default_factory=dict)
    anchor: PreservationAnchor | None = None
    rng: np.random.Generator | None = None
    best_val: tuple[int, float] | None = None  # (step, pooled val accuracy)


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]
    val: "EvalReport | None" = None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def mixer_layers(model) -> list[MixerLayer]:
    layers = model.mixer_layers()
    if not layers:
        raise ConfigurationError("model has no mixer layers; attach experts first")
    return layers


def expert_map(model) -> dict:
    return {(layer.name, e.expert_id): e for layer in mixer_layers(model) for e in layer.experts}


def router_parameters(model) -> list[Tensor]:
    seen, out = set(), []
    for layer in mixer_layers(model):
        for p in layer.router.parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
    return out


def _batches(stream, cfg: PhaseConfig) -> Iterator[Batch]:
    if isinstance(stream, (list, tuple)):
        if not stream:
            raise EvaluationError("cannot train on an empty split")
        if isinstance(stream[0], LabeledSample):
            return mixed_stream(stream, cfg.proportions, cfg.seed, cfg.batch_size)
        return iter(stream)
    return iter(stream)


def _set_requires_grad(params: Iterable[Tensor], flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
        p.grad = None


def _next_batch(it: Iterator[Batch], step: int) -> Batch:
    try:
        return next(it)
    except StopIteration:
        raise EvaluationError(f"stream exhausted at step {step}") from None


# ---------------------------------------------------------------------------
# phase 1
# ---------------------------------------------------------------------------

def _expert_streams(stream, cfg: PhaseConfig):
    """(batch iterator, step count) pairs; ``per_domain`` gives every domain its own full budget."""
    if cfg.steps == 0:
        return []
    is_samples = isinstance(stream, (list, tuple)) and stream and isinstance(stream[0], LabeledSample)
    if not (is_samples and cfg.schedule == "per_domain"):
        return [(_batches(stream, cfg), cfg.steps)]
    return [(mixed_stream(group, None, cfg.seed + 7919 * (d + 1), cfg.batch_size), cfg.steps)
            for d, group in by_domain(stream).items()]

def train_experts(model, stream, cfg: PhaseConfig, state: TrainState | None = None,
                  val: Sequence[LabeledSample] | None = None) -> TrainResult:
    """Hard-routed expert training on the task loss; routers and base stay fixed.

    With ``val`` the result carries oracle-routed per-domain accuracy.
    """
    if cfg.phase != "expert_phase":
        raise ConfigurationError("train_experts needs an expert_phase config")
    layers = mixer_layers(model)
    num_e = layers[0].num_experts
    experts = [e for layer in layers for e in layer.experts]
    params = [p for e in experts for p in e.parameters()]
    _set_requires_grad(router_parameters(model), False)
    _set_requires_grad(params, True)

    state = state or TrainState()
    state.rng = state.rng or np.random.default_rng([cfg.seed, 1])
    opt = state.optimizers.get("experts") or AdamW(params, cfg.learning_rate, cfg.betas, cfg.eps, cfg.weight_decay)
    state.optimizers["experts"] = opt
    log = []
    for it, steps in _expert_streams(stream, cfg):
        for _ in range(steps):
            batch = _next_batch(it, state.step)
            if batch.domain_ids.min() < 0 or batch.domain_ids.max() >= num_e:
                raise RoutingError(f"batch holds domain ids outside [0, {num_e})")
            opt.zero_grad()
            try:
                logits, _ = model.forward(batch.tokens, batch.domain_ids, mode="hard", training=True, rng=state.rng)
                loss = task_loss(logits, batch.labels)
            except NonFiniteError as exc:
                raise DivergenceError(f"non-finite loss at step {state.step}: {exc}", state.step) from exc
            loss.backward()
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            log.append({"step": state.step, "domain": int(batch.domain_ids[0]) if cfg.schedule == "per_domain"
                        else None, "task": float(loss.data), "total": float(loss.data)})
            state.step += 1
    _set_requires_grad(params, False)
    result = TrainResult(state, log)
    if val is not None:
        result.val = evaluate(model, val, oracle_domain=True)
    return result


# ---------------------------------------------------------------------------
# phase 2
# ---------------------------------------------------------------------------

def router_objective(model, batch: Batch, cfg: PhaseConfig, anchor: PreservationAnchor | None,
                     rng: np.random.Generator | None = None, training: bool = True) -> tuple[Tensor, LossReport]:
    """Task + aggregated per-layer balance loss + preservation, on one soft-routed batch."""
    w = cfg.loss_weights
    logits, routing = model.forward(batch.tokens, batch.domain_ids, mode="soft", training=training, rng=rng)
    task = task_loss(logits, batch.labels)
    layer_stats: dict[str, RoutingBatchStats] = {}
    rsl_terms, aux_terms = [], []
    for name, dist in routing.items():
        stats = batch_stats(dist, cfg.assignment_mode, k=1 if cfg.assignment_mode == "top1" else cfg.top_k_eval)
        layer_stats[name] = stats
        rsl_terms.append(rsl_loss(stats, w))
        aux_terms.append(float(aux_loss(stats, w.alpha).data))
    rsl = rsl_terms[0]
    for t in rsl_terms[1:]:
        rsl = rsl + t
    aux = float(np.sum(aux_terms))
    if cfg.rsl_aggregation == "mean":
        rsl = rsl * (1.0 / len(rsl_terms))
        aux /= len(rsl_terms)
    if cfg.trains_experts and anchor is not None and anchor.constrained_set:
        preserve = preservation_loss(expert_map(model), anchor, w.beta)
    else:
        preserve = Tensor(0.0)
    total = total_loss(task, rsl, preserve, w)
    report = LossReport(float(task.data), float(rsl.data), aux, float(preserve.data), float(total.data),
                        w.outer_rsl_weight, layer_stats)
    return total, report


def train_router(model, stream, cfg: PhaseConfig, anchor: PreservationAnchor | None = None,
                 state: TrainState | None = None, val: Sequence[LabeledSample] | None = None) -> TrainResult:
    """Soft-fusion router training; constrained experts may drift under the preservation penalty."""
    if cfg.phase != "router_phase":
        raise ConfigurationError("train_router needs a router_phase config")
    layers = mixer_layers(model)
    experts = expert_map(model)
    state = state or TrainState()
    anchor = anchor or state.anchor
    if cfg.trains_experts:
        if anchor is None:
            raise AnchorError("expert training in the router phase needs a preservation anchor")
        constrained = anchor.constrained_set if cfg.constrained is None else frozenset(
            (str(k[0]), int(k[1])) for k in cfg.constrained)
        missing = constrained - set(anchor.anchored)
        if missing:
            raise AnchorError(f"no anchor for constrained experts {sorted(missing)}")
        anchor = PreservationAnchor(anchor.anchored, frozenset(constrained))
    elif anchor is None:
        anchor = PreservationAnchor.snapshot(experts, constrained=())
    state.anchor = anchor

    r_params = router_parameters(model)
    e_params = [p for key in sorted(anchor.constrained_set) for p in experts[key].parameters()] \
        if cfg.trains_experts else []
    all_expert_params = [p for layer in layers for p in layer.expert_parameters()]
    _set_requires_grad(all_expert_params, False)
    _set_requires_grad(r_params, True)
    _set_requires_grad(e_params, True)

    state.rng = state.rng or np.random.default_rng([cfg.seed, 2])
    if "router" not in state.optimizers:
        state.optimizers["router"] = AdamW(r_params, cfg.learning_rate, cfg.betas, cfg.eps, cfg.weight_decay)
    if e_params and "constrained_experts" not in state.optimizers:
        lr = cfg.learning_rate if cfg.expert_learning_rate is None else cfg.expert_learning_rate
        state.optimizers["constrained_experts"] = AdamW(e_params, lr, cfg.betas, cfg.eps, cfg.weight_decay)
    opts = [state.optimizers["router"]] + ([state.optimizers["constrained_experts"]] if e_params else [])

    it = _batches(stream, cfg) if cfg.steps else iter(())
    log = []
    for i in range(cfg.steps):
        batch = _next_batch(it, state.step)
        for opt in opts:
            opt.zero_grad()
        try:
            total, report = router_objective(model, batch, cfg, anchor, state.rng)
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite loss at step {state.step}: {exc}", state.step) from exc
        total.backward()
        # clipped per group so a stiff preservation gradient cannot starve the router
        clip_grad_norm(r_params, cfg.clip_norm)
        if e_params:
            clip_grad_norm(e_params, cfg.clip_norm)
        for opt in opts:
            opt.step()
        log.append(report.to_record(state.step))
        state.step += 1
        if val is not None and cfg.eval_every and (i + 1) % cfg.eval_every == 0:
            acc = evaluate(model, val, cfg.top_k_eval).pooled_accuracy
            if state.best_val is None or acc > state.best_val[1]:
                state.best_val = (state.step, acc)
    _set_requires_grad(r_params + e_params, False)
    result = TrainResult(state, log)
    if val is not None:
        result.val = evaluate(model, val, cfg.top_k_eval)
    return result


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: dict[int, float]
    pooled_accuracy: float
    gate_weight: dict[int, list[float]]  # domain -> mean routing probability per expert (layer average)
    layer_stats: dict[str, RoutingBatchStats]
    count: dict[int, int]

    def matched_domains(self) -> int:
        """Domains whose own expert carries the highest mean gate weight."""
        return sum(int(np.argmax(w)) == d for d, w in self.gate_weight.items())

    def to_dict(self) -> dict:
        return {
            "accuracy": {str(d): a for d, a in self.accuracy.items()},
            "pooled_accuracy": self.pooled_accuracy,
            "count": {str(d): c for d, c in self.count.items()},
            "gate_weight": {str(d): w for d, w in self.gate_weight.items()},
            "layers": {name: s.as_dict() for name, s in self.layer_stats.items()},
        }


def evaluate(model, samples: Sequence[LabeledSample], top_k: int | None = DEFAULT_TOP_K,
             expert: int | None = None, batch_size: int = 256, oracle_domain: bool = False) -> EvalReport:
    """Accuracy per domain and pooled, plus routing statistics.

    ``top_k=None`` evaluates with soft fusion. ``expert`` forces every token
    onto one expert; ``oracle_domain`` routes each sample to its own domain's
    expert (the phase-1 setting). Routing statistics use top-K assignment
    (K = number of active experts per token).
    """
    samples = list(samples)
    if not samples:
        raise EvaluationError("cannot evaluate an empty split")
    if expert is not None and oracle_domain:
        raise ConfigurationError("choose either a forced expert or oracle routing")
    layers = model.mixer_layers()
    num_e = layers[0].num_experts if layers else 1
    if expert is not None or oracle_domain:
        mode, k = "hard", 1
    elif top_k is None:
        mode, k = "soft", num_e
    else:
        if not 1 <= top_k <= num_e:
            raise ConfigurationError(f"top_k={top_k} must lie in [1, {num_e}]")
        mode, k = "topk", int(top_k)

    correct: dict[int, int] = {}
    count: dict[int, int] = {}
    gate_sum: dict[int, np.ndarray] = {}
    shards: dict[str, list[RoutingBatchStats]] = {}
    with nx.no_grad():
        for batch in iter_batches(samples, batch_size):
            if expert is not None:
                route_ids = np.full(len(batch), expert)
            elif oracle_domain:
                route_ids = batch.domain_ids
            else:
                route_ids = None
            logits, routing = model.forward(batch.tokens, route_ids, mode=mode if layers else None,
                                            top_k=k if mode == "topk" else None)
            pred = np.argmax(logits.data, axis=-1)
            t = batch.tokens.shape[1]
            for d in np.unique(batch.domain_ids):
                sel = batch.domain_ids == d
                correct[int(d)] = correct.get(int(d), 0) + int(np.sum(pred[sel] == batch.labels[sel]))
                count[int(d)] = count.get(int(d), 0) + int(sel.sum())
            for name, dist in routing.items():
                shards.setdefault(name, []).append(batch_stats(dist, "topk", k=k))
                probs = dist.probs.data.reshape(len(batch), t, -1).mean(axis=1)
                for d in np.unique(batch.domain_ids):
                    sel = batch.domain_ids == d
                    acc = gate_sum.setdefault(int(d), np.zeros(probs.shape[1]))
                    acc += probs[sel].sum(axis=0) / len(routing)
    domains = sorted(count)
    accuracy = {d: correct[d] / count[d] for d in domains}
    pooled = sum(correct.values()) / sum(count.values())
    gate = {d: (gate_sum[d] / count[d]).tolist() for d in domains if d in gate_sum}
    layer_stats = {name: merge_stats(parts) for name, parts in shards.items()}
    return EvalReport(accuracy, pooled, gate, layer_stats, {d: count[d] for d in domains})


def single_expert_accuracies(model, samples: Sequence[LabeledSample]) -> list[float]:
    """Pooled accuracy with every token forced onto each expert in turn."""
    num_e = mixer_layers(model)[0].num_experts
    return [evaluate(model, samples, expert=e).pooled_accuracy for e in range(num_e)]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "loramixer-checkpoint"


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    """Every array of ``model`` (frozen base, head, experts, routers) plus the structure to rebuild it."""
    from .adapters import write_tensor_dir

    tensors = {f"frozen.{k}": v for k, v in model.frozen_arrays().items()}
    layers, router_ids = {}, {}
    for layer in model.mixer_layers():
        rid = router_ids.setdefault(id(layer.router), len(router_ids))
        tensors[f"router.{rid}"] = layer.router.gate_weight.data
        for e in layer.experts:
            tensors[f"expert.{layer.name}.{e.expert_id}.A"] = e.A.data
            tensors[f"expert.{layer.name}.{e.expert_id}.B"] = e.B.data
        layers[layer.name] = {
            "router": rid,
            "top_k": layer.router.top_k,
            "renormalize_topk": layer.router.renormalize_topk,
            "mode": layer.router.mode,
            "experts": [{"lora_alpha": e.lora_alpha, "dropout_p": e.dropout_p} for e in layer.experts],
        }
    from . import __version__

    manifest = {"format": CHECKPOINT_FORMAT, "engine_version": __version__,
                "model_config": model.cfg.to_dict(), "mixers": layers, "meta": meta or {}}
    write_tensor_dir(path, manifest, tensors)


def load_checkpoint(path):
    """Rebuild the model saved by ``save_checkpoint``; returns ``(model, meta)``."""
    from .adapters import read_tensor_dir
    from .errors import FormatError
    from .lora import LoraExpert
    from .mixer import MixerLayer
    from .routing import Router
    from .workbench import ModelConfig, ToyModel

    doc, arrays = read_tensor_dir(path)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path} is not a checkpoint")
    model = ToyModel(ModelConfig(**doc["model_config"]))
    frozen = model.frozen_arrays()
    for key, arr in frozen.items():
        stored = arrays.get(f"frozen.{key}")
        if stored is None or stored.shape != arr.shape:
            raise FormatError(f"checkpoint lacks a matching frozen array {key}")
        arr[...] = stored
    routers: dict[int, Router] = {}
    for name, spec in doc["mixers"].items():
        rid = spec["router"]
        if rid not in routers:
            routers[rid] = Router(Tensor(arrays[f"router.{rid}"].copy()), top_k=spec["top_k"],
                                  renormalize_topk=spec["renormalize_topk"], mode=spec["mode"])
        experts = [LoraExpert(Tensor(arrays[f"expert.{name}.{i}.A"].copy()),
                              Tensor(arrays[f"expert.{name}.{i}.B"].copy()),
                              lora_alpha=e["lora_alpha"], dropout_p=e["dropout_p"], expert_id=i)
                   for i, e in enumerate(spec["experts"])]
        model.set_projection(name, MixerLayer(model.projection(name), experts, routers[rid]))
    return model, doc.get("meta", {})
