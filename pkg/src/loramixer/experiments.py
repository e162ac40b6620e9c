"""Reproducible end-to-end studies on the workbench.

``WorkbenchPreset`` holds the settings every study shares; ``run_pipeline``
runs data generation, head calibration, both training phases and the
standard evaluations for one seed. ``equilibrium_run`` studies the balance
losses in isolation on a free table of routing logits.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .lora import LoraConfig
from .losses import LossWeights, PreservationAnchor, aux_loss, expert_drift, rsl_loss
from .mixer import RouterConfig, attach_mixers
from .numerics import Tensor
from .routing import stats_from_logits
from .training import (
    AdamW,
    EvalReport,
    PhaseConfig,
    TrainResult,
    evaluate,
    expert_map,
    single_expert_accuracies,
    train_experts,
    train_router,
)
from .workbench import ModelConfig, Splits, ToyModel, balanced_subset, calibrate_head, default_specs, generate_dataset


@dataclass
class WorkbenchPreset:
    """Settings tuned for minutes-scale CPU runs of the four-domain workbench."""

    n_per_domain: int = 1300
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraConfig = field(default_factory=lambda: LoraConfig(dropout_p=0.0))
    router: RouterConfig = field(default_factory=RouterConfig)
    expert_phase: PhaseConfig = field(default_factory=lambda: PhaseConfig(
        phase="expert_phase", steps=1500, learning_rate=3e-3))
    router_phase: PhaseConfig = field(default_factory=lambda: PhaseConfig(
        phase="router_phase", steps=1000, learning_rate=1e-2, expert_learning_rate=1e-5))
    head_steps: int = 1500

    def with_seed(self, seed: int) -> "WorkbenchPreset":
        p = copy.deepcopy(self)
        p.model = replace(p.model, seed=seed)
        p.router = replace(p.router, seed=seed)
        p.expert_phase.seed = seed
        p.router_phase.seed = seed
        return p

    def to_dict(self) -> dict:
        return {
            "n_per_domain": self.n_per_domain,
            "head_steps": self.head_steps,
            "model": self.model.to_dict(),
            "lora": {"r": self.lora.r, "lora_alpha": self.lora.lora_alpha, "dropout_p": self.lora.dropout_p,
                     "target_projection_names": list(self.lora.target_projection_names),
                     "init_scheme": self.lora.init_scheme},
            "router": dict(self.router.__dict__),
            "expert_phase": self.expert_phase.to_dict(),
            "router_phase": self.router_phase.to_dict(),
        }


def build_base(seed: int, preset: WorkbenchPreset | None = None, splits: Splits | None = None):
    """Data splits and a head-calibrated frozen model (no experts yet)."""
    preset = (preset or WorkbenchPreset()).with_seed(seed)
    specs = default_specs(seed, preset.model.vocab, preset.model.seq_len)
    splits = splits or generate_dataset(specs, preset.n_per_domain, seed)
    model = ToyModel(preset.model)
    calibrate_head(model, splits.train, steps=preset.head_steps, seed=seed)
    return model, splits


def build_phase1(seed: int, preset: WorkbenchPreset | None = None):
    """Base model with experts attached and trained under hard routing."""
    preset = (preset or WorkbenchPreset()).with_seed(seed)
    model, splits = build_base(seed, preset)
    base_val = evaluate(model, splits.val, None)
    attach_mixers(model, preset.lora, len(default_specs(seed)), preset.router, seed=seed)
    result = train_experts(model, splits.train, preset.expert_phase)
    return model, splits, base_val, result


@dataclass
class PipelineResult:
    seed: int
    model: ToyModel
    splits: Splits
    base_val: EvalReport
    base_test: EvalReport
    phase1_val: EvalReport        # oracle-routed, right after phase 1
    phase1_model: ToyModel        # deep copy taken at the phase transition
    anchor: PreservationAnchor
    phase1_log: list
    router: TrainResult
    test_topk: EvalReport
    test_soft: EvalReport
    post_oracle_val: EvalReport   # oracle-routed, after the router phase
    single_expert_test: list[float]
    seconds: float

    @property
    def drift(self) -> float:
        return expert_drift(expert_map(self.model), self.anchor)


def run_pipeline(seed: int, preset: WorkbenchPreset | None = None, router_phase: PhaseConfig | None = None,
                 router_train_size: int | None = None) -> PipelineResult:
    t0 = time.perf_counter()
    preset = (preset or WorkbenchPreset()).with_seed(seed)
    model, splits, base_val, p1 = build_phase1(seed, preset)
    result = continue_pipeline(seed, model, splits, base_val, p1.log, preset, router_phase, router_train_size)
    result.seconds = time.perf_counter() - t0
    return result


def continue_pipeline(seed: int, model: ToyModel, splits: Splits, base_val: EvalReport, phase1_log: list,
                      preset: WorkbenchPreset | None = None, router_phase: PhaseConfig | None = None,
                      router_train_size: int | None = None) -> PipelineResult:
    """Router phase and evaluations, starting from a phase-1 model (which is left untouched)."""
    t0 = time.perf_counter()
    preset = (preset or WorkbenchPreset()).with_seed(seed)
    cfg = router_phase or preset.router_phase
    phase1_model = model
    model = copy.deepcopy(phase1_model)
    phase1_val = evaluate(model, splits.val, oracle_domain=True)
    anchor = PreservationAnchor.snapshot(expert_map(model))
    train = splits.train if router_train_size is None else balanced_subset(splits.train, router_train_size, seed)
    result = train_router(model, train, cfg, anchor)
    base_test = _base_eval(phase1_model, splits)
    return PipelineResult(
        seed=seed, model=model, splits=splits, base_val=base_val, base_test=base_test, phase1_val=phase1_val,
        phase1_model=phase1_model, anchor=anchor, phase1_log=phase1_log, router=result,
        test_topk=evaluate(model, splits.test, cfg.top_k_eval), test_soft=evaluate(model, splits.test, None),
        post_oracle_val=evaluate(model, splits.val, oracle_domain=True),
        single_expert_test=single_expert_accuracies(model, splits.test), seconds=time.perf_counter() - t0)


def _base_eval(model: ToyModel, splits: Splits) -> EvalReport:
    """Accuracy of the frozen base: every expert's delta switched off."""
    bare = copy.deepcopy(model)
    for name, _ in bare.named_projections():
        bare.set_projection(name, bare.base_projection(name))
    return evaluate(bare, splits.test, None)


def k_sweep(model: ToyModel, samples, ks=None) -> dict[int, float]:
    num_e = model.mixer_layers()[0].num_experts
    ks = range(1, num_e + 1) if ks is None else ks
    return {int(k): evaluate(model, samples, k).pooled_accuracy for k in ks}


# ---------------------------------------------------------------------------
# balance losses on a free logit table
# ---------------------------------------------------------------------------

@dataclass
class EquilibriumResult:
    p_bar: np.ndarray
    routing_variance: float
    mean_entropy: float
    history: list[dict]

    @property
    def max_load_deviation(self) -> float:
        return float(np.max(np.abs(self.p_bar - 1.0 / self.p_bar.size)))


def planted_logits(num_experts: int, n_tokens: int, seed: int, noise: float = 0.05, planted: float = 0.0):
    """Initial logits; token n belongs to domain n mod E and gets ``planted`` extra logit on that expert."""
    rng = np.random.default_rng(seed)
    logits = rng.normal(0.0, noise, size=(n_tokens, num_experts))
    domains = np.arange(n_tokens) % num_experts
    logits[np.arange(n_tokens), domains] += planted
    return logits, domains


def equilibrium_run(num_experts: int, weights: LossWeights, seed: int = 0, n_tokens: int = 256,
                    steps: int = 1000, lr: float = 0.01, noise: float = 0.05, planted: float = 0.0,
                    assignment_mode: str = "top1") -> EquilibriumResult:
    """Optimise a logit table directly under the balance loss (aux, or aux plus entropy term)."""
    logits0, _ = planted_logits(num_experts, n_tokens, seed, noise, planted)
    table = Tensor(logits0, requires_grad=True)
    opt = AdamW([table], lr=lr, weight_decay=0.0)
    history = []
    for step in range(steps):
        table.grad = None
        stats = stats_from_logits(table, assignment_mode, k=1)
        loss = rsl_loss(stats, weights) if weights.lam else aux_loss(stats, weights.alpha)
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == steps - 1:
            history.append({"step": step, "loss": float(loss.data), "routing_variance": stats.routing_variance,
                            "mean_entropy": float(stats.mean_entropy.data)})
    with nx.no_grad():
        final = stats_from_logits(Tensor(table.data), assignment_mode, k=1)
    return EquilibriumResult(final.p_bar.data.copy(), final.routing_variance, float(final.mean_entropy.data), history)
