"""Fast self-checks: gradients, entropy identity, balance equilibrium, transparency, bundles.

``run_suite`` returns ``(name, passed, detail)`` triples; the CLI ``verify``
command prints them and exits non-zero when any fails.
"""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .lora import LoraConfig
from .losses import LossWeights, PreservationAnchor
from .mixer import attach_mixers
from .numerics import Tensor
from .routing import entropy, entropy_grad_unconstrained

GRAD_TOL = 1e-5


def op_cases(rng: np.random.Generator) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """(name, scalar function of tensors, inputs) for every differentiable primitive."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    w = rng.normal(size=(5, 4))
    bias = rng.normal(size=5)
    rows = np.array([2, 0, 2])
    labels = rng.integers(0, 4, size=3)
    c = rng.normal(size=(3, 4))  # fixed cotangent, turns any tensor into a scalar

    def dot(t: Tensor) -> Tensor:
        cot = c if t.shape == c.shape else np.resize(c, t.shape)
        return nx.tsum(t * cot)

    away = a + np.sign(a) * 0.1  # keep relu away from its kink
    return [
        ("add", lambda x, y: dot(x + y), [a, b]),
        ("add_broadcast", lambda x, y: dot(x + y), [a, b[0]]),
        ("sub", lambda x, y: dot(x - y), [a, b]),
        ("mul", lambda x, y: dot(x * y), [a, b]),
        ("div", lambda x, y: dot(x / y), [a, pos]),
        ("neg", lambda x: dot(-x), [a]),
        ("power", lambda x: dot(nx.power(x, 1.7)), [pos]),
        ("exp", lambda x: dot(nx.exp(x)), [a]),
        ("log", lambda x: dot(nx.log(x)), [pos]),
        ("relu", lambda x: dot(nx.relu(x)), [away]),
        ("tanh", lambda x: dot(nx.tanh(x)), [a]),
        ("sum_axis", lambda x: nx.tsum(nx.tsum(x, axis=0) * c[0]), [a]),
        ("mean", lambda x: nx.tsum(nx.mean(x, axis=1) * c[:, 0]), [a]),
        ("reshape", lambda x: dot(nx.reshape(nx.reshape(x, (4, 3)), (3, 4))), [a]),
        ("transpose", lambda x: nx.tsum(nx.transpose(x) * c.T), [a]),
        ("getitem", lambda x: nx.tsum(x[1:, ::2] * c[1:, ::2]), [a]),
        ("take_rows", lambda x: dot(nx.take_rows(x, rows)), [a]),
        ("place_rows", lambda x: nx.tsum(nx.place_rows(x, np.array([4, 1, 0]), 5) * np.resize(c, (5, 4))), [a]),
        ("embedding", lambda t: dot(nx.embedding(t, rows)), [a]),
        ("pick", lambda x: nx.tsum(nx.pick(x, labels) * c[:, 0]), [a]),
        ("stack", lambda x, y: nx.tsum(nx.stack([x, y]) * np.stack([c, -c])), [a, b]),
        ("matmul", lambda x, y: nx.tsum(nx.matmul(x, y) * c[:, :3]), [a, rng.normal(size=(4, 3))]),
        ("matmul_batched", lambda x, y: nx.tsum(nx.matmul(x, y)), [rng.normal(size=(2, 3, 4)),
                                                                     rng.normal(size=(2, 4, 2))]),
        ("softmax", lambda x: dot(nx.softmax(x)), [a]),
        ("log_softmax", lambda x: dot(nx.log_softmax(x)), [a]),
        ("layer_norm", lambda x: dot(nx.layer_norm(x)), [a]),
        ("linear", lambda x, ww, bb: nx.tsum(nx.linear(x, ww, bb)), [a, w, bias]),
        ("cross_entropy", lambda x: nx.cross_entropy(x, labels), [a]),
    ]


def tiny_setup(seed: int):
    """A small wrapped model and batch for checking the full objective."""
    from .training import expert_map
    from .workbench import ModelConfig, ToyModel, default_specs, generate_dataset, make_batch

    cfg = ModelConfig(vocab=16, seq_len=10, d_model=8, n_heads=2, n_blocks=1, seed=seed)
    model = ToyModel(cfg)
    rng = np.random.default_rng(seed)
    model.head_weight = Tensor(rng.normal(0, 0.5, model.head_weight.shape))
    layers = attach_mixers(model, LoraConfig(r=2, lora_alpha=4.0, dropout_p=0.0), 4, seed=seed)
    for layer in layers:
        layer.router.gate_weight.data = rng.normal(0, 0.5, layer.router.gate_weight.shape)
        for e in layer.experts:
            e.B.data = rng.normal(0, 0.1, e.B.shape)
    splits = generate_dataset(default_specs(seed, 16, 10), 12, seed)
    batch = make_batch(splits.train[::5][:6])
    anchor = PreservationAnchor.snapshot(expert_map(model))
    for layer in layers:  # move experts off their anchor so the penalty has a gradient
        for e in layer.experts:
            e.A.data = e.A.data + rng.normal(0, 0.05, e.A.shape)
    return model, batch, anchor


def objective_grad_error(seed: int, weights: LossWeights | None = None) -> float:
    """Relative gradient error of the full router-phase objective w.r.t. one router and one expert."""
    from .training import PhaseConfig, router_objective

    model, batch, anchor = tiny_setup(seed)
    layer = model.mixer_layers()[seed % len(model.mixer_layers())]
    expert = layer.experts[seed % layer.num_experts]
    cfg = PhaseConfig(phase="router_phase", steps=0,
                      loss_weights=weights or LossWeights(alpha=0.5, lam=0.3, beta=0.7))

    def f(gate: Tensor, a: Tensor, b: Tensor) -> Tensor:
        layer.router.gate_weight, expert.A, expert.B = gate, a, b
        total, _ = router_objective(model, batch, cfg, anchor, training=False)
        return total

    return nx.grad_check(f, [layer.router.gate_weight.data, expert.A.data, expert.B.data])


def random_simplex(rng: np.random.Generator, n: int, floor: float = 1e-3) -> np.ndarray:
    p = rng.dirichlet(np.ones(n)) + floor
    return p / p.sum()


def entropy_identity_error(rng: np.random.Generator, points: int = 1000, rel_step: float = 1e-4) -> float:
    """Largest |(-log p_i - 1) - central difference of H along coordinate i| over random simplex points.

    The probe step is ``rel_step * p_i``: the third derivative of p log p is
    1/p^2, so a fixed step would swamp small coordinates with truncation error.
    """
    worst = 0.0
    for _ in range(points):
        p = random_simplex(rng, int(rng.integers(2, 9)))
        analytic = entropy_grad_unconstrained(p)

        def h(q):
            return float(-np.sum(q * np.log(q)))

        for i in range(p.size):
            eps = rel_step * p[i]
            up, down = p.copy(), p.copy()
            up[i] += eps
            down[i] -= eps
            fd = (h(up) - h(down)) / (2 * eps)
            worst = max(worst, abs(fd - analytic[i]))
    return worst


def run_suite(seed: int = 0) -> list[tuple[str, bool, str]]:
    from .experiments import equilibrium_run
    from .adapters import export_bundle, import_bundle
    from .training import evaluate
    from .workbench import ModelConfig, ToyModel, default_specs, generate_dataset

    results = []
    rng = np.random.default_rng(seed)

    worst = max(nx.grad_check(f, inputs) for s in range(3)
                for _, f, inputs in op_cases(np.random.default_rng([seed, s])))
    results.append(("op gradients", worst <= GRAD_TOL, f"max rel err {worst:.2e}"))

    worst = max(objective_grad_error(seed + s) for s in range(3))
    results.append(("objective gradient", worst <= GRAD_TOL, f"max rel err {worst:.2e}"))

    err = entropy_identity_error(rng, points=200)
    results.append(("entropy gradient identity", err <= 1e-7, f"max abs err {err:.2e}"))

    h = entropy(np.full(4, 0.25))
    results.append(("uniform entropy", abs(h - np.log(4)) < 1e-12, f"H={h:.12f}"))

    aux = equilibrium_run(4, LossWeights(alpha=0.01, lam=0.0), seed=seed, steps=400)
    rsl = equilibrium_run(4, LossWeights(alpha=0.01, lam=0.001), seed=seed, steps=400, planted=0.05)
    ok = aux.max_load_deviation <= 0.05 and aux.routing_variance <= 1e-3 and \
        rsl.routing_variance >= 5 * aux.routing_variance
    results.append(("balance equilibrium", ok, f"aux dev {aux.max_load_deviation:.3f} var "
                    f"{aux.routing_variance:.1e}; rsl var {rsl.routing_variance:.3f}"))

    splits = generate_dataset(default_specs(seed), 40, seed)
    model = ToyModel(ModelConfig(seed=seed))
    model.head_weight = Tensor(rng.normal(0, 0.3, model.head_weight.shape))
    tokens = np.array([s.tokens for s in splits.test])
    with nx.no_grad():
        before = model.forward(tokens)[0].data
        attach_mixers(model, LoraConfig(dropout_p=0.0), 4, seed=seed)
        after = model.forward(tokens)[0].data
    gap = float(np.max(np.abs(before - after)))
    results.append(("zero-delta transparency", gap <= 1e-12, f"max gap {gap:.1e}"))

    for layer in model.mixer_layers():
        for e in layer.experts:
            e.B.data = rng.normal(0, 0.05, e.B.shape)
        layer.router.gate_weight.data = rng.normal(0, 0.5, layer.router.gate_weight.shape)
    full = evaluate(model, splits.test, 4).to_dict()
    soft = evaluate(model, splits.test, None).to_dict()
    results.append(("top-K at K=E equals soft", full == soft, "reports identical" if full == soft else "differ"))

    with tempfile.TemporaryDirectory() as tmp:
        export_bundle(model, 1, Path(tmp) / "b")
        clone = ToyModel(ModelConfig(seed=seed + 1))
        attach_mixers(clone, LoraConfig(dropout_p=0.0), 4, seed=seed + 1)
        report = import_bundle(Path(tmp) / "b", clone, 1)
        same = all(np.array_equal(a.experts[1].A.data, b.experts[1].A.data)
                   and np.array_equal(a.experts[1].B.data, b.experts[1].B.data)
                   for a, b in zip(model.mixer_layers(), clone.mixer_layers()))
    results.append(("bundle round trip", same and report.overall == "loadable", report.overall))
    return results
