"""End-to-end acceptance checks on the four-domain workbench.

The three seeded pipelines are built once per session and shared. Every test
records one PASS/FAIL line, and the terminal summary collects them.
"""

import copy
import time

import numpy as np
import pytest

from conftest import record_criterion
from loramixer import numerics as nx
from loramixer.adapters import compose, export_bundle, import_bundle
from loramixer.experiments import (
    WorkbenchPreset,
    build_base,
    continue_pipeline,
    equilibrium_run,
    run_pipeline,
)
from loramixer.lora import LoraConfig
from loramixer.losses import LossWeights
from loramixer.mixer import attach_mixers
from loramixer.numerics import Tensor
from loramixer.training import PhaseConfig, evaluate, expert_map
from loramixer.verify import entropy_identity_error, objective_grad_error, op_cases

SEEDS = (0, 1, 2)
_PIPELINES = {}


def pipeline(seed):
    if seed not in _PIPELINES:
        _PIPELINES[seed] = run_pipeline(seed)
    return _PIPELINES[seed]


def router_variant(seed, train_size=None, **weights):
    res = pipeline(seed)
    preset = WorkbenchPreset().with_seed(seed)
    cfg = copy.deepcopy(preset.router_phase)
    cfg.loss_weights = LossWeights(**weights)
    return continue_pipeline(seed, res.phase1_model, res.splits, res.base_val, res.phase1_log, preset, cfg,
                             router_train_size=train_size)


def test_criterion_1_gradient_certification():
    t0 = time.perf_counter()
    worst_op, worst_obj, n_ops = 0.0, 0.0, 0
    for seed in range(100):
        cases = op_cases(np.random.default_rng(seed))
        n_ops = len(cases)
        for _, f, inputs in cases:
            worst_op = max(worst_op, nx.grad_check(f, inputs))
        worst_obj = max(worst_obj, objective_grad_error(seed))
    seconds = time.perf_counter() - t0
    ok = worst_op <= 1e-5 and worst_obj <= 1e-5 and seconds <= 120
    record_criterion(1, ok, f"{n_ops} ops x 100 seeds max rel err {worst_op:.1e}; objective x 100 seeds "
                            f"{worst_obj:.1e}; {seconds:.0f}s")
    assert ok


def test_criterion_2_balance_equilibrium():
    t0 = time.perf_counter()
    aux = {e: equilibrium_run(e, LossWeights(alpha=0.01, lam=0.0), seed=0) for e in (2, 4, 8)}
    aux_planted = equilibrium_run(4, LossWeights(alpha=0.01, lam=0.0), seed=0, planted=0.05)
    rsl = equilibrium_run(4, LossWeights(alpha=0.01, lam=0.001), seed=0, planted=0.05)
    seconds = time.perf_counter() - t0
    reference = max(aux_planted.routing_variance, aux[4].routing_variance)
    ok = all(r.max_load_deviation <= 0.05 and r.routing_variance <= 1e-3 for r in aux.values()) \
        and aux_planted.max_load_deviation <= 0.05 and aux_planted.routing_variance <= 1e-3 \
        and rsl.routing_variance >= 5 * reference and seconds <= 60
    detail = "; ".join(f"E={e} dev {r.max_load_deviation:.3f} var {r.routing_variance:.1e}" for e, r in aux.items())
    record_criterion(2, ok, f"{detail}; planted aux var {aux_planted.routing_variance:.1e}, "
                            f"rsl var {rsl.routing_variance:.3f}; {seconds:.0f}s")
    assert ok


def test_criterion_3_entropy_identity():
    err = entropy_identity_error(np.random.default_rng(2024), points=1000)
    record_criterion(3, err <= 1e-7, f"max abs err {err:.1e} over 1000 simplex points")
    assert err <= 1e-7


def test_criterion_4_specialization():
    matched = {s: pipeline(s).test_soft.matched_domains() for s in SEEDS}
    per_seed = max(pipeline(s).seconds for s in SEEDS)
    ok = all(m >= 3 for m in matched.values()) and per_seed <= 600
    record_criterion(4, ok, f"matched domains per seed {matched}; slowest seed {per_seed:.0f}s")
    assert ok


def test_criterion_5_mixture_benefit():
    rows, ok = [], True
    for s in SEEDS:
        res = pipeline(s)
        mix, best, base = res.test_topk.pooled_accuracy, max(res.single_expert_test), res.base_test.pooled_accuracy
        ok &= mix >= best and mix >= base + 0.05
        rows.append(f"seed {s}: mixer {mix:.3f} best single {best:.3f} base {base:.3f}")
    record_criterion(5, ok, "; ".join(rows))
    assert ok


def test_criterion_6_topk():
    rows, ok = [], True
    for s in SEEDS:
        res = pipeline(s)
        k1 = evaluate(res.model, res.splits.test, 1).pooled_accuracy
        k3 = res.test_topk.pooled_accuracy
        full = evaluate(res.model, res.splits.test, 4).to_dict()
        exact = full == res.test_soft.to_dict()
        ok &= k3 >= k1 - 0.005 and exact
        rows.append(f"seed {s}: K=1 {k1:.3f} K=3 {k3:.3f} K=E==soft {exact}")
    record_criterion(6, ok, "; ".join(rows))
    assert ok


def test_criterion_7_data_efficiency():
    rows, wins = [], 0
    for s in SEEDS:
        rsl = router_variant(s, 1000, lam=0.001).test_topk.pooled_accuracy
        aux = router_variant(s, 1000, lam=0.0).test_topk.pooled_accuracy
        wins += rsl >= aux
        rows.append(f"seed {s}: rsl {rsl:.4f} aux {aux:.4f}")
    record_criterion(7, wins >= 2, f"{wins}/3 seeds; " + "; ".join(rows))
    assert wins >= 2


def test_criterion_8_preservation():
    stiff = router_variant(0, beta=1e6).drift
    loose = router_variant(0, beta=0.0).drift
    worst = 0.0
    for s in SEEDS:
        res = pipeline(s)
        for d, acc in res.phase1_val.accuracy.items():
            worst = max(worst, acc - res.post_oracle_val.accuracy[d])
    ok = stiff <= 1e-3 and loose > stiff and worst <= 0.01
    record_criterion(8, ok, f"drift beta=1e6 {stiff:.1e}, beta=0 {loose:.1e}; "
                            f"largest per-domain drop at default beta {100 * worst:.2f} points")
    assert ok


def test_criterion_9_adapter_fidelity(tmp_path):
    res = pipeline(0)
    source = res.model
    preset = WorkbenchPreset().with_seed(0)
    paths = [export_bundle(source, e, tmp_path / f"e{e}").path for e in range(4)]

    clone = copy.deepcopy(res.phase1_model)
    for e, path in enumerate(paths):
        assert import_bundle(path, clone, e).overall == "loadable"
    bitwise = all(a.experts[e].A.data.tobytes() == b.experts[e].A.data.tobytes()
                  and a.experts[e].B.data.tobytes() == b.experts[e].B.data.tobytes()
                  for a, b in zip(source.mixer_layers(), clone.mixer_layers()) for e in range(4))

    fresh, _ = build_base(0, preset, res.splits)
    compose(paths, fresh, preset.router, seed=0)
    for a, b in zip(source.mixer_layers(), fresh.mixer_layers()):
        b.router.gate_weight.data = a.router.gate_weight.data.copy()
    x = Tensor(np.random.default_rng(9).normal(size=(64, source.cfg.d_model)))
    gap = 0.0
    with nx.no_grad():
        for a, b in zip(source.mixer_layers(), fresh.mixer_layers()):
            for kw in (dict(mode="soft"), dict(mode="topk", top_k=3)):
                gap = max(gap, float(np.max(np.abs(a(x, **kw)[0].data - b(x, **kw)[0].data))))
        tokens = np.array([s.tokens for s in res.splits.test])
        gap = max(gap, float(np.max(np.abs(source.forward(tokens, mode="soft")[0].data
                                           - fresh.forward(tokens, mode="soft")[0].data))))
    ok = bitwise and gap <= 1e-12
    record_criterion(9, ok, f"round trip bitwise {bitwise}; cross-instance max gap {gap:.1e}")
    assert ok


def _short_run(seed):
    preset = WorkbenchPreset(n_per_domain=200, head_steps=200)
    preset.expert_phase = PhaseConfig(phase="expert_phase", steps=60, learning_rate=3e-3)
    preset.router_phase = PhaseConfig(phase="router_phase", steps=60, learning_rate=1e-2, expert_learning_rate=1e-5)
    res = run_pipeline(seed, preset)
    arrays = [a for layer in res.model.mixer_layers()
              for a in [layer.router.gate_weight.data] + [p.data for p in layer.expert_parameters()]]
    return arrays, res.router.log, res.test_soft.to_dict()


def test_criterion_10_transparency_and_determinism():
    model, splits = build_base(0)
    tokens = np.array([s.tokens for s in splits.test])
    with nx.no_grad():
        before = model.forward(tokens)[0].data
        attach_mixers(model, LoraConfig(dropout_p=0.0), 4, seed=0)
        gap = max(float(np.max(np.abs(before - model.forward(tokens, mode=m, top_k=k)[0].data)))
                  for m, k in (("soft", None), ("topk", 3), ("topk", 1)))
    a, b = _short_run(5), _short_run(5)
    identical = all(x.tobytes() == y.tobytes() for x, y in zip(a[0], b[0])) and a[1] == b[1] and a[2] == b[2]
    ok = gap <= 1e-12 and identical
    record_criterion(10, ok, f"zero-delta max logit gap {gap:.1e}; repeated seeded run bitwise identical {identical}")
    assert ok


def test_router_balance_loss_falls_early():
    """Mean balance term (rsl) over the first 5% of router steps exceeds the mean over steps 15-20%."""
    for s in SEEDS:
        log = pipeline(s).router.log
        n = len(log)
        early = np.mean([r["rsl"] for r in log[: n // 20]])
        later = np.mean([r["rsl"] for r in log[3 * n // 20: n // 5]])
        assert later < early, (s, early, later)


def test_phase1_experts_reach_ninety_percent():
    for s in SEEDS:
        acc = pipeline(s).phase1_val.accuracy
        assert all(a >= 0.90 for a in acc.values()), (s, acc)


def test_frozen_base_is_weak():
    for s in SEEDS:
        acc = pipeline(s).base_val.accuracy
        assert all(a <= 0.70 for a in acc.values()), (s, acc)


def test_k_sweep_shape():
    from loramixer.experiments import k_sweep

    for s in SEEDS:
        res = pipeline(s)
        accs = k_sweep(res.model, res.splits.test)
        print(f"seed {s} K sweep {accs}")
        assert list(accs) == [1, 2, 3, 4]
        assert accs[3] >= accs[1] - 0.005
        assert accs[4] == res.test_soft.pooled_accuracy
