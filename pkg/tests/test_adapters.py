import itertools
import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import SMALL, small_model
from loramixer import numerics as nx
from loramixer.adapters import (
    architecture_fingerprint,
    bundle_nbytes,
    check_compat,
    compose,
    export_bundle,
    import_bundle,
    load_bundle,
)
from loramixer.errors import CompositionError, ConfigurationError, ExportError, FormatError, IntegrityError
from loramixer.lora import LoraConfig
from loramixer.losses import LossWeights
from loramixer.mixer import attach_mixers
from loramixer.training import PhaseConfig, train_experts, train_router
from loramixer.workbench import ModelConfig, ToyModel


def bare_model(seed=0, cfg=SMALL):
    model = ToyModel(replace(cfg, seed=seed))
    model.head_weight = small_model(seed).head_weight
    return model


def outputs(model, samples, **kw):
    tokens = np.array([s.tokens for s in samples])
    with nx.no_grad():
        return model.forward(tokens, **kw)[0].data


def test_round_trip_is_bitwise(tmp_path):
    model = small_model(1)
    bundle = export_bundle(model, 2, tmp_path / "b")
    back = load_bundle(tmp_path / "b")
    assert bundle.expert_id == back.expert_id == 2
    for layer in model.mixer_layers():
        e = layer.experts[2]
        assert back.tensors[(layer.name, "A")].tobytes() == e.A.data.tobytes()
        assert back.tensors[(layer.name, "B")].tobytes() == e.B.data.tobytes()
        assert back.lora_alpha(layer.name) == e.lora_alpha and back.rank(layer.name) == e.rank


def test_manifest_contents(tmp_path):
    model = small_model(1)
    export_bundle(model, 0, tmp_path / "b")
    doc = json.loads((tmp_path / "b" / "manifest").read_text())
    assert doc["format_version"] == 1 and doc["precision"] == "float64"
    assert doc["base_model_fingerprint"] == architecture_fingerprint(model.architecture())
    assert doc["lora_config"]["r"] == 2
    assert {t["role"] for t in doc["tensors"]} == {"A", "B"}
    assert all(len(t["sha256"]) == 64 for t in doc["tensors"])


def test_bundle_size_arithmetic(tmp_path):
    model = small_model(1)
    export_bundle(model, 0, tmp_path / "b")
    payload = sum(2 * (8 + 8) * 8 for _ in model.mixer_layers())  # r (d_in + d_out) doubles per layer
    manifest = (tmp_path / "b" / "manifest").stat().st_size
    assert bundle_nbytes(tmp_path / "b") == payload + manifest


def test_tampered_blob_is_rejected(tmp_path):
    export_bundle(small_model(1), 0, tmp_path / "b")
    blob = next((tmp_path / "b" / "tensors").iterdir())
    raw = bytearray(blob.read_bytes())
    raw[3] ^= 0x01
    blob.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        import_bundle(tmp_path / "b", small_model(2), 0)


def test_empty_bundle_is_a_format_error(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(FormatError):
        load_bundle(tmp_path / "empty")
    export_bundle(small_model(1), 0, tmp_path / "b")
    doc = json.loads((tmp_path / "b" / "manifest").read_text())
    doc["tensors"] = []
    (tmp_path / "b" / "manifest").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_bundle(tmp_path / "b")


@pytest.mark.parametrize("edit", [
    lambda d: d.update(format="other"),
    lambda d: d.update(format_version=99),
    lambda d: d.pop("expert_id"),
    lambda d: d["tensors"][0].update(role="C"),
    lambda d: d["tensors"][0].update(file="../../x.bin"),
    lambda d: d["tensors"][0].update(file="tensors/none.bin"),
    lambda d: d["tensors"][0].update(shape=[3, 3]),
    lambda d: d["tensors"].pop(0),
])
def test_malformed_manifest(tmp_path, edit):
    export_bundle(small_model(1), 0, tmp_path / "b")
    doc = json.loads((tmp_path / "b" / "manifest").read_text())
    edit(doc)
    (tmp_path / "b" / "manifest").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_bundle(tmp_path / "b")


def test_unparseable_manifest(tmp_path):
    export_bundle(small_model(1), 0, tmp_path / "b")
    (tmp_path / "b" / "manifest").write_text("{not json")
    with pytest.raises(FormatError):
        load_bundle(tmp_path / "b")


def test_export_errors(tmp_path):
    model = small_model(1)
    with pytest.raises(ExportError):
        export_bundle(model, 4, tmp_path / "b")
    assert not (tmp_path / "b").exists()
    export_bundle(model, 0, tmp_path / "b")
    with pytest.raises(ExportError):
        export_bundle(model, 0, tmp_path / "b")
    with pytest.raises(ExportError):
        export_bundle(bare_model(), 0, tmp_path / "c")
    assert sorted(p.name for p in tmp_path.iterdir()) == ["b"]


def test_cross_instance_outputs(tmp_path, small_splits):
    source = small_model(3)
    for e in range(4):
        export_bundle(source, e, tmp_path / f"e{e}")
    target = small_model(3, randomize=False)
    for e in range(4):
        assert import_bundle(tmp_path / f"e{e}", target, e).overall == "loadable"
    for a, b in zip(source.mixer_layers(), target.mixer_layers()):
        b.router.gate_weight.data = a.router.gate_weight.data.copy()
    for kw in (dict(mode="soft"), dict(mode="topk", top_k=2)):
        gap = np.max(np.abs(outputs(source, small_splits.test, **kw) - outputs(target, small_splits.test, **kw)))
        assert gap <= 1e-12


def test_width_change_is_incompatible(tmp_path):
    wide = ModelConfig(d_model=32, n_blocks=1)
    source = small_model(0, cfg=wide)
    export_bundle(source, 0, tmp_path / "b")
    target = small_model(0, cfg=replace(wide, d_model=48))
    before = [e.A.data.copy() for layer in target.mixer_layers() for e in layer.experts]
    report = import_bundle(tmp_path / "b", target, 0)
    assert report.overall == "incompatible" and not report.fingerprint_match and report.installed == []
    assert set(report.layers.values()) == {"shape-mismatch"}
    after = [e.A.data for layer in target.mixer_layers() for e in layer.experts]
    assert all(np.array_equal(x, y) for x, y in zip(before, after))


def test_partial_and_missing_layers(tmp_path):
    source = small_model(0)
    export_bundle(source, 1, tmp_path / "b")
    target = bare_model()
    attach_mixers(target, LoraConfig(r=2, lora_alpha=4.0, dropout_p=0.0, target_projection_names=["q"]), 4)
    report = check_compat(load_bundle(tmp_path / "b"), target, 1)
    assert report.layers == {"blk0.attn.q": "exact", "blk0.attn.v": "missing-layer"}
    assert report.overall == "partial" and report.fingerprint_match
    with pytest.raises(ConfigurationError):
        check_compat(load_bundle(tmp_path / "b"), target, 9)


def test_compose_single_bundle_is_plain_lora(tmp_path, small_splits):
    source = small_model(4)
    export_bundle(source, 3, tmp_path / "b")
    composed = bare_model(4)
    layers = compose([tmp_path / "b"], composed)
    assert all(layer.num_experts == 1 for layer in layers)
    forced = outputs(source, small_splits.test, domain_ids=3, mode="hard")
    for kw in (dict(mode="soft"), dict(mode="topk", top_k=1)):
        np.testing.assert_allclose(outputs(composed, small_splits.test, **kw), forced, rtol=0, atol=1e-12)


def test_compose_needs_bundles():
    with pytest.raises(CompositionError):
        compose([], bare_model())


def test_compose_rank_disagreement(tmp_path):
    export_bundle(small_model(0), 0, tmp_path / "r2")
    other = bare_model()
    attach_mixers(other, LoraConfig(r=3, lora_alpha=4.0, dropout_p=0.0), 2)
    export_bundle(other, 0, tmp_path / "r3")
    with pytest.raises(CompositionError, match="rank"):
        compose([tmp_path / "r2", tmp_path / "r3"], bare_model())


def test_compose_uncovered_layer_is_zero_delta(tmp_path, small_splits):
    only_q = bare_model()
    attach_mixers(only_q, LoraConfig(r=2, lora_alpha=4.0, dropout_p=0.0, target_projection_names=["q"]), 1)
    only_q.mixer_layers()[0].experts[0].B.data[...] = 0.3
    export_bundle(only_q, 0, tmp_path / "q")
    export_bundle(small_model(0), 0, tmp_path / "qv")
    layers = compose([tmp_path / "q", tmp_path / "qv"], bare_model())
    v = {l.name: l for l in layers}["blk0.attn.v"]
    assert not np.any(v.experts[0].B.data)
    assert all(p.requires_grad for l in layers for p in l.router.parameters())
    assert not any(p.requires_grad for l in layers for p in l.expert_parameters())


@pytest.mark.parametrize("perm", list(itertools.permutations(range(4)))[::5])
def test_compose_order_invariance(tmp_path, small_splits, perm):
    source = small_model(5)
    paths = [export_bundle(source, e, tmp_path / f"e{e}").path for e in range(4)]
    ref, shuffled = bare_model(5), bare_model(5)
    ref_layers = compose(paths, ref)
    new_layers = compose([paths[i] for i in perm], shuffled)
    for a, b in zip(ref_layers, new_layers):
        a.router.gate_weight.data = source.projection(a.name).router.gate_weight.data.copy()
        b.router.gate_weight.data = a.router.gate_weight.data[list(perm)].copy()
    np.testing.assert_allclose(outputs(ref, small_splits.test, mode="soft"),
                               outputs(shuffled, small_splits.test, mode="soft"), rtol=0, atol=1e-12)


def test_compose_then_train_reproduces_pipeline(tmp_path, small_splits):
    """Phase-1 bundles composed onto a fresh base train exactly as the in-place model does."""
    original = small_model(6, randomize=False)
    train_experts(original, small_splits.train,
                  PhaseConfig(phase="expert_phase", steps=5, batch_size=8, learning_rate=1e-2))
    paths = [export_bundle(original, e, tmp_path / f"e{e}").path for e in range(4)]
    rebuilt = bare_model(6)
    compose(paths, rebuilt, seed=6)  # the seed small_model attached with
    for a, b in zip(original.mixer_layers(), rebuilt.mixer_layers()):
        assert np.array_equal(a.router.gate_weight.data, b.router.gate_weight.data)
    cfg = PhaseConfig(phase="router_phase", steps=8, batch_size=8, learning_rate=1e-2,
                      trainable_set="router_only", loss_weights=LossWeights())
    log_a = train_router(original, small_splits.train, cfg).log
    log_b = train_router(rebuilt, small_splits.train, cfg).log
    assert log_a == log_b
    for a, b in zip(original.mixer_layers(), rebuilt.mixer_layers()):
        assert np.array_equal(a.router.gate_weight.data, b.router.gate_weight.data)
