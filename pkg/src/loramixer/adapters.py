"""Adapter bundles: one expert's per-layer (A, B) on disk, plus import and composition.

A bundle is a directory::

    manifest                      JSON document
    tensors/<layer>.<role>.bin    raw little-endian values, role A or B

The manifest records the format version, engine version, precision, an
architecture fingerprint of the source model, the adapter config and, per
tensor, its layer, role, shape, file name and sha256 digest.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .errors import CompositionError, ConfigurationError, ExportError, FormatError, IntegrityError
from .lora import LoraConfig
from .mixer import MixerLayer, RouterConfig, attach_mixers

FORMAT = "loramixer-adapter"
FORMAT_VERSION = 1
MANIFEST = "manifest"
TENSOR_DIR = "tensors"
ROLES = ("A", "B")
_DTYPES = {"float64": "<f8", "float32": "<f4"}


# ---------------------------------------------------------------------------
# raw tensor directories (shared with checkpoints)
# ---------------------------------------------------------------------------

def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def architecture_fingerprint(descriptor: Sequence[tuple[str, int, int]]) -> str:
    """Hash of (layer name, d_out, d_in) triples; weights do not enter it."""
    canon = json.dumps(sorted([str(n), int(o), int(i)] for n, o, i in descriptor), separators=(",", ":"))
    return sha256_hex(canon.encode())


def encode_array(arr: np.ndarray) -> tuple[bytes, str]:
    name = np.dtype(arr.dtype).name
    if name not in _DTYPES:
        raise ExportError(f"unsupported dtype {name}")
    return np.ascontiguousarray(arr, dtype=_DTYPES[name]).tobytes(), name


def decode_array(raw: bytes, shape: Sequence[int], dtype: str) -> np.ndarray:
    if dtype not in _DTYPES:
        raise FormatError(f"unsupported dtype {dtype!r}")
    item = np.dtype(_DTYPES[dtype]).itemsize
    expected = int(np.prod(shape, dtype=np.int64)) * item
    if len(raw) != expected:
        raise FormatError(f"blob holds {len(raw)} bytes, shape {list(shape)} needs {expected}")
    return np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(shape).astype(dtype)


def write_tensor_dir(path: str | Path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    """Atomically write ``manifest`` (gaining a ``tensors`` list) and one blob per named array."""
    path = Path(path)
    if path.exists():
        raise ExportError(f"{path} already exists")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / TENSOR_DIR).mkdir()
        entries = []
        for key, arr in tensors.items():
            raw, dtype = encode_array(np.asarray(arr))
            fname = f"{TENSOR_DIR}/{key}.bin"
            (tmp / fname).write_bytes(raw)
            entries.append({"key": key, "shape": list(np.shape(arr)), "dtype": dtype, "file": fname,
                            "sha256": sha256_hex(raw)})
        doc = dict(manifest)
        doc["tensors"] = [dict(e, **doc.get("_entry_extra", {}).get(e["key"], {})) for e in entries]
        doc.pop("_entry_extra", None)
        (tmp / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def read_manifest(path: str | Path) -> dict:
    mpath = Path(path) / MANIFEST
    try:
        doc = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"no manifest in {path}") from None
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed manifest in {path}: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("tensors"), list):
        raise FormatError(f"manifest in {path} lacks a tensor list")
    return doc


def read_tensor_dir(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Manifest and arrays, with checksums and byte lengths verified."""
    path = Path(path)
    doc = read_manifest(path)
    arrays: dict[str, np.ndarray] = {}
    for entry in doc["tensors"]:
        try:
            key, shape, dtype, fname, digest = (entry["key"], entry["shape"], entry["dtype"], entry["file"],
                                                entry["sha256"])
        except (KeyError, TypeError):
            raise FormatError(f"incomplete tensor entry {entry!r}") from None
        if key in arrays:
            raise FormatError(f"duplicate tensor entry {key!r}")
        fpath = (path / fname).resolve()
        if path.resolve() not in fpath.parents:
            raise FormatError(f"blob path {fname!r} escapes the bundle")
        try:
            raw = fpath.read_bytes()
        except FileNotFoundError:
            raise FormatError(f"missing blob {fname}") from None
        if sha256_hex(raw) != digest:
            raise IntegrityError(f"checksum mismatch for {fname}")
        arrays[key] = decode_array(raw, shape, dtype)
    return doc, arrays


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

@dataclass
class AdapterBundle:
    path: Path | None
    manifest: dict
    tensors: dict[tuple[str, str], np.ndarray]  # (layer, role) -> array

    @property
    def expert_id(self) -> int:
        return int(self.manifest["expert_id"])

    @property
    def layers(self) -> list[str]:
        return sorted({layer for layer, _ in self.tensors})

    def rank(self, layer: str) -> int:
        return self.tensors[(layer, "A")].shape[0]

    def lora_alpha(self, layer: str) -> float:
        return float(self.manifest["layers"][layer]["lora_alpha"])

    def dropout_p(self, layer: str) -> float:
        return float(self.manifest["layers"][layer]["lora_dropout"])


def _source_layers(source) -> tuple[list[MixerLayer], list]:
    if hasattr(source, "mixer_layers"):
        return source.mixer_layers(), source.architecture()
    layers = list(source)
    return layers, [(l.name, l.base.d_out, l.base.d_in) for l in layers]


def export_bundle(source, expert_id: int, path: str | Path) -> AdapterBundle:
    """Write expert ``expert_id`` of every mixer layer in ``source`` (a model or a layer list)."""
    layers, arch = _source_layers(source)
    if not layers:
        raise ExportError("nothing to export: no mixer layers")
    tensors, per_layer, extra = {}, {}, {}
    for layer in layers:
        if not 0 <= expert_id < layer.num_experts:
            raise ExportError(f"layer {layer.name} has no expert {expert_id}")
        e = layer.experts[expert_id]
        for role, arr in (("A", e.A.data), ("B", e.B.data)):
            key = f"{layer.name}.{role}"
            tensors[key] = arr
            extra[key] = {"layer": layer.name, "role": role}
        per_layer[layer.name] = {"r": e.rank, "lora_alpha": e.lora_alpha, "lora_dropout": e.dropout_p,
                                 "d_in": e.d_in, "d_out": e.d_out}
    first = layers[0].experts[expert_id]
    cfg = LoraConfig(r=first.rank, lora_alpha=first.lora_alpha, dropout_p=first.dropout_p,
                     target_projection_names=sorted({l.name.rsplit(".", 1)[-1] for l in layers}))
    dtypes = {np.dtype(a.dtype).name for a in tensors.values()}
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "engine_version": __version__,
        "precision": dtypes.pop() if len(dtypes) == 1 else "mixed",
        "base_model_fingerprint": architecture_fingerprint(arch),
        "expert_id": int(expert_id),
        "lora_config": cfg.to_manifest(),
        "layers": per_layer,
        "_entry_extra": extra,
    }
    write_tensor_dir(path, manifest, tensors)
    return load_bundle(path)


def load_bundle(path: str | Path) -> AdapterBundle:
    doc, arrays = read_tensor_dir(path)
    if doc.get("format") != FORMAT:
        raise FormatError(f"{path} is not an adapter bundle")
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported bundle format version {doc.get('format_version')!r}")
    for key in ("expert_id", "layers", "base_model_fingerprint"):
        if key not in doc:
            raise FormatError(f"manifest lacks {key!r}")
    if not doc["tensors"]:
        raise FormatError(f"bundle {path} holds no tensors")
    tensors: dict[tuple[str, str], np.ndarray] = {}
    for entry in doc["tensors"]:
        layer, role = entry.get("layer"), entry.get("role")
        if role not in ROLES or not isinstance(layer, str):
            raise FormatError(f"bad layer/role in entry {entry.get('key')!r}")
        if (layer, role) in tensors:
            raise FormatError(f"duplicate ({layer}, {role}) in bundle")
        tensors[(layer, role)] = arrays[entry["key"]]
    for layer in {l for l, _ in tensors}:
        if (layer, "A") not in tensors or (layer, "B") not in tensors:
            raise FormatError(f"layer {layer} lacks its A or B tensor")
        a, b = tensors[(layer, "A")], tensors[(layer, "B")]
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[1]:
            raise FormatError(f"layer {layer}: A {a.shape} and B {b.shape} disagree on rank")
        if layer not in doc["layers"]:
            raise FormatError(f"layer {layer} missing from the manifest layer table")
    return AdapterBundle(Path(path), doc, tensors)


def bundle_nbytes(path: str | Path) -> int:
    path = Path(path)
    return sum(p.stat().st_size for p in path.rglob("*") if p.is_file())


# ---------------------------------------------------------------------------
# import
# ---------------------------------------------------------------------------

VERDICTS = ("exact", "shape-mismatch", "missing-layer")


@dataclass
class CompatReport:
    layers: dict[str, str]
    fingerprint_match: bool = False
    installed: list[str] = field(default_factory=list)

    @property
    def overall(self) -> str:
        verdicts = list(self.layers.values())
        if verdicts and all(v == "exact" for v in verdicts):
            return "loadable"
        if any(v == "exact" for v in verdicts):
            return "partial"
        return "incompatible"

    def to_dict(self) -> dict:
        return {"overall": self.overall, "fingerprint_match": self.fingerprint_match, "layers": dict(self.layers)}


def check_compat(bundle: AdapterBundle, model, slot: int) -> CompatReport:
    layers = {l.name: l for l in model.mixer_layers()}
    verdicts = {}
    for name in bundle.layers:
        layer = layers.get(name)
        if layer is None:
            verdicts[name] = "missing-layer"
            continue
        if not 0 <= slot < layer.num_experts:
            raise ConfigurationError(f"layer {name} has no expert slot {slot}")
        e = layer.experts[slot]
        ok = bundle.tensors[(name, "A")].shape == e.A.shape and bundle.tensors[(name, "B")].shape == e.B.shape
        verdicts[name] = "exact" if ok else "shape-mismatch"
    fp = architecture_fingerprint(model.architecture()) == bundle.manifest["base_model_fingerprint"]
    return CompatReport(verdicts, fp)


def _install(layer: MixerLayer, slot: int, bundle: AdapterBundle) -> None:
    e = layer.experts[slot]
    e.A.data = bundle.tensors[(layer.name, "A")].copy()
    e.B.data = bundle.tensors[(layer.name, "B")].copy()
    e.lora_alpha = bundle.lora_alpha(layer.name)
    e.dropout_p = bundle.dropout_p(layer.name)


def import_bundle(path_or_bundle, model, slot: int) -> CompatReport:
    """Install a bundle's tensors into expert ``slot`` of every layer whose shapes match exactly."""
    bundle = path_or_bundle if isinstance(path_or_bundle, AdapterBundle) else load_bundle(path_or_bundle)
    report = check_compat(bundle, model, slot)
    layers = {l.name: l for l in model.mixer_layers()}
    for name, verdict in report.layers.items():
        if verdict == "exact":
            _install(layers[name], slot, bundle)
            report.installed.append(name)
    return report


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------

def compose(bundles: Sequence, model, router_cfg: RouterConfig | None = None, seed: int = 0) -> list[MixerLayer]:
    """Wrap ``model`` with one expert per bundle (in order) and fresh routers.

    Layers a bundle does not cover keep a zero-delta expert in that slot.
    Routers are initialised exactly as ``attach_mixers`` would with the same
    seeds; only router weights require gradients afterwards.
    """
    if not bundles:
        raise CompositionError("compose needs at least one bundle")
    loaded = [b if isinstance(b, AdapterBundle) else load_bundle(b) for b in bundles]
    covered = sorted({name for b in loaded for name in b.layers})
    ranks = {}
    for name in covered:
        rs = {b.rank(name) for b in loaded if name in b.layers}
        if len(rs) != 1:
            raise CompositionError(f"bundles disagree on rank at layer {name}: {sorted(rs)}")
        ranks[name] = rs.pop()
    if len(set(ranks.values())) != 1:
        raise CompositionError(f"bundles use different ranks across layers: {sorted(set(ranks.values()))}")
    projections = dict(model.named_projections())
    missing = [n for n in covered if n not in projections]
    if missing:
        raise CompositionError(f"model has no projection named {', '.join(missing)}")
    first = loaded[0]
    name0 = first.layers[0]
    cfg = LoraConfig(r=ranks[covered[0]], lora_alpha=first.lora_alpha(name0), dropout_p=first.dropout_p(name0),
                     target_projection_names=covered)
    layers = attach_mixers(model, cfg, len(loaded), router_cfg, seed=seed)
    by_name = {l.name: l for l in layers}
    for slot, b in enumerate(loaded):
        for name in b.layers:
            layer = by_name[name]
            e = layer.experts[slot]
            if b.tensors[(name, "A")].shape != e.A.shape or b.tensors[(name, "B")].shape != e.B.shape:
                raise CompositionError(f"bundle {slot} does not fit layer {name}")
            _install(layer, slot, b)
        for name in covered:
            if name not in b.layers:
                by_name[name].experts[slot].B.data[...] = 0.0
    for layer in layers:
        for p in layer.expert_parameters():
            p.requires_grad = False
            p.grad = None
        for p in layer.router.parameters():
            p.requires_grad = True
    return layers
