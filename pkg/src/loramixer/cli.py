"""Command-line entry point: ``loramixer <command> [flags]``.

Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage error.
Every command that writes outputs also writes ``run_manifest.json`` next to
them, atomically, once the command has finished.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import tempfile
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import AnchorError, ConfigurationError, LoraMixerError
from .losses import PreservationAnchor
from .mixer import attach_mixers
from .workbench import Splits, ToyModel, calibrate_head, default_specs, generate_dataset

MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    """Bad flags or flag combinations; reported with exit status 2."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def load_preset(config_path: str | None):
    from .experiments import WorkbenchPreset
    from .training import PhaseConfig

    preset = WorkbenchPreset()
    if not config_path:
        return preset
    try:
        doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {config_path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    known = {"n_per_domain", "head_steps", "model", "lora", "router", "expert_phase", "router_phase"}
    unknown = set(doc) - known
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        if "n_per_domain" in doc:
            preset.n_per_domain = int(doc["n_per_domain"])
        if "head_steps" in doc:
            preset.head_steps = int(doc["head_steps"])
        if "model" in doc:
            preset.model = replace(preset.model, **doc["model"])
        if "lora" in doc:
            preset.lora = replace(preset.lora, **doc["lora"])
        if "router" in doc:
            preset.router = replace(preset.router, **doc["router"])
        for key in ("expert_phase", "router_phase"):
            if key in doc:
                cur = getattr(preset, key).to_dict()
                upd = dict(doc[key])
                if "loss_weights" in upd:
                    cur["loss_weights"] = {**cur["loss_weights"], **upd.pop("loss_weights")}
                cur.update(upd)
                setattr(preset, key, PhaseConfig(**cur))
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}") from None
    return preset


def apply_overrides(preset, args) -> None:
    from .training import PhaseConfig

    if getattr(args, "seed", None) is not None:
        preset.model = replace(preset.model, seed=args.seed)
    phase = getattr(args, "phase", None) or getattr(args, "default_phase", "expert_phase")
    target = preset.expert_phase if phase == "expert_phase" else preset.router_phase
    d = target.to_dict()
    for flag, key in (("steps", "steps"), ("lr", "learning_rate")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    lw = d["loss_weights"]
    for flag, key in (("alpha", "alpha"), ("lam", "lam"), ("beta", "beta")):
        v = getattr(args, flag, None)
        if v is not None:
            lw[key] = v
    topk = getattr(args, "topk", None)
    if topk is not None and topk != "soft" and args.command != "eval":
        d["top_k_eval"] = int(topk)
    setattr(preset, phase, PhaseConfig(**d))
    seed = preset.model.seed
    preset.expert_phase.seed = seed
    preset.router_phase.seed = seed
    preset.router = replace(preset.router, seed=seed)


# ---------------------------------------------------------------------------
# I/O helpers
# ---------------------------------------------------------------------------

def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json_lines(path: Path, records) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} {path} is not a directory")
    return p


def require_fresh(path: str) -> Path:
    p = Path(path)
    occupied = any(p.iterdir()) if p.is_dir() else p.exists()
    if occupied:
        raise UsageError(f"output {path} already exists and is not empty")
    return p


def load_splits(data_dir: Path) -> Splits:
    for name in ("train", "val", "test"):
        if not (data_dir / f"{name}.jsonl").is_file():
            raise UsageError(f"{data_dir} lacks {name}.jsonl")
    return Splits.load(data_dir)


def parse_topk(value: str):
    if value == "soft":
        return "soft"
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("--topk takes a positive integer or 'soft'") from None
    if k < 1:
        raise argparse.ArgumentTypeError("--topk must be positive")
    return k


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, preset) -> dict:
    out = require_fresh(args.out)
    seed = preset.model.seed
    specs = default_specs(seed, preset.model.vocab, preset.model.seq_len)
    splits = generate_dataset(specs, preset.n_per_domain, seed)
    splits.save(out)
    atomic_write_text(out / "specs.json", json.dumps([s.to_dict() for s in specs], indent=2) + "\n")
    return {"outputs": [str(out)], "counts": {k: len(splits[k]) for k in ("train", "val", "test")}}


def cmd_train_experts(args, preset) -> dict:
    from .adapters import export_bundle
    from .training import evaluate, save_checkpoint, train_experts

    data = require_dir(args.data, "data directory")
    out = require_fresh(args.out)
    splits = load_splits(data)
    num_e = len({s.domain_id for s in splits.train})
    model = ToyModel(preset.model)
    calibrate_head(model, splits.train, steps=preset.head_steps, seed=preset.model.seed)
    attach_mixers(model, preset.lora, num_e, preset.router, seed=preset.model.seed)
    result = train_experts(model, splits.train, preset.expert_phase)
    val = evaluate(model, splits.val, oracle_domain=True)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint", meta={"phase1_complete": True, "preset": preset.to_dict(),
                                                     "phase1_val": val.to_dict()})
    for e in range(num_e):
        export_bundle(model, e, out / "bundles" / f"expert_{e}")
    write_json_lines(out / "train_log.jsonl", result.log)
    atomic_write_text(out / "val_metrics.json", json.dumps(val.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps({"phase1_val_accuracy": val.accuracy}, sort_keys=True))
    return {"outputs": [str(out)]}


def _load_trained(path: str):
    from .training import load_checkpoint

    ckpt = Path(path)
    if not (ckpt / "manifest").is_file():
        raise UsageError(f"{path} is not a checkpoint directory")
    return load_checkpoint(ckpt)


def cmd_train_router(args, preset) -> dict:
    from .training import evaluate, expert_map, save_checkpoint, train_router

    data = require_dir(args.data, "data directory")
    out = require_fresh(args.out)
    splits = load_splits(data)
    ckpt = Path(args.checkpoint) if args.checkpoint else None
    if ckpt is None or not (ckpt / "manifest").is_file():
        raise AnchorError("no phase-1 expert checkpoint given; the preservation anchor cannot be taken")
    model, meta = _load_trained(str(ckpt))
    if not meta.get("phase1_complete") or not model.mixer_layers():
        raise AnchorError(f"{ckpt} does not hold phase-1 experts; the preservation anchor cannot be taken")
    anchor = PreservationAnchor.snapshot(expert_map(model))
    result = train_router(model, splits.train, preset.router_phase, anchor)
    k = preset.router_phase.top_k_eval
    val = evaluate(model, splits.val, k)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "checkpoint", meta={"phase1_complete": True, "router_trained": True,
                                                     "preset": preset.to_dict()})
    write_json_lines(out / "train_log.jsonl", result.log)
    atomic_write_text(out / "val_metrics.json", json.dumps(val.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps({"val_pooled_accuracy": val.pooled_accuracy, "top_k": k}, sort_keys=True))
    return {"outputs": [str(out)]}


def _eval_report(args):
    from .training import evaluate

    data = require_dir(args.data, "data directory")
    splits = load_splits(data)
    model, _ = _load_trained(args.checkpoint)
    top_k = None if args.topk == "soft" else (3 if args.topk is None else args.topk)
    if model.mixer_layers() and top_k is not None:
        num_e = model.mixer_layers()[0].num_experts
        if top_k > num_e:
            raise ConfigurationError(f"--topk {top_k} exceeds the number of experts ({num_e})")
    return evaluate(model, splits[args.split], top_k)


def cmd_eval(args, preset) -> dict:
    report = _eval_report(args)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / "metrics.json", text)
        return {"outputs": [str(out / "metrics.json")]}
    return {"outputs": []}


def cmd_inspect_load(args, preset) -> dict:
    report = _eval_report(args)
    rows = ["layer\texpert\tp_bar\tf_bar\tmean_entropy\trouting_variance"]
    for name, stats in report.layer_stats.items():
        h = float(stats.mean_entropy.data)
        for e in range(stats.num_experts):
            rows.append(f"{name}\t{e}\t{stats.p_bar.data[e]:.6f}\t{stats.f_bar[e]:.6f}\t{h:.6f}\t"
                        f"{stats.routing_variance:.6f}")
    text = "\n".join(rows) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / "load.tsv", text)
        return {"outputs": [str(out / "load.tsv")]}
    return {"outputs": []}


def cmd_adapter(args, preset) -> dict:
    from .adapters import compose, export_bundle, import_bundle
    from .training import save_checkpoint

    if args.action == "export":
        out = require_fresh(args.out)
        model, _ = _load_trained(args.checkpoint)
        export_bundle(model, args.expert_id, out)
        return {"outputs": [str(out)]}
    if args.action == "import":
        out = require_fresh(args.out)
        model, meta = _load_trained(args.checkpoint)
        report = import_bundle(args.bundle[0], model, args.slot)
        print(json.dumps(report.to_dict(), sort_keys=True))
        if report.overall == "incompatible":
            raise ConfigurationError("bundle is incompatible with the model; nothing installed")
        save_checkpoint(model, out, meta=meta)
        return {"outputs": [str(out)], "compat": report.to_dict()}
    # compose
    out = require_fresh(args.out)
    model, _ = _load_trained(args.checkpoint)
    for name, _ in model.named_projections():
        model.set_projection(name, model.base_projection(name))
    compose(args.bundle, model, preset.router, seed=preset.model.seed)
    save_checkpoint(model, out, meta={"phase1_complete": True, "composed_from": list(args.bundle),
                                      "preset": preset.to_dict()})
    return {"outputs": [str(out)]}


def cmd_verify(args, preset) -> dict:
    from .verify import run_suite

    results = run_suite(seed=preset.model.seed)
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if failed:
        raise LoraMixerError(f"verification failed: {', '.join(failed)}")
    return {"outputs": [], "checks": len(results)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-experts": cmd_train_experts,
    "train-router": cmd_train_router,
    "eval": cmd_eval,
    "inspect-load": cmd_inspect_load,
    "adapter": cmd_adapter,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (preset keys)")
    common.add_argument("--seed", type=int, help="seed for every random draw")
    common.add_argument("--phase", choices=("expert_phase", "router_phase"),
                        help="phase that --steps/--lr/--alpha/--lambda/--beta apply to")
    common.add_argument("--steps", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--alpha", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--beta", type=float)
    common.add_argument("--topk", type=parse_topk, help="top-K for evaluation, or 'soft'")

    parser = argparse.ArgumentParser(prog="loramixer", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write train/val/test JSONL splits")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-experts", parents=[common], help="phase 1: hard-routed expert training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(default_phase="expert_phase")

    p = sub.add_parser("train-router", parents=[common], help="phase 2: soft router training")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="phase-1 checkpoint directory")
    p.add_argument("--out", required=True)
    p.set_defaults(default_phase="router_phase")

    for name, help_ in (("eval", "accuracy per domain and pooled"),
                        ("inspect-load", "per-layer expert load table")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("train", "val", "test"), default="test")
        p.add_argument("--out")

    p = sub.add_parser("adapter", parents=[common], help="bundle export, import and composition")
    p.add_argument("action", choices=("export", "import", "compose"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--expert-id", type=int, default=0)
    p.add_argument("--bundle", action="append", default=[])
    p.add_argument("--slot", type=int, default=0)

    sub.add_parser("verify", parents=[common], help="run the invariant and gradient checks")
    return parser


def _manifest_dir(args) -> Path | None:
    out = getattr(args, "out", None)
    if not out:
        return None
    p = Path(out)
    return p if p.is_dir() else p.parent


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(argv)  # exits 2 on unknown flags
    started = time.time()
    status, error, info, preset = 0, None, {}, None
    try:
        if args.command == "adapter":
            if args.action in ("import",) and len(args.bundle) != 1:
                raise UsageError("adapter import takes exactly one --bundle")
            if args.action == "compose" and not args.bundle:
                raise UsageError("adapter compose needs at least one --bundle")
        preset = load_preset(args.config)
        apply_overrides(preset, args)
        info = COMMANDS[args.command](args, preset) or {}
    except UsageError as exc:
        print(f"loramixer: error: {exc}", file=sys.stderr)
        return 2
    except (LoraMixerError, OSError, ValueError, KeyError) as exc:
        status, error = 1, f"{type(exc).__name__}: {exc}"
        print(f"loramixer: {error}", file=sys.stderr)
        if os.environ.get("LORAMIXER_DEBUG"):
            traceback.print_exc()
    mdir = _manifest_dir(args)
    if mdir is not None and mdir.exists():
        manifest = {
            "command": args.command,
            "argv": argv,
            "config": None if preset is None else preset.to_dict(),
            "seed": args.seed if preset is None else preset.model.seed,
            "engine_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "inputs": {k: getattr(args, k) for k in ("data", "checkpoint", "bundle", "config") if getattr(args, k, None)},
            "outputs": info.get("outputs", []),
            "started": started,
            "wall_clock_seconds": time.time() - started,
            "exit_status": status,
            "error": error,
        }
        atomic_write_text(mdir / MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
