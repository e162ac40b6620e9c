"""Low-rank expert parameterisation: delta(x) = (alpha / r) * B (A dropout(x))."""

from __future__ import annotations

import fnmatch
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DimensionError
from .numerics import Tensor

# Defaults follow the adapter configuration the method was evaluated with.
DEFAULT_RANK = 16
DEFAULT_ALPHA = 32.0
DEFAULT_DROPOUT = 0.1
RANK_SWEEP = (16, 32, 64, 128)


@dataclass
class LoraConfig:
    r: int = DEFAULT_RANK
    lora_alpha: float = DEFAULT_ALPHA
    dropout_p: float = DEFAULT_DROPOUT
    target_projection_names: list[str] = field(default_factory=lambda: ["q", "v"])
    init_scheme: str = "kaiming_uniform"

    def __post_init__(self):
        if not isinstance(self.r, (int, np.integer)) or self.r < 1:
            raise ConfigurationError(f"rank must be a positive integer, got {self.r!r}")
        if not (self.lora_alpha > 0 and math.isfinite(self.lora_alpha)):
            raise ConfigurationError(f"lora_alpha must be finite and positive, got {self.lora_alpha}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")
        if isinstance(self.target_projection_names, str):
            self.target_projection_names = [self.target_projection_names]
        if not self.target_projection_names:
            raise ConfigurationError("target_projection_names must not be empty")
        if self.init_scheme not in ("kaiming_uniform", "gaussian"):
            raise ConfigurationError(f"unknown init_scheme {self.init_scheme!r}")

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.r

    def matches(self, name: str) -> bool:
        """True when a projection name is targeted.

        Each entry may hold ``|``-separated alternatives; an alternative
        matches the full dotted name as a glob, or its last component exactly.
        """
        leaf = name.rsplit(".", 1)[-1]
        for entry in self.target_projection_names:
            for alt in entry.split("|"):
                alt = alt.strip()
                if alt and (alt == leaf or fnmatch.fnmatchcase(name, alt)):
                    return True
        return False

    def to_manifest(self) -> dict:
        """Adapter-config record using the familiar PEFT key names."""
        return {
            "base_model_name_or_path": None,
            "bias": "none",
            "fan_in_fan_out": False,
            "inference_mode": True,
            "init_lora_weights": True,
            "init_scheme": self.init_scheme,
            "layers_pattern": None,
            "layers_to_transform": None,
            "lora_alpha": self.lora_alpha,
            "lora_dropout": self.dropout_p,
            "modules_to_save": None,
            "peft_type": "LORA",
            "r": int(self.r),
            "revision": None,
            "target_modules": list(self.target_projection_names),
            "task_type": "SEQ_CLS",
        }

    @classmethod
    def from_manifest(cls, record: dict) -> "LoraConfig":
        return cls(
            r=int(record["r"]),
            lora_alpha=float(record["lora_alpha"]),
            dropout_p=float(record["lora_dropout"]),
            target_projection_names=list(record["target_modules"]),
            init_scheme=record.get("init_scheme", "kaiming_uniform"),
        )


@dataclass
class LoraExpert:
    A: Tensor  # (r, d_in)
    B: Tensor  # (d_out, r)
    lora_alpha: float = DEFAULT_ALPHA
    dropout_p: float = DEFAULT_DROPOUT
    expert_id: int = 0

    def __post_init__(self):
        r, d_in = self.A.shape
        d_out, r_b = self.B.shape
        if r != r_b:
            raise DimensionError(f"A shape {self.A.shape} and B shape {self.B.shape} disagree on rank")
        _check_rank(r, d_in, d_out)

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def scaling(self) -> float:
        return self.lora_alpha / self.rank

    @property
    def num_parameters(self) -> int:
        return self.rank * (self.d_in + self.d_out)

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def dense_delta(self) -> np.ndarray:
        """s * B A materialised; for oracles and inspection only."""
        return self.scaling * (self.B.data @ self.A.data)

    def copy(self) -> "LoraExpert":
        return LoraExpert(
            A=Tensor(self.A.data.copy(), requires_grad=self.A.requires_grad),
            B=Tensor(self.B.data.copy(), requires_grad=self.B.requires_grad),
            lora_alpha=self.lora_alpha,
            dropout_p=self.dropout_p,
            expert_id=self.expert_id,
        )


def _check_rank(r: int, d_in: int, d_out: int) -> None:
    limit = min(d_in, d_out)
    if r > limit:
        raise ConfigurationError(f"rank {r} exceeds min(d_in, d_out) = {limit}")
    if r > limit / 2:
        warnings.warn(f"rank {r} is not small relative to min(d_in, d_out) = {limit}", stacklevel=3)


def init_expert(cfg: LoraConfig, d_in: int, d_out: int, seed: int, expert_id: int = 0) -> LoraExpert:
    """Fresh expert with B = 0, so its delta is exactly zero until B moves.

    ``kaiming_uniform`` draws A from U(-1/sqrt(d_in), 1/sqrt(d_in)), the
    bound Kaiming-uniform gives with negative slope sqrt(5); ``gaussian``
    uses N(0, 1/r).
    """
    if d_in < 1 or d_out < 1:
        raise ConfigurationError(f"dimensions must be positive, got d_in={d_in}, d_out={d_out}")
    _check_rank(cfg.r, d_in, d_out)
    rng = np.random.default_rng(seed)
    dtype = nx.get_default_dtype()
    if cfg.init_scheme == "kaiming_uniform":
        bound = 1.0 / math.sqrt(d_in)
        a = rng.uniform(-bound, bound, size=(cfg.r, d_in))
    else:
        a = rng.normal(0.0, 1.0 / math.sqrt(cfg.r), size=(cfg.r, d_in))
    return LoraExpert(
        A=Tensor(a.astype(dtype), requires_grad=True),
        B=Tensor(np.zeros((d_out, cfg.r), dtype=dtype), requires_grad=True),
        lora_alpha=cfg.lora_alpha,
        dropout_p=cfg.dropout_p,
        expert_id=expert_id,
    )


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout with a constant keep mask."""
    if p <= 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep


def expert_forward(e: LoraExpert, x: Tensor, training: bool = False,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Delta term only: s * B (A x~), never forming B A."""
    x = nx.as_tensor(x)
    if x.shape[-1] != e.d_in:
        raise DimensionError(f"expert {e.expert_id}: input shape {x.shape} but A has shape {e.A.shape}")
    if training:
        x = dropout(x, e.dropout_p, rng)
    h = nx.matmul(x, nx.transpose(e.A))
    return nx.matmul(h, nx.transpose(e.B)) * e.scaling
