"""Frozen projections augmented by routed low-rank expert deltas.

A mixer layer computes ``W x (+ b) + sum_e w_e(x) * delta_e(x)`` where the
sum runs over the experts selected for each token. Experts only run on the
rows that selected them, so hard and top-K routing are genuinely sparse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DimensionError
from .lora import LoraConfig, LoraExpert, expert_forward, init_expert
from .numerics import Tensor
from .routing import DEFAULT_TOP_K, Router, RoutingDistribution, init_router, route


class FrozenProjection:
    """A linear map whose weight and bias never receive gradients."""

    def __init__(self, weight, bias=None, name: str = ""):
        self._weight = Tensor(weight, requires_grad=False)
        self._bias = None if bias is None else Tensor(bias, requires_grad=False)
        if self._bias is not None and self._bias.shape != (self._weight.shape[0],):
            raise DimensionError(f"bias shape {self._bias.shape} does not match weight {self._weight.shape}")
        self.name = name

    @property
    def W(self) -> Tensor:
        return self._weight

    @property
    def bias(self) -> Tensor | None:
        return self._bias

    @property
    def d_in(self) -> int:
        return self._weight.shape[1]

    @property
    def d_out(self) -> int:
        return self._weight.shape[0]

    def __call__(self, x) -> Tensor:
        return nx.linear(x, self._weight, self._bias)

    def __repr__(self) -> str:
        return f"FrozenProjection({self.name!r}, {self.d_out}x{self.d_in})"


@dataclass
class MixerLayer:
    base: FrozenProjection
    experts: list[LoraExpert]
    router: Router

    def __post_init__(self):
        if not self.experts:
            raise ConfigurationError(f"{self.name}: a mixer layer needs at least one expert")
        ranks = {e.rank for e in self.experts}
        if len(ranks) != 1:
            raise ConfigurationError(f"{self.name}: experts disagree on rank {sorted(ranks)}")
        for i, e in enumerate(self.experts):
            if e.expert_id != i:
                raise ConfigurationError(f"{self.name}: expert ids must be 0..E-1, slot {i} holds {e.expert_id}")
            if (e.d_in, e.d_out) != (self.base.d_in, self.base.d_out):
                raise DimensionError(
                    f"{self.name}: expert {i} is {e.d_out}x{e.d_in}, base is {self.base.d_out}x{self.base.d_in}")
        if self.router.num_experts != len(self.experts):
            raise ConfigurationError(
                f"{self.name}: router scores {self.router.num_experts} experts, layer has {len(self.experts)}")

    @property
    def name(self) -> str:
        return self.base.name

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def rank(self) -> int:
        return self.experts[0].rank

    def expert_parameters(self, ids: Iterable[int] | None = None) -> list[Tensor]:
        ids = range(self.num_experts) if ids is None else ids
        return [p for i in ids for p in self.experts[i].parameters()]

    def __call__(self, x, domain_id=None, training: bool = False, rng=None, mode: str | None = None,
                 top_k: int | None = None):
        return mixer_forward(self, x, domain_id=domain_id, training=training, rng=rng, mode=mode, top_k=top_k)


def mixer_forward(layer: MixerLayer, x, domain_id=None, training: bool = False,
                  rng: np.random.Generator | None = None, mode: str | None = None,
                  top_k: int | None = None) -> tuple[Tensor, RoutingDistribution]:
    x = nx.as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"{layer.name}: mixer input must be (tokens, d_in), got {x.shape}")
    n = x.shape[0]
    y = layer.base(x)
    dist = route(layer.router, x, domain_id=domain_id, mode=mode, top_k=top_k)
    mask = dist.selection_mask()
    for e, expert in enumerate(layer.experts):
        rows = np.flatnonzero(mask[:, e])
        if rows.size == 0:
            continue
        w_col = dist.weights[:, e:e + 1]
        if rows.size == n:
            y = y + w_col * expert_forward(expert, x, training=training, rng=rng)
        else:
            delta = expert_forward(expert, nx.take_rows(x, rows), training=training, rng=rng)
            y = y + nx.place_rows(nx.take_rows(w_col, rows) * delta, rows, n)
    return y, dist


@dataclass
class RouterConfig:
    top_k: int = DEFAULT_TOP_K
    renormalize_topk: bool = False
    mode: str = "soft"
    shared_per_block: bool = False
    init_std: float = 0.01
    seed: int = 0


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def attach_mixers(model, cfg: LoraConfig, num_experts: int, router_cfg: RouterConfig | None = None,
                  seed: int = 0) -> list[MixerLayer]:
    """Wrap every projection of ``model`` that ``cfg`` targets, in model order.

    The host exposes ``named_projections()`` (ordered ``(name, module)``
    pairs) and ``set_projection(name, module)``.
    """
    router_cfg = router_cfg or RouterConfig()
    if num_experts < 1:
        raise ConfigurationError("num_experts must be positive")
    named = list(model.named_projections())
    matched = [(name, mod) for name, mod in named if cfg.matches(name)]
    if not matched:
        available = ", ".join(name for name, _ in named)
        raise ConfigurationError(f"no projection matches {cfg.target_projection_names}; available: {available}")
    already = [name for name, mod in matched if isinstance(mod, MixerLayer)]
    if already:
        raise ConfigurationError(f"already wrapped: {', '.join(already)}")

    shared: dict[str, Router] = {}
    layers = []
    for idx, (name, proj) in enumerate(matched):
        experts = [init_expert(cfg, proj.d_in, proj.d_out, seed=_derive_seed(seed, idx, e), expert_id=e)
                   for e in range(num_experts)]
        block = name.split(".", 1)[0]
        router = shared.get(block) if router_cfg.shared_per_block else None
        if router is None or router.d_in != proj.d_in:
            router = init_router(num_experts, proj.d_in, seed=_derive_seed(router_cfg.seed, seed, idx, 7919),
                                 top_k=router_cfg.top_k, renormalize_topk=router_cfg.renormalize_topk,
                                 mode=router_cfg.mode, std=router_cfg.init_std)
            if router_cfg.shared_per_block:
                shared[block] = router
        layer = MixerLayer(proj, experts, router)
        model.set_projection(name, layer)
        layers.append(layer)
    return layers
