"""Synthetic multi-domain classification tasks and a toy transformer host.

Each domain draws its tokens from its own contiguous alphabet of the shared
vocabulary (so a token's identity reveals its domain, as vocabulary does for
real task families) and labels them with one rule. Rules see *values*: a
token's position inside its domain alphabet.

Rules, for a sequence of values ``v`` of length T:

token-sum-parity
    ``sum(v) mod 2``. Sequences hold 0, 1 or 2 odd values (1 twice as
    likely), which keeps labels balanced and the rule learnable.
majority-class
    1 when most of the first ``MAJORITY_WINDOW`` values are odd. The rest of
    the sequence is filled so the total odd count is always T/2, which hides
    the label from bag-of-token statistics.
first-token-copy
    ``v[0]``.
max-position
    Quarter of the sequence holding the first maximal value. Generated
    sequences carry a unique maximum.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, SpecError, StreamError
from .numerics import Tensor

RULES = ("token-sum-parity", "majority-class", "first-token-copy", "max-position")
DEFAULT_VOCAB = 16
DEFAULT_SEQ_LEN = 12
MAJORITY_WINDOW = 5
NUM_CLASSES = 4


# ---------------------------------------------------------------------------
# rules
# ---------------------------------------------------------------------------

def rule_label(rule: str, values: Sequence[int]) -> int:
    v = np.asarray(values, dtype=np.int64)
    if rule == "token-sum-parity":
        return int(v.sum() % 2)
    if rule == "majority-class":
        window = v[:MAJORITY_WINDOW] % 2
        return int(2 * window.sum() > window.size)
    if rule == "first-token-copy":
        return int(v[0])
    if rule == "max-position":
        pos = int(np.argmax(v))
        return pos * 4 // v.size
    raise SpecError(f"unknown rule {rule!r}")


def rule_num_classes(rule: str, alphabet_size: int) -> int:
    if rule in ("token-sum-parity", "majority-class"):
        return 2
    if rule == "first-token-copy":
        return alphabet_size
    if rule == "max-position":
        return 4
    raise SpecError(f"unknown rule {rule!r}")


def _sample_values(rule: str, alphabet_size: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    half = alphabet_size // 2
    if rule == "token-sum-parity":
        n_odd = int(rng.choice([0, 1, 1, 2]))
        odd = np.zeros(seq_len, dtype=np.int64)
        odd[rng.choice(seq_len, n_odd, replace=False)] = 1
        return 2 * rng.integers(0, half, seq_len) + odd
    if rule == "majority-class":
        w = MAJORITY_WINDOW
        window = rng.integers(0, 2, w)
        rest_odd = seq_len // 2 - int(window.sum())
        rest = np.array([1] * rest_odd + [0] * (seq_len - w - rest_odd), dtype=np.int64)
        odd = np.concatenate([window, rng.permutation(rest)])
        return 2 * rng.integers(0, half, seq_len) + odd
    if rule == "first-token-copy":
        return rng.integers(0, alphabet_size, seq_len)
    if rule == "max-position":
        values = rng.integers(0, alphabet_size - 1, seq_len)
        values[rng.integers(0, seq_len)] = alphabet_size - 1
        return values
    raise SpecError(f"unknown rule {rule!r}")


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledSample:
    tokens: tuple[int, ...]
    label: int
    domain_id: int

    def to_record(self) -> dict:
        return {"tokens": list(self.tokens), "label": self.label, "domain_id": self.domain_id}

    @classmethod
    def from_record(cls, rec: dict) -> "LabeledSample":
        return cls(tuple(int(t) for t in rec["tokens"]), int(rec["label"]), int(rec["domain_id"]))


@dataclass
class DomainSpec:
    domain_id: int
    rule: str
    vocab: int = DEFAULT_VOCAB
    seq_len: int = DEFAULT_SEQ_LEN
    seed: int = 0
    alphabet_size: int = 4

    def __post_init__(self):
        if self.rule not in RULES:
            raise SpecError(f"unknown rule {self.rule!r}; choose from {RULES}")
        if self.alphabet_size < 2 or self.alphabet_size % 2:
            raise SpecError("alphabet_size must be an even number >= 2")
        if self.offset + self.alphabet_size > self.vocab:
            raise SpecError(f"domain {self.domain_id} alphabet exceeds vocab {self.vocab}")
        if self.rule == "max-position" and self.seq_len < 4:
            raise SpecError("max-position needs seq_len >= 4")
        if self.rule == "majority-class" and not (self.seq_len >= 2 * MAJORITY_WINDOW and self.seq_len % 2 == 0):
            raise SpecError(f"majority-class needs an even seq_len >= {2 * MAJORITY_WINDOW}")

    @property
    def offset(self) -> int:
        return self.domain_id * self.alphabet_size

    def values(self, tokens: Sequence[int]) -> np.ndarray:
        return np.asarray(tokens, dtype=np.int64) - self.offset

    def label(self, tokens: Sequence[int]) -> int:
        return rule_label(self.rule, self.values(tokens))

    def sample(self, rng: np.random.Generator) -> LabeledSample:
        values = _sample_values(self.rule, self.alphabet_size, self.seq_len, rng)
        tokens = tuple(int(t) for t in values + self.offset)
        return LabeledSample(tokens, rule_label(self.rule, values), self.domain_id)

    def to_dict(self) -> dict:
        return {"domain_id": self.domain_id, "rule": self.rule, "vocab": self.vocab,
                "seq_len": self.seq_len, "seed": self.seed, "alphabet_size": self.alphabet_size}


def default_specs(seed: int = 0, vocab: int = DEFAULT_VOCAB, seq_len: int = DEFAULT_SEQ_LEN) -> list[DomainSpec]:
    return [DomainSpec(d, rule, vocab, seq_len, seed) for d, rule in enumerate(RULES)]


@dataclass
class Splits:
    train: list[LabeledSample]
    val: list[LabeledSample]
    test: list[LabeledSample]

    def __getitem__(self, name: str) -> list[LabeledSample]:
        if name not in ("train", "val", "test"):
            raise KeyError(name)
        return getattr(self, name)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("train", "val", "test"):
            write_jsonl(directory / f"{name}.jsonl", self[name])

    @classmethod
    def load(cls, directory: str | Path) -> "Splits":
        directory = Path(directory)
        return cls(*(read_jsonl(directory / f"{name}.jsonl") for name in ("train", "val", "test")))


def write_jsonl(path: str | Path, samples: Sequence[LabeledSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_record(), separators=(",", ":")) + "\n")


def read_jsonl(path: str | Path) -> list[LabeledSample]:
    with open(path, encoding="utf-8") as fh:
        return [LabeledSample.from_record(json.loads(line)) for line in fh if line.strip()]


def generate_dataset(specs: Sequence[DomainSpec], n_per_domain: int, split_seed: int,
                     fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> Splits:
    """Balanced, disjoint train/val/test splits; token sequences are unique per domain."""
    if not specs:
        raise SpecError("at least one domain spec is required")
    if n_per_domain < 10:
        raise SpecError("n_per_domain must be at least 10")
    ids = [s.domain_id for s in specs]
    if len(set(ids)) != len(ids):
        raise SpecError("duplicate domain ids")
    rules = [s.rule for s in specs]
    if len(set(rules)) != len(rules):
        raise SpecError(f"rule collision across domains: {rules}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SpecError("split fractions must sum to 1")

    n_train = int(round(fractions[0] * n_per_domain))
    n_val = int(round(fractions[1] * n_per_domain))
    split_rng = np.random.default_rng(split_seed)
    out = Splits([], [], [])
    for spec in specs:
        rng = np.random.default_rng([spec.seed, spec.domain_id])
        seen: set[tuple[int, ...]] = set()
        pool: list[LabeledSample] = []
        attempts = 0
        while len(pool) < n_per_domain:
            attempts += 1
            if attempts > 50 * n_per_domain:
                raise SpecError(f"domain {spec.domain_id}: cannot draw {n_per_domain} distinct sequences")
            s = spec.sample(rng)
            if s.tokens not in seen:
                seen.add(s.tokens)
                pool.append(s)
        order = split_rng.permutation(n_per_domain)
        out.train.extend(pool[i] for i in order[:n_train])
        out.val.extend(pool[i] for i in order[n_train:n_train + n_val])
        out.test.extend(pool[i] for i in order[n_train + n_val:])
    return out


def by_domain(samples: Sequence[LabeledSample]) -> dict[int, list[LabeledSample]]:
    groups: dict[int, list[LabeledSample]] = {}
    for s in samples:
        groups.setdefault(s.domain_id, []).append(s)
    return dict(sorted(groups.items()))


def balanced_subset(samples: Sequence[LabeledSample], n: int, seed: int) -> list[LabeledSample]:
    """``n`` samples split evenly over the domains present (first-come remainder)."""
    groups = by_domain(samples)
    rng = np.random.default_rng(seed)
    per, extra = divmod(n, len(groups))
    out = []
    for i, (_, group) in enumerate(groups.items()):
        take = per + (1 if i < extra else 0)
        if take > len(group):
            raise StreamError(f"requested {take} samples from a domain with {len(group)}")
        out.extend(group[j] for j in rng.permutation(len(group))[:take])
    return out


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray       # (B, T) int
    labels: np.ndarray       # (B,)
    domain_ids: np.ndarray   # (B,)

    def __len__(self) -> int:
        return len(self.labels)


def make_batch(samples: Sequence[LabeledSample]) -> Batch:
    if not samples:
        raise StreamError("cannot batch zero samples")
    return Batch(np.array([s.tokens for s in samples], dtype=np.int64),
                 np.array([s.label for s in samples], dtype=np.int64),
                 np.array([s.domain_id for s in samples], dtype=np.int64))


def iter_batches(samples: Sequence[LabeledSample], batch_size: int) -> Iterator[Batch]:
    for i in range(0, len(samples), batch_size):
        yield make_batch(samples[i:i + batch_size])


def mixed_stream(samples: Sequence[LabeledSample], proportions: Sequence[float] | None, seed: int,
                 batch_size: int = 32, num_samples: int | None = None) -> Iterator[Batch]:
    """Deterministic multi-domain batch stream.

    Each draw picks a domain by ``proportions`` (indexed by sorted domain id;
    ``None`` means uniform) and takes the next sample from that domain's
    pool, reshuffled every time the pool is exhausted. Stops after
    ``num_samples`` draws, or never when it is ``None``.
    """
    groups = by_domain(samples)
    if not groups:
        raise StreamError("empty split")
    domains = list(groups)
    if proportions is None:
        proportions = [1.0 / len(domains)] * len(domains)
    proportions = np.asarray(proportions, dtype=np.float64)
    if proportions.shape != (len(domains),) or np.any(proportions < 0) or abs(proportions.sum() - 1) > 1e-9:
        raise StreamError(f"proportions must be {len(domains)} nonnegative values summing to 1")
    for d, p in zip(domains, proportions):
        if p > 0 and not groups[d]:
            raise StreamError(f"domain {d} has no samples")

    rng = np.random.default_rng(seed)
    cursors = {d: 0 for d in domains}
    orders = {d: rng.permutation(len(groups[d])) for d in domains}
    drawn = 0
    while num_samples is None or drawn < num_samples:
        size = batch_size if num_samples is None else min(batch_size, num_samples - drawn)
        picks = rng.choice(len(domains), size=size, p=proportions)
        chosen = []
        for k in picks:
            d = domains[k]
            if cursors[d] == len(groups[d]):
                orders[d] = rng.permutation(len(groups[d]))
                cursors[d] = 0
            chosen.append(groups[d][orders[d][cursors[d]]])
            cursors[d] += 1
        drawn += size
        yield make_batch(chosen)


# ---------------------------------------------------------------------------
# host model
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    vocab: int = DEFAULT_VOCAB
    seq_len: int = DEFAULT_SEQ_LEN
    d_model: int = 32
    n_heads: int = 2
    n_blocks: int = 2
    n_classes: int = NUM_CLASSES
    ffn_mult: int = 4
    pos_scale: float = 0.1
    ffn_bias_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class ToyModel:
    """Pre-norm transformer encoder with mean-pooled classification.

    Every linear map except the head is a named ``FrozenProjection``
    (``blk{i}.attn.{q,k,v,o}``, ``blk{i}.ffn.{up,down}``) and can be swapped
    for a mixer layer. The head is trained once on the bare base
    (``calibrate_head``) and then frozen with everything else.
    """

    def __init__(self, cfg: ModelConfig | None = None):
        from .mixer import FrozenProjection

        self.cfg = cfg = cfg or ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        dtype = nx.get_default_dtype()
        d, hidden = cfg.d_model, cfg.d_model * cfg.ffn_mult
        self.tok_emb = Tensor(rng.normal(0.0, 1.0, (cfg.vocab, d)).astype(dtype))
        self.pos_emb = Tensor((rng.normal(0.0, 1.0, (cfg.seq_len, d)) * cfg.pos_scale).astype(dtype))
        self._proj: dict[str, object] = {}
        for b in range(cfg.n_blocks):
            for p in "qkvo":
                self._proj[f"blk{b}.attn.{p}"] = FrozenProjection(
                    rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)).astype(dtype), name=f"blk{b}.attn.{p}")
            self._proj[f"blk{b}.ffn.up"] = FrozenProjection(
                rng.normal(0.0, 1.0 / math.sqrt(d), (hidden, d)).astype(dtype),
                rng.normal(0.0, cfg.ffn_bias_std, hidden).astype(dtype), name=f"blk{b}.ffn.up")
            self._proj[f"blk{b}.ffn.down"] = FrozenProjection(
                rng.normal(0.0, 1.0 / math.sqrt(hidden), (d, hidden)).astype(dtype), name=f"blk{b}.ffn.down")
        self.head_weight = Tensor(np.zeros((cfg.n_classes, d), dtype=dtype))
        self.head_bias = Tensor(np.zeros(cfg.n_classes, dtype=dtype))

    # -- projection registry ---------------------------------------------
    def named_projections(self):
        return list(self._proj.items())

    def set_projection(self, name: str, module) -> None:
        if name not in self._proj:
            raise KeyError(name)
        self._proj[name] = module

    def projection(self, name: str):
        return self._proj[name]

    def mixer_layers(self):
        from .mixer import MixerLayer

        return [m for m in self._proj.values() if isinstance(m, MixerLayer)]

    def base_projection(self, name: str):
        mod = self._proj[name]
        return getattr(mod, "base", mod)

    def architecture(self) -> list[tuple[str, int, int]]:
        return [(name, self.base_projection(name).d_out, self.base_projection(name).d_in) for name in self._proj]

    def frozen_arrays(self) -> dict[str, np.ndarray]:
        """Every base array (embeddings, projections, head), keyed by name."""
        out = {"tok_emb": self.tok_emb.data, "pos_emb": self.pos_emb.data,
               "head.weight": self.head_weight.data, "head.bias": self.head_bias.data}
        for name in self._proj:
            base = self.base_projection(name)
            out[f"{name}.weight"] = base.W.data
            if base.bias is not None:
                out[f"{name}.bias"] = base.bias.data
        return out

    # -- forward ------------------------------------------------------------
    def _apply(self, name: str, x: Tensor, ctx: dict, routing: dict) -> Tensor:
        mod = self._proj[name]
        if hasattr(mod, "router"):
            y, dist = mod(x, domain_id=ctx["domain"], training=ctx["training"], rng=ctx["rng"],
                          mode=ctx["mode"], top_k=ctx["top_k"])
            routing[name] = dist
            return y
        return mod(x)

    def features(self, tokens, domain_ids=None, mode: str | None = None, top_k: int | None = None,
                 training: bool = False, rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
        """Pooled representation fed to the head, plus per-layer routing."""
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2 or tokens.shape[1] != cfg.seq_len:
            raise ConfigurationError(f"tokens must be (batch, {cfg.seq_len}), got {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab:
            raise ConfigurationError(f"token ids must lie in [0, {cfg.vocab})")
        bsz, t = tokens.shape
        d, heads = cfg.d_model, cfg.n_heads
        dh = d // heads
        domain = None
        if domain_ids is not None:
            domain = np.repeat(np.broadcast_to(np.asarray(domain_ids, dtype=np.int64), (bsz,)), t)
        ctx = {"domain": domain, "training": training, "rng": rng, "mode": mode, "top_k": top_k}
        routing: dict = {}

        h = nx.embedding(self.tok_emb, tokens) + self.pos_emb  # (B, T, d)
        h = nx.reshape(h, (bsz * t, d))
        for b in range(cfg.n_blocks):
            a = nx.layer_norm(h)
            q = self._apply(f"blk{b}.attn.q", a, ctx, routing)
            k = self._apply(f"blk{b}.attn.k", a, ctx, routing)
            v = self._apply(f"blk{b}.attn.v", a, ctx, routing)

            def heads_first(z):
                return nx.transpose(nx.reshape(z, (bsz, t, heads, dh)), (0, 2, 1, 3))

            q, k, v = heads_first(q), heads_first(k), heads_first(v)
            scores = nx.matmul(q, nx.transpose(k)) * (1.0 / math.sqrt(dh))
            att = nx.matmul(nx.softmax(scores), v)  # (B, H, T, dh)
            att = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (bsz * t, d))
            h = h + self._apply(f"blk{b}.attn.o", att, ctx, routing)

            a = nx.layer_norm(h)
            up = nx.relu(self._apply(f"blk{b}.ffn.up", a, ctx, routing))
            h = h + self._apply(f"blk{b}.ffn.down", up, ctx, routing)
        pooled = nx.mean(nx.reshape(nx.layer_norm(h), (bsz, t, d)), axis=1)
        return pooled, routing

    def forward(self, tokens, domain_ids=None, mode: str | None = None, top_k: int | None = None,
                training: bool = False, rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
        pooled, routing = self.features(tokens, domain_ids, mode, top_k, training, rng)
        return nx.linear(pooled, self.head_weight, self.head_bias), routing

    __call__ = forward

    def predict(self, tokens, **kwargs) -> np.ndarray:
        with nx.no_grad():
            logits, _ = self.forward(tokens, **kwargs)
        return np.argmax(logits.data, axis=-1)


def calibrate_head(model: ToyModel, samples: Sequence[LabeledSample], steps: int = 1500, lr: float = 1e-2,
                   batch_size: int = 64, seed: int = 0, weight_decay: float = 0.01) -> None:
    """Fit only the classifier head on frozen base features, then freeze it again."""
    from .training import AdamW

    batch = make_batch(list(samples))
    with nx.no_grad():
        feats = np.concatenate([
            model.features(batch.tokens[i:i + 512])[0].data for i in range(0, len(batch), 512)])
    w = Tensor(model.head_weight.data.copy(), requires_grad=True)
    b = Tensor(model.head_bias.data.copy(), requires_grad=True)
    opt = AdamW([w, b], lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.integers(0, len(batch), batch_size)
        w.grad = b.grad = None
        loss = nx.cross_entropy(nx.linear(Tensor(feats[idx]), w, b), batch.labels[idx])
        loss.backward()
        opt.step()
    model.head_weight = Tensor(w.data.copy())
    model.head_bias = Tensor(b.data.copy())
