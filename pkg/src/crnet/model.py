"""Cross-layer low-rank residual transformer and its full-rank baseline.

Layer ``l`` of a LLaMA-style block has seven linear slots (``Position``).
In the first layer each slot is a dense matrix. From layer 2 on, the slot
output is the previous layer's output at the same slot, scaled by
``tau(beta)``, plus a rank-``r_l`` correction::

    Y_l^P = tau(beta_l^P) * Y_{l-1}^P + (X_l^P @ A_l^P) @ B_l^P

The block itself (no normalization, no rotary embedding)::

    Att_l  = softmax(Y^Q Y^K^T / sqrt(h / heads)) Y^V  -> O projection, + X_l
    X_l+1  = down(silu(gate(Att_l)) * up(Att_l)) + Att_l

Parameters live in one ordered ``dict`` of named float64 arrays so that
gradients, optimizer state and checkpoints share a single canonical order.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import numpy as np

from ._validation import ShapeError, check_tokens
from .tensor_core import silu, softmax_rows

__all__ = [
    "Position",
    "POSITIONS",
    "ModelConfig",
    "CrNetParams",
    "ResidualLayer",
    "ActivationCache",
    "LayerActivations",
    "tau",
    "init_params",
    "linear_cross",
    "forward",
    "forward_full_rank",
    "param_group",
]


class Position(str, enum.Enum):
    Q = "Q"
    K = "K"
    V = "V"
    O = "O"  # noqa: E741
    GATE = "gate"
    UP = "up"
    DOWN = "down"

    def __str__(self) -> str:
        return self.value


POSITIONS: tuple[Position, ...] = tuple(Position)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    hidden: int
    ffn_hidden: int
    heads: int = 1
    ranks: tuple[int, ...] = ()
    vocab: int = 256
    seq_len: int = 64
    epsilon: float = 1e-6
    arch: str = "crnet"
    causal: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.hidden < 1 or self.ffn_hidden < 1 or self.vocab < 1 or self.seq_len < 1:
            raise ValueError("dimensions must be positive")
        if self.heads < 1 or self.hidden % self.heads:
            raise ValueError(f"heads={self.heads} must divide hidden={self.hidden}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.arch not in ("crnet", "full_rank"):
            raise ValueError(f"unknown arch {self.arch!r}")
        if self.arch == "crnet":
            if len(self.ranks) != self.n_layers - 1:
                raise ValueError(
                    f"ranks must list one rank per layer 2..L ({self.n_layers - 1}), got {len(self.ranks)}"
                )
            cap = min(self.hidden, self.ffn_hidden)
            for i, r in enumerate(self.ranks, start=2):
                if not 1 <= r < cap:
                    raise ValueError(f"rank {r} for layer {i} outside [1, {cap})")

    @classmethod
    def uniform(cls, n_layers: int, hidden: int, ffn_hidden: int, rank: int, **kw) -> "ModelConfig":
        return cls(n_layers=n_layers, hidden=hidden, ffn_hidden=ffn_hidden,
                   ranks=(rank,) * (n_layers - 1), **kw)

    def rank(self, layer: int) -> int:
        return self.ranks[layer - 2]

    def dims(self, pos: Position) -> tuple[int, int]:
        """(input dim, output dim) of a linear slot."""
        if pos in (Position.GATE, Position.UP):
            return self.hidden, self.ffn_hidden
        if pos is Position.DOWN:
            return self.ffn_hidden, self.hidden
        return self.hidden, self.hidden

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranks"] = list(self.ranks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["ranks"] = tuple(d.get("ranks", ()))
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def tau(beta: float, epsilon: float) -> float:
    """Effective cross-layer scale ``sign(beta) * (|beta| + epsilon)`` with sign(0) = +1."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    sign = -1.0 if beta < 0 else 1.0
    return sign * (abs(beta) + epsilon)


def _name(kind: str, layer: int, pos: Position) -> str:
    return f"{kind}{layer}.{pos.value}"


def param_group(name: str) -> str:
    """Group label for a parameter name: embed, lm_head, W, A, B or beta."""
    if name in ("embed", "lm_head"):
        return name
    if name.startswith("beta"):
        return "beta"
    return name[0]


def canonical_names(cfg: ModelConfig) -> list[str]:
    """Parameter names in checkpoint order."""
    names = ["embed"]
    names += [_name("W", 1, p) for p in POSITIONS]
    for layer in range(2, cfg.n_layers + 1):
        if cfg.arch == "crnet":
            for p in POSITIONS:
                names += [_name("A", layer, p), _name("B", layer, p), _name("beta", layer, p)]
        else:
            names += [_name("W", layer, p) for p in POSITIONS]
    names.append("lm_head")
    return names


@dataclass(frozen=True)
class ResidualLayer:
    """Read-only view of the low-rank factors of one layer ``l >= 2``."""

    layer: int
    A: dict
    B: dict
    beta: dict


@dataclass
class CrNetParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    # accessors -----------------------------------------------------------
    @property
    def embed(self) -> np.ndarray:
        return self.tensors["embed"]

    @property
    def lm_head(self) -> np.ndarray:
        return self.tensors["lm_head"]

    @property
    def first_layer(self) -> dict[Position, np.ndarray]:
        return {p: self.tensors[_name("W", 1, p)] for p in POSITIONS}

    @property
    def residual_layers(self) -> list[ResidualLayer]:
        if self.config.arch != "crnet":
            return []
        return [
            ResidualLayer(
                layer=l,
                A={p: self.A(l, p) for p in POSITIONS},
                B={p: self.B(l, p) for p in POSITIONS},
                beta={p: self.beta(l, p) for p in POSITIONS},
            )
            for l in range(2, self.config.n_layers + 1)
        ]

    def W(self, layer: int, pos: Position) -> np.ndarray:
        return self.tensors[_name("W", layer, pos)]

    def A(self, layer: int, pos: Position) -> np.ndarray:
        return self.tensors[_name("A", layer, pos)]

    def B(self, layer: int, pos: Position) -> np.ndarray:
        return self.tensors[_name("B", layer, pos)]

    def beta(self, layer: int, pos: Position) -> float:
        return float(self.tensors[_name("beta", layer, pos)][0, 0])

    def set_beta(self, layer: int, pos: Position, value: float) -> None:
        self.tensors[_name("beta", layer, pos)] = np.array([[float(value)]])

    def tau(self, layer: int, pos: Position) -> float:
        return tau(self.beta(layer, pos), self.config.epsilon)

    # bulk helpers ---------------------------------------------------------
    def names(self) -> list[str]:
        return list(self.tensors)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.tensors.items())

    def copy(self) -> "CrNetParams":
        return CrNetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def from_vector(self, vec: np.ndarray) -> "CrNetParams":
        out, at = {}, 0
        for k, v in self.tensors.items():
            out[k] = np.asarray(vec[at:at + v.size], dtype=np.float64).reshape(v.shape).copy()
            at += v.size
        if at != vec.size:
            raise ShapeError(f"vector of length {vec.size} does not match {at} parameters")
        return CrNetParams(self.config, out)

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(cfg: ModelConfig, seed: int | None = None) -> CrNetParams:
    """Seeded initialization.

    Dense and ``A`` matrices are ``N(0, 1/sqrt(fan_in))``, ``B`` starts at
    zero, every ``beta`` at 1.0, embedding and LM head ``N(0, 0.02)``.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    tensors: dict[str, np.ndarray] = {}
    for name in canonical_names(cfg):
        if name == "embed":
            tensors[name] = rng.normal(0.0, 0.02, size=(cfg.vocab, cfg.hidden))
        elif name == "lm_head":
            tensors[name] = rng.normal(0.0, 0.02, size=(cfg.hidden, cfg.vocab))
        else:
            kind = param_group(name)
            pos = Position(name.split(".", 1)[1])
            d_in, d_out = cfg.dims(pos)
            layer = int(name[len(kind):].split(".")[0])
            if kind == "W":
                tensors[name] = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, d_out))
            elif kind == "A":
                tensors[name] = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, cfg.rank(layer)))
            elif kind == "B":
                tensors[name] = np.zeros((cfg.rank(layer), d_out))
            else:
                tensors[name] = np.ones((1, 1))
    return CrNetParams(cfg, tensors)


def linear_cross(layer: int, pos: Position, inp: np.ndarray, prev_y: np.ndarray,
                 params: CrNetParams) -> np.ndarray:
    """``tau(beta) * prev_y + (inp @ A) @ B`` for one slot of layer ``layer >= 2``."""
    if layer < 2:
        raise ValueError("cross-layer residual exists only for layers >= 2")
    pos = Position(pos)
    A, B = params.A(layer, pos), params.B(layer, pos)
    if inp.ndim != 2 or inp.shape[1] != A.shape[0]:
        raise ShapeError(f"input shape {inp.shape} incompatible with A {A.shape} at layer {layer} {pos}")
    if prev_y.shape != (inp.shape[0], B.shape[1]):
        raise ShapeError(f"prev_Y shape {prev_y.shape} != expected {(inp.shape[0], B.shape[1])}")
    return params.tau(layer, pos) * prev_y + (inp @ A) @ B


# --------------------------------------------------------------------------
# activations


@dataclass
class LayerActivations:
    """Everything backward needs from one layer."""

    x: np.ndarray
    y: dict[Position, np.ndarray]
    probs: list[np.ndarray]
    att_h: np.ndarray
    att: np.ndarray
    gate_silu: np.ndarray
    x_down: np.ndarray
    low_rank: dict[Position, np.ndarray] | None = None

    def inputs(self) -> dict[Position, np.ndarray]:
        """Input to each linear slot."""
        return {
            Position.Q: self.x, Position.K: self.x, Position.V: self.x,
            Position.O: self.att_h,
            Position.GATE: self.att, Position.UP: self.att,
            Position.DOWN: self.x_down,
        }

    def output(self) -> np.ndarray:
        return self.y[Position.DOWN] + self.att


@dataclass
class ActivationCache:
    """Stored forward activations, indexed by 1-based layer number.

    ``full`` mode keeps every field for every layer. ``selective`` mode keeps
    the layer inputs ``X``, the low-rank outputs ``X^P A^P`` for ``l >= 2``
    and the slot outputs ``Y^P`` only for layers in ``checkpoint_set``.
    """

    mode: str
    tokens: np.ndarray
    X: dict[int, np.ndarray] = field(default_factory=dict)
    Y: dict[int, dict[Position, np.ndarray]] = field(default_factory=dict)
    att_scores: dict[int, list[np.ndarray]] = field(default_factory=dict)
    att_heads: dict[int, np.ndarray] = field(default_factory=dict)
    ffn_gate_silu: dict[int, np.ndarray] = field(default_factory=dict)
    low_rank_out: dict[int, dict[Position, np.ndarray]] = field(default_factory=dict)
    checkpoint_set: tuple[int, ...] = ()
    final_hidden: np.ndarray | None = None
    n_layers: int = 0
    arch: str = "crnet"

    def stored_elements(self) -> int:
        """Number of floats held by the cache (attention and FFN extras included)."""
        total = sum(x.size for x in self.X.values())
        total += sum(y.size for d in self.Y.values() for y in d.values())
        total += sum(y.size for d in self.low_rank_out.values() for y in d.values())
        total += sum(p.size for ps in self.att_scores.values() for p in ps)
        total += sum(a.size for a in self.att_heads.values())
        total += sum(a.size for a in self.ffn_gate_silu.values())
        if self.final_hidden is not None:
            total += self.final_hidden.size
        return total

    def layer_activations(self, layer: int) -> LayerActivations:
        """Full-mode lookup of one layer's activations."""
        if self.mode != "full":
            raise ValueError("layer_activations needs a full-mode cache")
        y = self.Y[layer]
        x = self.X[layer]
        sg = self.ffn_gate_silu[layer]
        return LayerActivations(
            x=x, y=y, probs=self.att_scores[layer], att_h=self.att_heads[layer],
            att=y[Position.O] + x, gate_silu=sg, x_down=sg * y[Position.UP],
            low_rank=self.low_rank_out.get(layer),
        )


def attention(yq: np.ndarray, yk: np.ndarray, yv: np.ndarray, heads: int,
              causal: bool) -> tuple[list[np.ndarray], np.ndarray]:
    """Multi-head scaled dot-product attention; returns per-head probabilities and ``Att^h``."""
    s, h = yq.shape
    dh = h // heads
    scale = 1.0 / math.sqrt(dh)
    probs, out = [], np.empty((s, h))
    for i in range(heads):
        cols = slice(i * dh, (i + 1) * dh)
        p = softmax_rows((yq[:, cols] @ yk[:, cols].T) * scale, causal_mask=causal)
        probs.append(p)
        out[:, cols] = p @ yv[:, cols]
    return probs, out


def rebuild_layer(x: np.ndarray, y: dict[Position, np.ndarray], cfg: ModelConfig,
                  low_rank: dict[Position, np.ndarray] | None = None) -> LayerActivations:
    """Recompute attention and FFN intermediates from a layer input and its slot outputs.

    Uses exactly the operations of the forward pass, so results are bitwise
    identical to what forward produced.
    """
    probs, att_h = attention(y[Position.Q], y[Position.K], y[Position.V], cfg.heads, cfg.causal)
    att = y[Position.O] + x
    sg = silu(y[Position.GATE])
    return LayerActivations(x=x, y=y, probs=probs, att_h=att_h, att=att, gate_silu=sg,
                            x_down=sg * y[Position.UP], low_rank=low_rank)


def _run_layer(x: np.ndarray, cfg: ModelConfig,
               lin: Callable[[Position, np.ndarray], np.ndarray]) -> LayerActivations:
    y: dict[Position, np.ndarray] = {}
    for p in (Position.Q, Position.K, Position.V):
        y[p] = lin(p, x)
    probs, att_h = attention(y[Position.Q], y[Position.K], y[Position.V], cfg.heads, cfg.causal)
    y[Position.O] = lin(Position.O, att_h)
    att = y[Position.O] + x
    y[Position.GATE] = lin(Position.GATE, att)
    y[Position.UP] = lin(Position.UP, att)
    sg = silu(y[Position.GATE])
    x_down = sg * y[Position.UP]
    y[Position.DOWN] = lin(Position.DOWN, x_down)
    return LayerActivations(x=x, y=y, probs=probs, att_h=att_h, att=att, gate_silu=sg, x_down=x_down)


def dense_layer(params: CrNetParams, layer: int, x: np.ndarray) -> LayerActivations:
    """Run a layer whose slots are dense matrices (layer 1, or any full-rank layer)."""
    return _run_layer(x, params.config, lambda p, inp: inp @ params.W(layer, p))


def cross_layer(params: CrNetParams, layer: int, x: np.ndarray,
                prev_y: dict[Position, np.ndarray]) -> LayerActivations:
    """Run a cross-layer residual layer, recording the low-rank outputs."""
    low: dict[Position, np.ndarray] = {}

    def lin(p: Position, inp: np.ndarray) -> np.ndarray:
        lr = inp @ params.A(layer, p)
        low[p] = lr
        return params.tau(layer, p) * prev_y[p] + lr @ params.B(layer, p)

    acts = _run_layer(x, params.config, lin)
    acts.low_rank = low
    return acts


def _store(cache: ActivationCache, layer: int, acts: LayerActivations, keep_y: bool) -> None:
    cache.X[layer] = acts.x
    if acts.low_rank is not None:
        cache.low_rank_out[layer] = acts.low_rank
    if cache.mode == "full":
        cache.Y[layer] = acts.y
        cache.att_scores[layer] = acts.probs
        cache.att_heads[layer] = acts.att_h
        cache.ffn_gate_silu[layer] = acts.gate_silu
    elif keep_y:
        cache.Y[layer] = acts.y


def forward(params: CrNetParams, token_ids, cache_mode: str | None = "full",
            checkpoints=None) -> tuple[np.ndarray, ActivationCache | None]:
    """Logits (``s x vocab``) and an activation cache for one sequence.

    ``cache_mode`` is ``"full"``, ``"selective"`` (requires ``checkpoints``,
    a :class:`~crnet.recompute.CheckpointPlan` or iterable of layer
    indices) or ``None``. Full-rank configs are routed to
    :func:`forward_full_rank`.
    """
    cfg = params.config
    if cfg.arch == "full_rank":
        if cache_mode == "selective":
            raise ValueError("selective caching applies only to the crnet architecture")
        return forward_full_rank(params, token_ids, cache_mode)
    tokens = check_tokens(token_ids, cfg.vocab, cfg.seq_len)
    keep: frozenset[int] = frozenset()
    if cache_mode == "selective":
        if checkpoints is None:
            raise ValueError("selective cache requires a checkpoint set")
        keep = frozenset(getattr(checkpoints, "layers", checkpoints))
        _check_checkpoint_layers(keep, cfg.n_layers)
    elif cache_mode not in ("full", None):
        raise ValueError(f"unknown cache mode {cache_mode!r}")
    cache = None
    if cache_mode is not None:
        cache = ActivationCache(mode=cache_mode, tokens=tokens, checkpoint_set=tuple(sorted(keep)),
                                n_layers=cfg.n_layers, arch=cfg.arch)
    x = params.embed[tokens]
    acts = dense_layer(params, 1, x)
    if cache is not None:
        _store(cache, 1, acts, keep_y=False)
    for layer in range(2, cfg.n_layers + 1):
        acts = cross_layer(params, layer, acts.output(), acts.y)
        if cache is not None:
            _store(cache, layer, acts, keep_y=layer in keep)
    hidden = acts.output()
    if cache is not None and cache.mode == "full":
        cache.final_hidden = hidden
    return hidden @ params.lm_head, cache


def forward_full_rank(params: CrNetParams, token_ids,
                      cache_mode: str | None = "full") -> tuple[np.ndarray, ActivationCache | None]:
    """Baseline: dense matrices in every layer and no cross-layer term."""
    cfg = params.config
    if cfg.arch != "full_rank":
        raise ValueError("forward_full_rank needs parameters with arch='full_rank'")
    if cache_mode not in ("full", None):
        raise ValueError("full-rank baseline supports cache_mode 'full' or None")
    tokens = check_tokens(token_ids, cfg.vocab, cfg.seq_len)
    cache = None
    if cache_mode is not None:
        cache = ActivationCache(mode="full", tokens=tokens, n_layers=cfg.n_layers, arch=cfg.arch)
    x = params.embed[tokens]
    for layer in range(1, cfg.n_layers + 1):
        acts = dense_layer(params, layer, x)
        if cache is not None:
            _store(cache, layer, acts, keep_y=True)
        x = acts.output()
    if cache is not None:
        cache.final_hidden = x
    return x @ params.lm_head, cache


def _check_checkpoint_layers(layers, n_layers: int) -> None:
    if n_layers not in layers:
        raise ValueError(f"checkpoint set must contain the last layer {n_layers}")
    bad = [l for l in layers if not 2 <= l <= n_layers]
    if bad:
        raise ValueError(f"checkpoint layers {sorted(bad)} outside [2, {n_layers}]")
