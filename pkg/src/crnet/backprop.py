"""Hand-derived gradients for the cross-layer model and the full-rank baseline.

The backward sweep runs layers from last to first. For every slot ``P`` a
running gradient stream is carried downward: because ``Y_{l+1}^P`` contains
``tau(beta_{l+1}^P) * Y_l^P``, the total gradient of ``Y_l^P`` is the local
term from layer ``l`` plus ``tau(beta_{l+1}^P) * dY_{l+1}^P``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ._validation import ShapeError, check_tokens
from .model import (
    ActivationCache,
    CrNetParams,
    LayerActivations,
    ModelConfig,
    Position,
    POSITIONS,
    forward,
    init_params,
    param_group,
)
from .reference import reference_loss
from .tensor_core import silu_prime

__all__ = [
    "Gradients",
    "loss_and_grad",
    "loss_only",
    "backward",
    "layer_backward",
    "grad_check",
    "GROUPS",
]

GROUPS = ("W", "A", "B", "beta", "embed", "lm_head")

# hook(layer, position, tau) -> tau actually used when passing a stream down
StreamHook = Callable[[int, Position, float], float]


@dataclass
class Gradients:
    """Gradient arrays keyed exactly like ``CrNetParams.tensors``."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: CrNetParams) -> "Gradients":
        return cls(params.config, {k: np.zeros_like(v) for k, v in params.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def add_(self, other: "Gradients") -> "Gradients":
        for k, v in other.tensors.items():
            self.tensors[k] += v
        return self

    def scale_(self, alpha: float) -> "Gradients":
        for v in self.tensors.values():
            v *= alpha
        return self

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(v * v)) for v in self.tensors.values()))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


# --------------------------------------------------------------------------
# loss


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grad(logits, targets) -> tuple[float, np.ndarray]:
    """Mean next-token cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    s, vocab = logits.shape
    t = check_tokens(targets, vocab, name="targets")
    if t.size != s:
        raise ShapeError(f"targets length {t.size} != logits rows {s}")
    logp = _log_softmax(logits)
    rows = np.arange(s)
    loss = float(-logp[rows, t].mean())
    d = np.exp(logp)
    d[rows, t] -= 1.0
    return loss, d / s


def loss_only(params: CrNetParams, tokens, targets) -> float:
    logits, _ = forward(params, tokens, cache_mode=None)
    return loss_and_grad(logits, targets)[0]


# --------------------------------------------------------------------------
# backward


def _slot_grads(params: CrNetParams, layer: int, pos: Position, inp: np.ndarray,
                dy: np.ndarray, grads: dict[str, np.ndarray],
                low_rank: np.ndarray | None) -> np.ndarray:
    """Accumulate parameter grads of one slot; return gradient w.r.t. its input."""
    cross = params.config.arch == "crnet" and layer >= 2
    if not cross:
        W = params.W(layer, pos)
        grads[f"W{layer}.{pos.value}"] += inp.T @ dy
        return dy @ W.T
    A, B = params.A(layer, pos), params.B(layer, pos)
    lr = inp @ A if low_rank is None else low_rank
    dy_bt = dy @ B.T
    grads[f"B{layer}.{pos.value}"] += lr.T @ dy
    grads[f"A{layer}.{pos.value}"] += inp.T @ dy_bt
    return dy_bt @ A.T


def layer_backward(params: CrNetParams, layer: int, acts: LayerActivations, d_out: np.ndarray,
                   stream: dict[Position, np.ndarray] | None,
                   grads: dict[str, np.ndarray]) -> tuple[np.ndarray, dict[Position, np.ndarray]]:
    """Backward through one block.

    ``d_out`` is the gradient of the layer output ``X_{l+1}``; ``stream``
    holds the cross-layer contribution ``tau(beta_{l+1}^P) dY_{l+1}^P`` or
    is ``None`` at the top. Parameter grads are accumulated into ``grads``;
    returns ``(dX_l, dY_l)`` where ``dY_l`` are total slot-output grads.
    """
    cfg = params.config
    y = acts.y
    low = acts.low_rank or {}
    dy: dict[Position, np.ndarray] = {}

    def total(pos: Position, local: np.ndarray) -> np.ndarray:
        return local if stream is None else local + stream[pos]

    # X_{l+1} = Y^down + Att
    dy[Position.DOWN] = total(Position.DOWN, d_out)
    d_att = d_out.copy()
    d_xdown = _slot_grads(params, layer, Position.DOWN, acts.x_down, dy[Position.DOWN], grads,
                          low.get(Position.DOWN))
    # X_down = silu(Y^gate) * Y^up
    dy[Position.UP] = total(Position.UP, d_xdown * acts.gate_silu)
    dy[Position.GATE] = total(Position.GATE, d_xdown * y[Position.UP] * silu_prime(y[Position.GATE]))
    d_att += _slot_grads(params, layer, Position.GATE, acts.att, dy[Position.GATE], grads,
                         low.get(Position.GATE))
    d_att += _slot_grads(params, layer, Position.UP, acts.att, dy[Position.UP], grads,
                         low.get(Position.UP))
    # Att = Y^O + X
    dy[Position.O] = total(Position.O, d_att)
    dx = d_att.copy()
    d_atth = _slot_grads(params, layer, Position.O, acts.att_h, dy[Position.O], grads,
                         low.get(Position.O))
    # per-head attention
    s, h = acts.x.shape
    dh = h // cfg.heads
    scale = 1.0 / math.sqrt(dh)
    dq, dk, dv = np.empty((s, h)), np.empty((s, h)), np.empty((s, h))
    for i, p in enumerate(acts.probs):
        cols = slice(i * dh, (i + 1) * dh)
        g = d_atth[:, cols]
        dp = g @ y[Position.V][:, cols].T
        dv[:, cols] = p.T @ g
        ds = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
        dq[:, cols] = scale * (ds @ y[Position.K][:, cols])
        dk[:, cols] = scale * (ds.T @ y[Position.Q][:, cols])
    for pos, local in ((Position.Q, dq), (Position.K, dk), (Position.V, dv)):
        dy[pos] = total(pos, local)
        dx += _slot_grads(params, layer, pos, acts.x, dy[pos], grads, low.get(pos))
    return dx, dy


def cross_stream(params: CrNetParams, layer: int, dy: dict[Position, np.ndarray],
                 prev_y: dict[Position, np.ndarray], grads: dict[str, np.ndarray],
                 stream_tau: StreamHook | None = None) -> dict[Position, np.ndarray]:
    """Beta grads of layer ``layer >= 2`` and the stream passed to layer ``layer - 1``."""
    out = {}
    for pos in POSITIONS:
        grads[f"beta{layer}.{pos.value}"][0, 0] += float(np.sum(dy[pos] * prev_y[pos]))
        t = params.tau(layer, pos)
        if stream_tau is not None:
            t = stream_tau(layer, pos, t)
        out[pos] = t * dy[pos]
    return out


def _head_and_embed(params: CrNetParams, hidden: np.ndarray, d_logits: np.ndarray,
                    grads: dict[str, np.ndarray]) -> np.ndarray:
    grads["lm_head"] += hidden.T @ d_logits
    return d_logits @ params.lm_head.T


def _check_d_logits(params: CrNetParams, cache: ActivationCache, d_logits) -> np.ndarray:
    d = np.asarray(d_logits, dtype=np.float64)
    expected = (cache.tokens.size, params.config.vocab)
    if d.shape != expected:
        raise ShapeError(f"d_logits shape {d.shape} != {expected}")
    if cache.n_layers != params.config.n_layers or cache.arch != params.config.arch:
        raise ValueError("activation cache was produced by a different model configuration")
    return d


def backward(params: CrNetParams, cache: ActivationCache, d_logits,
             stream_tau: StreamHook | None = None) -> Gradients:
    """Gradients of every parameter from a full-mode activation cache.

    ``stream_tau`` optionally intercepts the scale applied when the
    gradient stream of layer ``l`` is handed to layer ``l - 1``.
    """
    if cache.mode != "full":
        raise ValueError("backward needs a full-mode cache; use recompute.backward_recompute")
    d_logits = _check_d_logits(params, cache, d_logits)
    cfg = params.config
    out = Gradients.zeros_like(params)
    g = out.tensors
    d_out = _head_and_embed(params, cache.final_hidden, d_logits, g)
    stream = None
    for layer in range(cfg.n_layers, 0, -1):
        acts = cache.layer_activations(layer)
        d_out, dy = layer_backward(params, layer, acts, d_out, stream, g)
        if cfg.arch == "crnet" and layer >= 2:
            stream = cross_stream(params, layer, dy, cache.Y[layer - 1], g, stream_tau)
    np.add.at(g["embed"], cache.tokens, d_out)
    return out


# --------------------------------------------------------------------------
# finite-difference check


def random_test_params(cfg: ModelConfig, seed: int, beta_min: float = 0.5) -> CrNetParams:
    """Parameters away from the init state: nonzero B, |beta| in [beta_min, 1], O(1) embeddings."""
    rng = np.random.default_rng(seed)
    params = init_params(cfg, seed)
    for name, v in params.tensors.items():
        group = param_group(name)
        if group == "beta":
            mag = rng.uniform(beta_min, max(1.0, beta_min))
            v[0, 0] = mag * rng.choice([-1.0, 1.0])
        elif group == "B":
            v[...] = rng.normal(0.0, 0.3 / math.sqrt(v.shape[0]), size=v.shape)
        elif group == "embed":
            v[...] = rng.normal(0.0, 1.0, size=v.shape)
        elif group == "lm_head":
            v[...] = rng.normal(0.0, 0.1 / math.sqrt(v.shape[0]), size=v.shape)
    return params


def grad_check(cfg: ModelConfig, seed: int = 0, fd_step: float = 1e-5,
               max_coords_per_group: int | None = None, params: CrNetParams | None = None,
               fd_precision: str = "extended") -> dict:
    """Compare analytic gradients with central differences of the loss.

    Every coordinate is perturbed unless ``max_coords_per_group`` is set, in
    which case a seeded subsample of that many (at least 200) coordinates
    per group is used. Relative errors use ``max(|a|, |n|, 1e-8)``.

    With ``fd_precision="extended"`` the perturbed losses come from the
    independent straight-line evaluator in ``np.longdouble``; ``"double"``
    uses ``forward`` itself, whose rounding noise (about 1e-11 per
    difference quotient) dominates for gradient entries below about 1e-5.
    """
    if params is None:
        params = random_test_params(cfg, seed)
    if fd_precision == "extended":
        fd_params = CrNetParams(cfg, {k: v.astype(np.longdouble) for k, v in params.tensors.items()})

        def fd_loss(p):
            return reference_loss(p, tokens, targets, np.longdouble)
    elif fd_precision == "double":
        fd_params = None

        def fd_loss(p):
            return loss_only(p, tokens, targets)
    else:
        raise ValueError(f"fd_precision must be 'extended' or 'double', got {fd_precision!r}")
    rng = np.random.default_rng([seed, 1])
    tokens = rng.integers(0, cfg.vocab, size=cfg.seq_len)
    targets = rng.integers(0, cfg.vocab, size=cfg.seq_len)
    logits, cache = forward(params, tokens)
    _, d_logits = loss_and_grad(logits, targets)
    grads = backward(params, cache, d_logits)

    coords: dict[str, list[tuple[str, int]]] = {}
    for name, v in params.tensors.items():
        coords.setdefault(param_group(name), []).extend((name, i) for i in range(v.size))
    if max_coords_per_group is not None:
        limit = max(200, max_coords_per_group)
        for group, lst in coords.items():
            if len(lst) > limit:
                pick = np.sort(rng.choice(len(lst), size=limit, replace=False))
                coords[group] = [lst[i] for i in pick]

    report = {}
    target = fd_params if fd_params is not None else params
    for group in GROUPS:
        worst, tested = 0.0, 0
        for name, i in coords.get(group, []):
            arr = target.tensors[name].reshape(-1)
            orig = arr[i]
            arr[i] = orig + fd_step
            up = fd_loss(target)
            arr[i] = orig - fd_step
            down = fd_loss(target)
            arr[i] = orig
            numeric = float((up - down) / (2 * arr.dtype.type(fd_step)))
            analytic = float(grads.tensors[name].reshape(-1)[i])
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
            tested += 1
        report[group] = {"max_rel_err": worst, "coords_tested": tested}
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
