"""Activation-efficient backward pass with inverse reconstruction.

In selective mode the forward keeps only the layer inputs ``X_l``, the
low-rank outputs ``X_l^P A_l^P`` (``l >= 2``) and the slot outputs
``Y_l^P`` of checkpointed layers. During backward, a missing ``Y_l^P`` is
recovered from layer ``l + 1`` by inverting the cross-layer relation::

    Y_l^P = (Y_{l+1}^P - (X_{l+1}^P A_{l+1}^P) B_{l+1}^P) / tau(beta_{l+1}^P)

Layer 1 has no cross-layer term and is recomputed from ``X_1``. Attention
probabilities and SwiGLU intermediates are always rebuilt.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from ._validation import ShapeError
from .backprop import Gradients, _check_d_logits, cross_stream, layer_backward
from .model import (
    ActivationCache,
    CrNetParams,
    ModelConfig,
    Position,
    POSITIONS,
    dense_layer,
    forward,
    rebuild_layer,
    tau,
)
from .tensor_core import frob_norm

__all__ = [
    "CheckpointPlan",
    "select_checkpoints",
    "reconstruct_prev",
    "backward_recompute",
    "reconstruction_error_profile",
    "profile_csv",
    "selective_memory_elements",
]


@dataclass(frozen=True)
class CheckpointPlan:
    """Layers whose slot outputs are stored; must contain ``L`` and exclude 1."""

    n_layers: int
    layers: tuple[int, ...]

    def __post_init__(self):
        layers = tuple(sorted(set(int(l) for l in self.layers)))
        object.__setattr__(self, "layers", layers)
        if self.n_layers < 2:
            raise ValueError("a checkpoint plan needs at least two layers")
        if self.n_layers not in layers:
            raise ValueError(f"checkpoint set must contain the last layer {self.n_layers}")
        bad = [l for l in layers if not 2 <= l <= self.n_layers]
        if bad:
            raise ValueError(f"checkpoint layers {bad} outside [2, {self.n_layers}]")

    def __contains__(self, layer: int) -> bool:
        return layer in self.layers

    def __len__(self) -> int:
        return len(self.layers)


def select_checkpoints(n_layers: int, k: int) -> CheckpointPlan:
    """``k`` layers evenly spaced over ``[2, L]``, always including ``L``.

    Layer ``L - round(j * (L - 1) / k)`` for ``j = 0..k-1``; spacing is at
    least one, so the indices are distinct and never reach layer 1.
    """
    if not 1 <= k <= n_layers - 1:
        raise ValueError(f"checkpoint count k={k} outside [1, {n_layers - 1}]")
    step = (n_layers - 1) / k
    layers = [n_layers - math.floor(j * step + 0.5) for j in range(k)]
    return CheckpointPlan(n_layers, tuple(layers))


def reconstruct_prev(y_next: np.ndarray, low_rank_next: np.ndarray, b_next: np.ndarray,
                     beta_next: float, epsilon: float) -> np.ndarray:
    """Recover ``Y_l^P`` from layer ``l + 1`` quantities."""
    if low_rank_next.shape[1] != b_next.shape[0] or y_next.shape != (low_rank_next.shape[0], b_next.shape[1]):
        raise ShapeError(
            f"incompatible shapes: Y {y_next.shape}, XA {low_rank_next.shape}, B {b_next.shape}"
        )
    return (y_next - low_rank_next @ b_next) / tau(beta_next, epsilon)


def _reconstruct_layer(params: CrNetParams, cache: ActivationCache, layer: int,
                       y_next: dict[Position, np.ndarray]) -> dict[Position, np.ndarray]:
    low = cache.low_rank_out.get(layer + 1)
    if low is None:
        raise ValueError(f"selective cache is missing low-rank outputs of layer {layer + 1}")
    out = {}
    for p in POSITIONS:
        if p not in low:
            raise ValueError(f"selective cache is missing low-rank output of layer {layer + 1} position {p}")
        out[p] = reconstruct_prev(y_next[p], low[p], params.B(layer + 1, p),
                                  params.beta(layer + 1, p), params.config.epsilon)
    return out


def _stored_or_none(cache: ActivationCache, layer: int) -> dict[Position, np.ndarray] | None:
    y = cache.Y.get(layer)
    if y is None:
        return None
    missing = [str(p) for p in POSITIONS if p not in y]
    if missing:
        raise ValueError(f"checkpointed layer {layer} lacks positions {missing}")
    return y


def recovered_outputs(params: CrNetParams, cache: ActivationCache):
    """Yield ``(layer, Y_layer)`` for ``layer = L..1`` as the backward sweep sees them."""
    cfg = params.config
    y = _stored_or_none(cache, cfg.n_layers)
    if y is None:
        raise ValueError(f"selective cache lacks slot outputs of the last layer {cfg.n_layers}")
    for layer in range(cfg.n_layers, 0, -1):
        yield layer, y
        prev = layer - 1
        if prev == 0:
            break
        if prev == 1:
            if 1 not in cache.X:
                raise ValueError("selective cache is missing the layer input X of layer 1")
            y = dense_layer(params, 1, cache.X[1]).y
        else:
            stored = _stored_or_none(cache, prev)
            y = stored if stored is not None else _reconstruct_layer(params, cache, prev, y)


def backward_recompute(params: CrNetParams, cache: ActivationCache, d_logits) -> Gradients:
    """Gradients from a selective cache; same local math as ``backprop.backward``."""
    cfg = params.config
    if cfg.arch != "crnet":
        raise ValueError("recompute backward applies only to the crnet architecture")
    if cache.mode != "selective":
        raise ValueError("backward_recompute needs a selective-mode cache")
    d_logits = _check_d_logits(params, cache, d_logits)
    for layer in range(1, cfg.n_layers + 1):
        if layer not in cache.X:
            raise ValueError(f"selective cache is missing the layer input X of layer {layer}")
    out = Gradients.zeros_like(params)
    g = out.tensors
    sweep = recovered_outputs(params, cache)
    layer, y = next(sweep)
    acts = rebuild_layer(cache.X[layer], y, cfg, cache.low_rank_out.get(layer))
    g["lm_head"] += acts.output().T @ d_logits
    d_out = d_logits @ params.lm_head.T
    stream = None
    while True:
        d_out, dy = layer_backward(params, layer, acts, d_out, stream, g)
        if layer == 1:
            break
        layer, y_prev = next(sweep)
        stream = cross_stream(params, layer + 1, dy, y_prev, g)
        acts = rebuild_layer(cache.X[layer], y_prev, cfg, cache.low_rank_out.get(layer))
    np.add.at(g["embed"], cache.tokens, d_out)
    return out


# --------------------------------------------------------------------------
# diagnostics


def reconstruction_error_profile(params: CrNetParams, tokens, plan: CheckpointPlan) -> list[dict]:
    """Relative error ``||Y_rec - Y_true||_F / ||Y_true||_F`` per layer and position."""
    _, full = forward(params, tokens, cache_mode="full")
    _, sel = forward(params, tokens, cache_mode="selective", checkpoints=plan)
    rows = []
    for layer, y in recovered_outputs(params, sel):
        for p in POSITIONS:
            truth = full.Y[layer][p]
            denom = frob_norm(truth)
            err = frob_norm(y[p] - truth)
            rows.append({"layer": layer, "position": p.value,
                         "rel_error": err / denom if denom > 0 else err})
    rows.sort(key=lambda r: (r["layer"], POSITIONS.index(Position(r["position"]))))
    return rows


def profile_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["layer", "position", "rel_error"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({"layer": r["layer"], "position": r["position"], "rel_error": repr(r["rel_error"])})
    return buf.getvalue()


def selective_memory_elements(cfg: ModelConfig, plan: CheckpointPlan, seq_len: int | None = None) -> int:
    """Closed-form element count of a selective cache.

    ``(L + 5|A|) s h + 2|A| s h_ff + 7 s sum_{l>=2} r_l``; with a uniform
    rank the last term is ``7 (L-1) s r``.
    """
    s = cfg.seq_len if seq_len is None else seq_len
    b = len(plan)
    return ((cfg.n_layers + 5 * b) * s * cfg.hidden + 2 * b * s * cfg.ffn_hidden
            + 7 * s * sum(cfg.ranks))
