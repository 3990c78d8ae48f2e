"""Straight-line evaluator of the model, written independently of ``model.forward``.

No caching, no shared helpers: every step is spelled out with plain numpy
so that it can serve as an oracle. It is dtype-generic; running it in
``np.longdouble`` gives a loss with roughly three more decimal digits than
float64, which keeps finite-difference rounding noise far below the
gradients being checked.
"""

from __future__ import annotations

import numpy as np

from .model import CrNetParams

_ORDER = ("Q", "K", "V", "O", "gate", "up", "down")


def reference_logits(params: CrNetParams, tokens, dtype=np.float64) -> np.ndarray:
    cfg = params.config
    T = {k: np.asarray(v, dtype=dtype) for k, v in params.tensors.items()}
    one = dtype(1)
    eps = dtype(cfg.epsilon)
    tokens = np.asarray(tokens, dtype=np.int64)
    s = tokens.size
    dh = cfg.hidden // cfg.heads
    x = T["embed"][tokens]
    prev = None
    for layer in range(1, cfg.n_layers + 1):
        cross = cfg.arch == "crnet" and layer >= 2

        def lin(pos, inp):
            if not cross:
                return inp @ T[f"W{layer}.{pos}"]
            b = T[f"beta{layer}.{pos}"][0, 0]
            t = (-one if b < 0 else one) * (abs(b) + eps)
            return t * prev[pos] + (inp @ T[f"A{layer}.{pos}"]) @ T[f"B{layer}.{pos}"]

        y = {}
        y["Q"], y["K"], y["V"] = lin("Q", x), lin("K", x), lin("V", x)
        heads = []
        for i in range(cfg.heads):
            c = slice(i * dh, (i + 1) * dh)
            sc = (y["Q"][:, c] @ y["K"][:, c].T) / np.sqrt(dtype(dh))
            if cfg.causal:
                sc = np.where(np.tril(np.ones((s, s), dtype=bool)), sc, -np.inf)
            e = np.exp(sc - sc.max(axis=1, keepdims=True))
            heads.append((e / e.sum(axis=1, keepdims=True)) @ y["V"][:, c])
        att_h = np.concatenate(heads, axis=1)
        y["O"] = lin("O", att_h)
        att = y["O"] + x
        y["gate"] = lin("gate", att)
        y["up"] = lin("up", att)
        x_down = y["gate"] / (one + np.exp(-y["gate"])) * y["up"]
        y["down"] = lin("down", x_down)
        x = y["down"] + att
        prev = y
    return x @ T["lm_head"]


def reference_loss(params: CrNetParams, tokens, targets, dtype=np.float64):
    logits = reference_logits(params, tokens, dtype)
    m = logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(logits - m).sum(axis=1)) + m[:, 0]
    t = np.asarray(targets, dtype=np.int64)
    return (logz - logits[np.arange(t.size), t]).mean()
