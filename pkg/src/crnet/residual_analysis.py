"""Cross-layer low-rank estimation of activations, and the stable-rank bound.

Given the same-slot activations of two adjacent layers, the estimator::

    Y_curr ~ beta0 * Y_prev + LR_r(Y_curr - beta0 * Y_prev)

is compared with plain truncation ``LR_r(Y_curr)``. When the two
activations have cosine similarity at least ``1 - eps`` and
``r <= (1 - eps)^2 * stable_rank(Y_prev)``, a closed-form scale
``beta_star`` guarantees the estimator is no worse than truncation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ._validation import check_matrix, check_same_shape
from .model import CrNetParams, Position, POSITIONS, forward
from .tensor_core import (
    frob_inner,
    frob_norm,
    low_rank_approx,
    save_matrix,
    spectral_norm,
    stable_rank,
)

__all__ = [
    "DEFAULT_BETA0_GRID",
    "ResidualStats",
    "estimate_cross",
    "relative_error",
    "cosine_similarity",
    "beta0_sweep",
    "beta_star",
    "r0_threshold",
    "similar_pair",
    "theorem_check",
    "collect_activations",
    "analyze_activations",
    "analyze_model_activations",
    "stats_csv",
    "summarize",
    "dump_activations",
]

DEFAULT_BETA0_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 2.0, 3.0, 5.0)


@dataclass(frozen=True)
class ResidualStats:
    layer: int
    position: str
    r: int
    beta0: float
    rel_err_direct: float
    rel_err_cross: float
    cosine_sim: float
    stable_rank_prev: float


def estimate_cross(y_prev, y_curr, beta0: float, r: int) -> np.ndarray:
    y_prev = check_matrix(y_prev, "Y_prev")
    y_curr = check_matrix(y_curr, "Y_curr")
    check_same_shape(y_prev, y_curr, ("Y_prev", "Y_curr"))
    if beta0 == 0:
        return low_rank_approx(y_curr, r)
    base = beta0 * y_prev
    return base + low_rank_approx(y_curr - base, r)


def relative_error(y_true, y_est) -> float:
    y_true = check_matrix(y_true, "Y_true")
    y_est = check_matrix(y_est, "Y_est")
    check_same_shape(y_true, y_est, ("Y_true", "Y_est"))
    denom = frob_norm(y_true)
    if denom == 0:
        raise ValueError("relative error is undefined for a zero reference matrix")
    return frob_norm(y_est - y_true) / denom


def cosine_similarity(a, b) -> float:
    """Frobenius cosine ``<a, b> / (|a| |b|)``, clipped to [-1, 1]."""
    na, nb = frob_norm(a), frob_norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero matrix")
    return max(-1.0, min(1.0, frob_inner(a, b) / (na * nb)))


def beta0_sweep(y_prev, y_curr, r: int, grid=DEFAULT_BETA0_GRID) -> tuple[float, list[tuple[float, float]]]:
    """Error of the estimator at each grid point; the argmin favours the smallest beta0 on ties."""
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("beta0 grid is empty")
    stats = [(b, relative_error(y_curr, estimate_cross(y_prev, y_curr, b, r))) for b in grid]
    best = min(stats, key=lambda t: (t[1], t[0]))[0]
    return best, stats


def _check_eps(epsilon_cos: float) -> None:
    if not 0 <= epsilon_cos < 1:
        raise ValueError(f"cosine slack must lie in [0, 1), got {epsilon_cos}")


def r0_threshold(y_prev, epsilon_cos: float) -> float:
    """``(1 - eps)^2 * stable_rank(Y_prev)``."""
    _check_eps(epsilon_cos)
    return (1.0 - epsilon_cos) ** 2 * stable_rank(check_matrix(y_prev, "Y_prev"))


def beta_star(y_prev, y_curr_norm_f: float, r: float, epsilon_cos: float) -> float:
    """Closed-form scale certifying the stable-rank bound.

    ``((1-eps) sqrt(phi) - sqrt(r)) |Y_prev|_2 |Y_curr|_F / (|Y_prev|_F^2 + r |Y_prev|_2^2)``
    with ``phi`` the stable rank of ``Y_prev``.
    """
    if r < 0:
        raise ValueError("rank must be non-negative")
    _check_eps(epsilon_cos)
    y_prev = check_matrix(y_prev, "Y_prev")
    fro = frob_norm(y_prev)
    if fro == 0:
        raise ValueError("Y_prev is zero")
    spectral = spectral_norm(y_prev)
    phi = fro * fro / (spectral * spectral)
    num = ((1.0 - epsilon_cos) * math.sqrt(phi) - math.sqrt(r)) * spectral * y_curr_norm_f
    return num / (fro * fro + r * spectral * spectral)


# --------------------------------------------------------------------------
# synthetic check of the bound


def similar_pair(n: int, epsilon_cos: float, rng: np.random.Generator, scale: float | None = None,
                 max_retries: int = 10, tol: float = 1e-3) -> tuple[np.ndarray, np.ndarray, float]:
    """Random ``n x n`` pair with Frobenius cosine in ``[1 - eps, 1 - eps + tol]``.

    ``Y_curr = c * Y_prev + eta * G`` with ``G`` Gaussian and ``eta`` found by
    bisection. Returns ``(Y_prev, Y_curr, cosine)``.
    """
    _check_eps(epsilon_cos)
    target = 1.0 - epsilon_cos
    for _ in range(max_retries):
        y_prev = rng.standard_normal((n, n))
        c = rng.uniform(0.5, 1.5) if scale is None else scale
        g = rng.standard_normal((n, n))
        base = c * y_prev
        if epsilon_cos == 0:
            return y_prev, base, 1.0

        def cos_at(eta):
            return cosine_similarity(y_prev, base + eta * g)

        lo, hi = 0.0, frob_norm(base) / frob_norm(g)
        while cos_at(hi) > target and hi < 1e12:
            hi *= 2.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            cm = cos_at(mid)
            if target <= cm <= target + tol:
                return y_prev, base + mid * g, cm
            if cm > target:
                lo = mid
            else:
                hi = mid
    raise RuntimeError(f"could not generate a pair with cosine {target} after {max_retries} attempts")


def theorem_check(n: int, epsilon_cos: float, r: int | None = None, seed: int = 0,
                  slack: float = 1e-9) -> dict:
    """Evaluate ``|Y - Y_est(beta*)|_F^2 <= |Y - LR_r(Y)|_F^2`` on a generated pair.

    ``r=None`` selects ``floor(r0 / 2)`` (at least 1). Pairs with ``r > r0``
    are still evaluated but flagged ``in_hypothesis=False``.
    """
    rng = np.random.default_rng(seed)
    y_prev, y_curr, cos = similar_pair(n, epsilon_cos, rng)
    r0 = r0_threshold(y_prev, epsilon_cos)
    if r is None:
        r = max(1, int(math.floor(r0 / 2)))
    if not 0 <= r <= n:
        raise ValueError(f"rank {r} outside [0, {n}]")
    beta = beta_star(y_prev, frob_norm(y_curr), r, epsilon_cos)
    lhs = frob_norm(y_curr - estimate_cross(y_prev, y_curr, beta, r)) ** 2
    rhs = frob_norm(y_curr - low_rank_approx(y_curr, r)) ** 2
    return {
        "n": n, "epsilon_cos": epsilon_cos, "seed": seed, "r": r, "r0": r0,
        "cosine_sim": cos, "beta_star": beta, "lhs": lhs, "rhs": rhs,
        "holds": bool(lhs <= rhs + slack * max(1.0, rhs)),
        "in_hypothesis": bool(0 < r <= r0 and cos >= 1.0 - epsilon_cos),
    }


# --------------------------------------------------------------------------
# model activations


def collect_activations(params: CrNetParams, tokens, max_windows: int = 1) -> dict[int, dict[Position, np.ndarray]]:
    """Slot outputs per layer, rows of consecutive ``seq_len`` windows stacked."""
    cfg = params.config
    tokens = np.asarray(tokens)
    if tokens.size == 0:
        raise ValueError("corpus sample is empty")
    s = cfg.seq_len
    starts = list(range(0, max(tokens.size - s, 0) + 1, s))[:max_windows] or [0]
    per: dict[int, dict[Position, list]] = {}
    for st in starts:
        _, cache = forward(params, tokens[st:st + s], cache_mode="full")
        for layer, ys in cache.Y.items():
            for p, y in ys.items():
                per.setdefault(layer, {}).setdefault(p, []).append(y)
    return {l: {p: np.vstack(v) for p, v in d.items()} for l, d in per.items()}


def analyze_activations(acts: dict[int, dict[Position, np.ndarray]], hidden: int, r_fraction: float = 0.25,
                        grid=DEFAULT_BETA0_GRID) -> list[ResidualStats]:
    rows = []
    r_req = max(1, int(round(r_fraction * hidden)))
    for layer in sorted(acts):
        if layer < 2:
            continue
        for p in POSITIONS:
            prev, curr = acts[layer - 1][p], acts[layer][p]
            r = min(r_req, *curr.shape)
            direct = relative_error(curr, low_rank_approx(curr, r))
            best, stats = beta0_sweep(prev, curr, r, grid)
            cross = dict(stats)[best]
            rows.append(ResidualStats(
                layer=layer, position=p.value, r=r, beta0=best, rel_err_direct=direct,
                rel_err_cross=cross, cosine_sim=cosine_similarity(prev, curr),
                stable_rank_prev=stable_rank(prev),
            ))
    return rows


def analyze_model_activations(checkpoint_path, corpus_sample, r_fraction: float = 0.25,
                              max_windows: int = 1) -> list[ResidualStats]:
    """Residual statistics of a full-rank checkpoint on a token sample.

    ``checkpoint_path`` may also be a loaded ``CrNetParams``.
    """
    if isinstance(checkpoint_path, CrNetParams):
        params = checkpoint_path
    else:
        from .trainer import load_checkpoint

        params = load_checkpoint(checkpoint_path).params
    if params.config.arch != "full_rank":
        raise ValueError("activation analysis requires a full-rank checkpoint; crnet layers are low-rank residual by construction")
    if params.config.n_layers < 2:
        raise ValueError("activation analysis needs at least two layers")
    from ._validation import check_byte_corpus

    tokens = corpus_sample if isinstance(corpus_sample, np.ndarray) else check_byte_corpus(corpus_sample)
    acts = collect_activations(params, tokens, max_windows)
    return analyze_activations(acts, params.config.hidden, r_fraction)


def summarize(rows: list[ResidualStats]) -> dict:
    """Means over layers and positions, plus the best single beta0 by mean cross error."""
    if not rows:
        raise ValueError("no statistics to summarize")
    direct = float(np.mean([r.rel_err_direct for r in rows]))
    cross = float(np.mean([r.rel_err_cross for r in rows]))
    per_position = {}
    for p in POSITIONS:
        sel = [r for r in rows if r.position == p.value]
        if sel:
            per_position[p.value] = {
                "rel_err_direct": float(np.mean([r.rel_err_direct for r in sel])),
                "rel_err_cross": float(np.mean([r.rel_err_cross for r in sel])),
            }
    return {
        "mean_rel_err_direct": direct,
        "mean_rel_err_cross": cross,
        "cross_not_worse": cross <= direct,
        "per_position": per_position,
        "beta0_counts": {str(b): sum(r.beta0 == b for r in rows) for b in sorted({r.beta0 for r in rows})},
    }


def stats_csv(rows: list[ResidualStats]) -> str:
    buf = io.StringIO()
    names = [f.name for f in fields(ResidualStats)]
    w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
    w.writeheader()
    for r in rows:
        d = asdict(r)
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in d.items()})
    return buf.getvalue()


def dump_activations(params: CrNetParams, tokens, out_dir, max_windows: int = 1) -> list[Path]:
    """Write every slot output as ``Y_l{layer}_{position}.crmx``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer, ys in sorted(collect_activations(params, tokens, max_windows).items()):
        for p in POSITIONS:
            path = out / f"Y_l{layer}_{p.value}.crmx"
            save_matrix(path, ys[p])
            paths.append(path)
    return paths
