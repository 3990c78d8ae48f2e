"""Dense float64 kernels and spectral utilities.

Matrices are plain ``numpy.ndarray`` objects of shape ``(rows, cols)`` and
dtype float64. Every public function validates its inputs and never
broadcasts: a shape mismatch is an error.

The SVD is a one-sided (Hestenes) Jacobi iteration using a round-robin
ordering, so each step rotates ``n/2`` disjoint column pairs at once.
Tall inputs are first reduced to a square triangular factor with a QR
decomposition.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from ._validation import ShapeError, check_matrix, check_same_shape

__all__ = [
    "SvdResult",
    "SvdConvergenceError",
    "matmul",
    "softmax_rows",
    "silu",
    "silu_prime",
    "sigmoid",
    "svd",
    "low_rank_approx",
    "stable_rank",
    "spectral_norm",
    "frob_norm",
    "frob_inner",
    "axpy",
    "hadamard",
    "transpose",
    "write_matrix",
    "read_matrix",
    "save_matrix",
    "load_matrix",
]

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60
POWER_TOL = 1e-10
POWER_MAX_ITER = 10_000
# stable_rank switches from full SVD to power iteration above this side length
DIRECT_SVD_LIMIT = 256

CRMX_MAGIC = b"CRMX"
CRMX_VERSION = 1
_CRMX_HEADER = struct.Struct("<4sIQQ")


class SvdConvergenceError(ArithmeticError):
    """Jacobi sweeps did not drive the off-diagonal mass below tolerance."""


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = U @ diag(sigma) @ V.T`` with ``k = min(m, n)``."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        k = self.sigma.size if rank is None else rank
        return (self.U[:, :k] * self.sigma[:k]) @ self.V[:, :k].T


def matmul(a, b) -> np.ndarray:
    a = check_matrix(a, "a")
    b = check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m, causal_mask: bool = False) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    With ``causal_mask`` the strict upper triangle is excluded and comes
    back as exact zeros.
    """
    m = check_matrix(m, "m")
    if causal_mask:
        if m.shape[0] != m.shape[1]:
            raise ShapeError(f"causal softmax needs a square matrix, got {m.shape}")
        masked = np.triu(np.ones(m.shape, dtype=bool), k=1)
        z = np.where(masked, -np.inf, m)
    else:
        z = m
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def silu_prime(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sg = sigmoid(x)
    return sg * (1.0 + x * (1.0 - sg))


def frob_norm(a) -> float:
    a = check_matrix(a, "a", allow_empty=True)
    return float(np.sqrt(np.sum(a * a)))


def frob_inner(a, b) -> float:
    a = check_matrix(a, "a", allow_empty=True)
    b = check_matrix(b, "b", allow_empty=True)
    check_same_shape(a, b)
    return float(np.sum(a * b))


def axpy(alpha: float, a, b) -> np.ndarray:
    """Return ``alpha * a + b``."""
    a = check_matrix(a, "a", allow_empty=True)
    b = check_matrix(b, "b", allow_empty=True)
    check_same_shape(a, b)
    return alpha * a + b


def hadamard(a, b) -> np.ndarray:
    a = check_matrix(a, "a", allow_empty=True)
    b = check_matrix(b, "b", allow_empty=True)
    check_same_shape(a, b)
    return a * b


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(check_matrix(a, "a", allow_empty=True).T)


# --------------------------------------------------------------------------
# SVD


def _round_robin_layout(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row layout and per-round permutation for round-robin Jacobi ordering.

    With ``n`` even and rows arranged by ``layout``, row ``i`` pairs with row
    ``i + n//2`` in every round. Applying ``perm`` to the rows advances the
    circle-method schedule by one round; ``n - 1`` rounds visit every pair
    exactly once.
    """
    half = n // 2
    order = list(range(n))
    nxt = [order[0], order[-1]] + order[1:-1]

    def arrange(o):
        return o[:half] + o[::-1][:half]

    cur, new = arrange(order), arrange(nxt)
    where = {col: k for k, col in enumerate(cur)}
    perm = np.array([where[col] for col in new])
    return np.array(cur), perm


def _jacobi_square(r: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """One-sided Jacobi on a square matrix. Returns (G, V, off) with ``r @ V = G``.

    Row ``k`` of the work array holds column ``k`` of G followed by column
    ``k`` of V, stored in round-robin slot order so each round's pairs are
    the two contiguous halves and one rotation updates both factors.
    """
    m, n = r.shape
    padded = n + (n % 2)
    half = padded // 2
    layout, perm = _round_robin_layout(padded)
    work = np.zeros((padded, m + padded))
    work[:n, :m] = r.T
    work[:, m:] = np.eye(padded)
    work = work[layout]
    ids = layout.copy()
    scale = float(np.sum(r * r))
    # columns below this norm are numerically zero; rotating them is noise
    tiny = (np.finfo(float).eps ** 2) * max(scale, np.finfo(float).tiny)
    off = np.inf
    for _ in range(SVD_MAX_SWEEPS):
        off = 0.0
        for _ in range(padded - 1):
            top, bot = work[:half], work[half:]
            gp, gq = top[:, :m], bot[:, :m]
            alpha = np.einsum("ij,ij->i", gp, gp)
            beta = np.einsum("ij,ij->i", gq, gq)
            gamma = np.einsum("ij,ij->i", gp, gq)
            denom = np.sqrt(alpha) * np.sqrt(beta)
            live = (alpha > tiny) & (beta > tiny)
            cos_pq = np.where(live, np.abs(gamma) / np.where(live, denom, 1.0), 0.0)
            worst = float(cos_pq.max())
            if worst > off:
                off = worst
            if worst > SVD_TOL:
                act = cos_pq > SVD_TOL
                zeta = (beta - alpha) / (2.0 * np.where(act, gamma, 1.0))
                t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                t[~act] = 0.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = (c * t)[:, None]
                c = c[:, None]
                new_top = c * top - s * bot
                bot *= c
                bot += s * top
                top[...] = new_top
            work = work[perm]
            ids = ids[perm]
        if off <= SVD_TOL:
            break
    work = work[np.argsort(ids)]
    return work[:n, :m].T, work[:n, m:m + n].T, off


def _orthonormal_completion(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged ``good`` with an orthonormal complement."""
    if good.all():
        return u
    m, k = u.shape
    kept = u[:, good]
    q, _ = np.linalg.qr(np.hstack([kept, np.eye(m)]), mode="reduced")
    fill = q[:, kept.shape[1]:kept.shape[1] + (k - kept.shape[1])]
    out = u.copy()
    out[:, ~good] = fill
    return out


def svd(a) -> SvdResult:
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Singular values come back sorted in descending order. Raises
    :class:`SvdConvergenceError` if 60 sweeps do not bring every column
    pair's cosine below 1e-12.
    """
    a = check_matrix(a, "a")
    m, n = a.shape
    work = a.T if m < n else a
    # unit max-magnitude keeps squared column norms clear of under- and overflow
    amax = float(np.max(np.abs(work)))
    if amax > 0:
        work = work / amax
    q, r = np.linalg.qr(work, mode="reduced")
    g, v, off = _jacobi_square(r)
    if off > SVD_TOL:
        raise SvdConvergenceError(
            f"Jacobi SVD of {m}x{n} matrix did not converge: off-diagonal cosine {off:.3e} "
            f"after {SVD_MAX_SWEEPS} sweeps"
        )
    sigma = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]
    thresh = max(sigma[0], np.finfo(float).tiny) * r.shape[0] * np.finfo(float).eps
    good = sigma > thresh
    u_r = np.zeros_like(g)
    u_r[:, good] = g[:, good] / sigma[good]
    u_r = _orthonormal_completion(u_r, good)
    u = q @ u_r
    if amax > 0:
        sigma = sigma * amax
    if m < n:
        return SvdResult(U=v, sigma=sigma, V=u)
    return SvdResult(U=u, sigma=sigma, V=v)


def low_rank_approx(a, r: int) -> np.ndarray:
    """Best rank-``r`` approximation in Frobenius norm (truncated SVD)."""
    a = check_matrix(a, "a")
    k = min(a.shape)
    if not 0 <= r <= k:
        raise ValueError(f"rank {r} outside [0, {k}] for matrix of shape {a.shape}")
    if r == 0:
        return np.zeros_like(a)
    return svd(a).reconstruct(r)


def spectral_norm(a) -> float:
    """Largest singular value; full SVD for small inputs, power iteration above 256."""
    a = check_matrix(a, "a")
    if max(a.shape) <= DIRECT_SVD_LIMIT:
        return float(svd(a).sigma[0])
    return _power_iteration(a)


def _power_iteration(a: np.ndarray) -> float:
    gram_side = a.shape[1] <= a.shape[0]
    x = np.ones(a.shape[1] if gram_side else a.shape[0])
    # fixed perturbation breaks symmetry against an all-ones null vector
    x += np.linspace(0.0, 1.0, x.size)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(POWER_MAX_ITER):
        y = a.T @ (a @ x) if gram_side else a @ (a.T @ x)
        new = float(np.linalg.norm(y))
        if new == 0.0:
            return 0.0
        x = y / new
        if abs(new - lam) <= POWER_TOL * new:
            lam = new
            break
        lam = new
    return float(np.sqrt(lam))


def stable_rank(a) -> float:
    """``||a||_F^2 / ||a||_2^2``; lies in ``[1, min(m, n)]``."""
    a = check_matrix(a, "a")
    fro2 = float(np.sum(a * a))
    if fro2 == 0.0:
        raise ValueError("stable rank of a zero matrix is undefined")
    s1 = spectral_norm(a)
    return fro2 / (s1 * s1)


# --------------------------------------------------------------------------
# CRMX binary format: magic, u32 version, u64 rows, u64 cols, f64 LE data


def write_matrix(fp: BinaryIO, a) -> None:
    a = check_matrix(a, "a", allow_empty=True)
    rows, cols = a.shape
    fp.write(_CRMX_HEADER.pack(CRMX_MAGIC, CRMX_VERSION, rows, cols))
    fp.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_matrix(fp: BinaryIO) -> np.ndarray:
    start = fp.tell() if fp.seekable() else None
    head = fp.read(_CRMX_HEADER.size)
    if len(head) < _CRMX_HEADER.size:
        raise EOFError(f"truncated CRMX header at offset {start}")
    magic, version, rows, cols = _CRMX_HEADER.unpack(head)
    if magic != CRMX_MAGIC:
        raise ValueError(f"bad CRMX magic {magic!r} at offset {start}")
    if version != CRMX_VERSION:
        raise ValueError(f"unsupported CRMX version {version}")
    nbytes = rows * cols * 8
    body = fp.read(nbytes)
    if len(body) < nbytes:
        where = None if start is None else start + _CRMX_HEADER.size + len(body)
        raise EOFError(f"truncated CRMX payload at offset {where}: expected {nbytes} bytes")
    return np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(rows, cols)


def save_matrix(path, a) -> None:
    with open(path, "wb") as fp:
        write_matrix(fp, a)


def load_matrix(path) -> np.ndarray:
    with open(Path(path), "rb") as fp:
        return read_matrix(fp)


def to_bytes(a) -> bytes:
    buf = io.BytesIO()
    write_matrix(buf, a)
    return buf.getvalue()
