"""Input validation helpers shared by every module."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


def check_matrix(a, name: str = "matrix", *, allow_empty: bool = False) -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array or raise.

    Accepts anything ``np.asarray`` understands. 1-D input is rejected
    rather than silently promoted; there is no implicit broadcasting here.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise ShapeError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, names=("a", "b")) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")


def check_tokens(tokens, vocab: int, max_len: int | None = None, name: str = "tokens") -> np.ndarray:
    """Validate a 1-D sequence of token ids against ``vocab`` and ``max_len``."""
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise ShapeError(f"{name} must be a 1-D sequence, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.issubdtype(arr.dtype, np.integer):
        if np.all(np.mod(arr, 1) == 0):
            arr = arr.astype(np.int64)
        else:
            raise TypeError(f"{name} must be integers")
    arr = arr.astype(np.int64, copy=False)
    if arr.min() < 0 or arr.max() >= vocab:
        bad = int(arr.max()) if arr.max() >= vocab else int(arr.min())
        raise ValueError(f"{name} contains id {bad} outside vocabulary of size {vocab}")
    if max_len is not None and arr.size > max_len:
        raise ValueError(f"{name} has length {arr.size} > maximum sequence length {max_len}")
    return arr


def _is_path(X) -> bool:
    if isinstance(X, os.PathLike):
        return True
    if not isinstance(X, str) or "\n" in X or len(X) > 4096:
        return False
    try:
        return Path(X).is_file()
    except OSError:
        return False


def check_byte_corpus(X) -> np.ndarray:
    """Coerce text, bytes, a path or an integer array into byte tokens (uint8 ids as int64)."""
    if _is_path(X):
        data = Path(X).read_bytes()
    elif isinstance(X, str):
        data = X.encode("utf-8")
    elif isinstance(X, (bytes, bytearray, memoryview)):
        data = bytes(X)
    else:
        arr = np.asarray(X)
        if arr.ndim != 1:
            raise ShapeError(f"corpus must be 1-D, got shape {arr.shape}")
        return check_tokens(arr, 256, name="corpus")
    if not data:
        raise ValueError("corpus is empty")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def check_positive(value, name: str):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return value
