"""Stable softmax machinery, normalization and seeded randomness.

Everything is float64. Matrices are plain ``numpy.ndarray`` objects; the
helpers here add the shape and finiteness checks the rest of the package
relies on.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ContractError, NumericError

DEFAULT_EPS = 1e-12


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite values")


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    """Log of softmax along ``axis`` via max-subtraction.

    Works on a vector or on a batch of rows.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0 or x.shape[axis] == 0:
        raise ContractError("log_softmax of an empty vector")
    check_finite(x, "logits")
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax(logits, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


def l2_normalize(v, eps: float = DEFAULT_EPS, axis: int = -1) -> np.ndarray:
    """Return ``v / max(||v||, eps)`` along ``axis``."""
    x = np.asarray(v, dtype=np.float64)
    if x.size == 0:
        raise ContractError("l2_normalize of an empty vector")
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    return x / np.maximum(norm, eps)


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a) -> np.ndarray:
    return as_matrix(a).T.copy()


def elementwise(op, a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    return op(a, b)


def _label_key(label) -> int:
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *labels) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a label path.

    ``make_rng(s, "pretrain")`` and ``make_rng(s, "episodes", 3)`` are
    independent streams, and neither depends on how many draws another
    stream has made.
    """
    if seed < 0:
        raise ContractError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_label_key(x) for x in labels))
    return np.random.Generator(np.random.Philox(ss))
