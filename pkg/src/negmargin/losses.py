"""Additive-margin softmax loss with signed margins.

For a sample with label ``y`` the logits are ``beta * s_j`` for ``j != y``
and ``beta * (s_y - m)`` for the true class, followed by (optionally
label-smoothed) cross-entropy. ``m < 0`` relaxes the true-class target,
``m > 0`` is the usual large-margin setting, ``m = 0`` is plain softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import ContractError, NumericError
from .model import check_similarity
from .numerics import check_finite, log_softmax

DEFAULT_TEMPERATURE = {"cosine": 10.0, "inner_product": 1.0}


@dataclass(frozen=True)
class LossSpec:
    margin: float = 0.0
    temperature: float = 10.0
    similarity: str = "cosine"
    label_smoothing: float = 0.0

    def __post_init__(self):
        check_similarity(self.similarity)
        if not self.temperature > 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ContractError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if not np.isfinite(self.margin):
            raise ContractError(f"margin must be finite, got {self.margin}")

    def with_margin(self, margin: float) -> "LossSpec":
        return replace(self, margin=float(margin))


def _check_labels(labels, n: int, c: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= c):
        bad = y[(y < 0) | (y >= c)] if np.issubdtype(y.dtype, np.integer) else y
        raise ContractError(f"labels must be integers in [0, {c}), got {bad[:5].tolist()}")
    return y.astype(np.intp)


def margin_logits(scores: np.ndarray, labels: np.ndarray, spec: LossSpec) -> np.ndarray:
    logits = spec.temperature * scores
    logits[np.arange(len(labels)), labels] -= spec.temperature * spec.margin
    return logits


def margin_loss(scores, labels, spec: LossSpec) -> tuple[float, np.ndarray]:
    """Mean margin-softmax loss over the batch and its gradient w.r.t. ``scores``."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] == 0 or s.shape[1] == 0:
        raise ContractError(f"scores must be a non-empty N x C matrix, got shape {s.shape}")
    check_finite(s, "scores")
    n, c = s.shape
    y = _check_labels(labels, n, c)
    logp = log_softmax(margin_logits(s, y, spec), axis=1)
    target = np.full((n, c), spec.label_smoothing / c)
    target[np.arange(n), y] += 1.0 - spec.label_smoothing
    loss = -np.sum(target * logp) / n
    grad = spec.temperature * (np.exp(logp) - target) / n
    return float(loss), grad


class MarginOrdering(NamedTuple):
    loss_low: float
    loss_high: float
    ordered: bool


def loss_monotonicity_witness(scores, labels, spec: LossSpec, m1: float, m2: float,
                              tol: float = 1e-12) -> MarginOrdering:
    """Evaluate the loss at two margins ``m1 < m2`` and check ``L(m1) <= L(m2)``.

    Holds whenever ``label_smoothing == 0`` because ``dL/dm = beta * (1 - p_y)``.
    Raises ``NumericError`` if the ordering is violated.
    """
    if not m1 < m2:
        raise ContractError(f"need m1 < m2, got {m1} and {m2}")
    low, _ = margin_loss(scores, labels, spec.with_margin(m1))
    high, _ = margin_loss(scores, labels, spec.with_margin(m2))
    if low > high + tol:
        raise NumericError(f"loss decreased with margin: L({m1})={low!r} > L({m2})={high!r}")
    return MarginOrdering(low, high, True)
