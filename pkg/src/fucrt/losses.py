"""The three terms of the unlearning training loss.

Cross-entropy plus the local and global class-aware contrastive terms,
with exact per-sample values and analytic gradients w.r.t. the (already
L2-normalized) representations. Values are batch means; the contrastive
terms expect normalized representations, normalization gradients are
handled by the caller.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ConfigurationError, DiagnosticsWarning

if TYPE_CHECKING:  # pragma: no cover
    from .federation import PrototypeBank

PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class LossConfig:
    """Coefficients of the combined loss: CE + lambda1*local + lambda2*global."""

    lambda1: float = 0.0
    lambda2: float = 0.0
    tau_t: float = 0.5

    def __post_init__(self):
        if self.tau_t <= 0.0:
            raise ConfigurationError(f"temperature tau_t must be positive, got {self.tau_t}")
        if self.lambda1 < 0.0 or self.lambda2 < 0.0:
            raise ConfigurationError("contrastive coefficients must be non-negative")


def l2_normalize(reps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise L2 normalization; returns (unit rows, norms).

    Norms are floored at 1e-12 so an all-zero representation does not
    produce NaNs (the gradient there is meaningless but finite).
    """
    norms = np.linalg.norm(reps, axis=1)
    safe = np.maximum(norms, 1e-12)
    return reps / safe[:, None], safe


def cross_entropy(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log probability of the true class.

    True-class probabilities of exactly zero are clamped at 1e-300 and a
    diagnostics warning is emitted.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    p_true = probabilities[np.arange(len(labels)), labels]
    if np.any(p_true < PROB_FLOOR):
        warnings.warn(
            "true-class probability underflow clamped at 1e-300",
            DiagnosticsWarning,
            stacklevel=2,
        )
        p_true = np.maximum(p_true, PROB_FLOOR)
    return float(-np.mean(np.log(p_true)))


def cross_entropy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    """Cross-entropy evaluated from logits via log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    true = shifted[np.arange(len(labels)), labels]
    return float(np.mean(lse - true))


def _local_terms(zhat: np.ndarray, labels: np.ndarray, tau_t: float, with_grad: bool):
    n = zhat.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    sims = (zhat @ zhat.T) / tau_t
    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    n_pos = pos.sum(axis=1)
    anchors = n_pos > 0

    exp_sims = np.exp(sims)
    np.fill_diagonal(exp_sims, 0.0)
    denom = exp_sims.sum(axis=1)

    value = 0.0
    if np.any(anchors):
        per_anchor = -(sims * pos).sum(axis=1)[anchors] / n_pos[anchors] + np.log(denom[anchors])
        value = float(per_anchor.sum() / n)

    if not with_grad:
        return value, None

    # dL/dsims, zero rows for anchors without positives and zero diagonal.
    g = np.zeros_like(sims)
    if np.any(anchors):
        g[anchors] = exp_sims[anchors] / denom[anchors, None]
        g[anchors] -= pos[anchors] / n_pos[anchors, None]
        g /= n
    grad = (g + g.T) @ zhat / tau_t
    return value, grad


def local_contrastive(reps: np.ndarray, labels: np.ndarray, tau_t: float) -> float:
    """Batch-mean supervised contrastive loss over same-label pairs.

    Positives for anchor i are the other samples sharing its label; the
    denominator runs over every other sample. Anchors without positives
    contribute zero. ``reps`` must already be L2-normalized.
    """
    if tau_t <= 0.0:
        raise ConfigurationError(f"temperature tau_t must be positive, got {tau_t}")
    value, _ = _local_terms(np.asarray(reps, dtype=np.float64), labels, tau_t, with_grad=False)
    return value


def _global_terms(
    zhat: np.ndarray,
    labels: np.ndarray,
    vectors: np.ndarray,
    present: np.ndarray,
    tau_t: float,
    with_grad: bool,
):
    n = zhat.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    covered = present[labels]
    if not np.all(covered):
        missing = sorted(set(labels[~covered].tolist()))
        warnings.warn(
            f"no prototype for batch classes {missing}; their samples skipped",
            DiagnosticsWarning,
            stacklevel=3,
        )

    sims = (zhat @ vectors.T) / tau_t  # n x C
    exp_sims = np.exp(sims)
    own = exp_sims[np.arange(n), labels]
    denom = exp_sims.sum(axis=1) - own  # excludes the anchor's own class
    terms = -sims[np.arange(n), labels] + np.log(denom)
    terms = np.where(covered, terms, 0.0)
    value = float(terms.sum() / n)

    if not with_grad:
        return value, None

    g = exp_sims / denom[:, None]
    g[np.arange(n), labels] = -1.0
    g[~covered] = 0.0
    grad = (g / n) @ vectors / tau_t
    return value, grad


def global_contrastive(
    reps: np.ndarray, labels: np.ndarray, prototypes: "PrototypeBank", tau_t: float
) -> float:
    """Batch-mean prototype contrastive loss.

    Each sample is pulled toward its class prototype; the denominator sums
    over the other class prototypes only (the own-class term is excluded),
    so the value can be negative. Samples whose class has no present
    prototype are skipped with a coverage warning. ``reps`` and the
    prototype vectors must be L2-normalized.
    """
    if tau_t <= 0.0:
        raise ConfigurationError(f"temperature tau_t must be positive, got {tau_t}")
    value, _ = _global_terms(
        np.asarray(reps, dtype=np.float64),
        labels,
        np.asarray(prototypes.vectors, dtype=np.float64),
        np.asarray(prototypes.present, dtype=bool),
        tau_t,
        with_grad=False,
    )
    return value


def total_loss(ce: float, local: float, global_: float, config: LossConfig) -> float:
    """Combined training loss: CE + lambda1*local + lambda2*global."""
    return float(ce + config.lambda1 * local + config.lambda2 * global_)
