"""Competing partition-support methods operating on a cost matrix.

Each loss function has a ``*_grad`` companion returning d(loss)/d(costs),
which the trainer chains back through the cost kernel.

Default weights (ENT: 100 / 0.1, SS and VarM: 10 / 0.1, Sinkhorn eps 0.5 with
15 iterations) are config defaults, not derived quantities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import BatchAssignment, ContractError, CostMatrix

ENT_WEIGHTS = (100.0, 0.1)
VAR_WEIGHTS = (10.0, 0.1)
SK_EPS = 0.5
SK_NITERS = 15


@dataclass(frozen=True)
class SoftAssignment:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
            raise ContractError("soft assignment must be an N x K matrix of probabilities")
        if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
            raise ContractError("soft assignment rows must sum to 1")
        object.__setattr__(self, "probs", p)

    @property
    def marginal(self) -> np.ndarray:
        return self.probs.mean(axis=0)

    def hard_labels(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)


def _values(costs) -> np.ndarray:
    return costs.values if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=np.float64)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _entropy(p: np.ndarray, axis=-1) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -t.sum(axis=axis)


def sinkhorn(scores, eps: float = SK_EPS, niters: int = SK_NITERS) -> SoftAssignment:
    """Sinkhorn-Knopp balancing of exp(scores / eps) toward uniform cluster marginals.

    Runs in the log domain. The K x N transport plan starts column-normalized,
    then alternates scaling rows to 1/K and columns to 1/N; the result is
    returned N x K with rows renormalized to 1.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 2:
        raise ContractError("scores must be an N x K matrix")
    if niters < 1 or not eps > 0:
        raise ContractError("sinkhorn needs niters >= 1 and eps > 0")
    if np.any(np.isnan(s)):
        raise ContractError("scores contain NaN")
    n, k = s.shape
    log_q = s.T / eps
    log_q = log_q - logsumexp(log_q, axis=0, keepdims=True)
    log_r, log_c = -np.log(k), -np.log(n)
    for _ in range(niters):
        log_q = log_q + (log_r - logsumexp(log_q, axis=1, keepdims=True))
        log_q = log_q + (log_c - logsumexp(log_q, axis=0, keepdims=True))
    log_q = log_q - logsumexp(log_q, axis=0, keepdims=True)
    return SoftAssignment(np.exp(log_q.T))


def sinkhorn_direct(scores, eps: float = SK_EPS, niters: int = SK_NITERS) -> np.ndarray:
    """Plain exponentiated Sinkhorn iteration; only safe for moderate scores / eps."""
    q = np.exp(np.asarray(scores, dtype=np.float64) / eps).T
    q /= q.sum(axis=0)
    k, n = q.shape
    r, c = np.ones(k) / k, np.ones(n) / n
    for _ in range(niters):
        q *= (r / q.sum(axis=1))[:, None]
        q *= (c / q.sum(axis=0))[None, :]
    return (q / q.sum(axis=0, keepdims=True)).T


def assign_sinkhorn(costs: CostMatrix, eps: float = SK_EPS, niters: int = SK_NITERS):
    soft = sinkhorn(-costs.values, eps, niters)
    return BatchAssignment.from_labels(soft.hard_labels(), costs), soft


def assign_noreg(costs: CostMatrix) -> BatchAssignment:
    return BatchAssignment.from_labels(np.argmin(costs.values, axis=1), costs)


def _assigned_mean_grad(values: np.ndarray, labels: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    g = np.zeros_like(values)
    g[np.arange(n), labels] = 1.0 / n
    return g


def _softmax_backward(soft: np.ndarray, d_soft: np.ndarray) -> np.ndarray:
    # soft = softmax(-costs) row-wise; returns d/d(costs)
    inner = (d_soft * soft).sum(axis=1, keepdims=True)
    return -soft * (d_soft - inner)


def entropy_reg_loss(costs, w_ent: float = ENT_WEIGHTS[0], w_point: float = ENT_WEIGHTS[1]):
    """Marginal-entropy regularizer: -w_ent H(mean soft) + w_point mean_i H(soft_i), in nats."""
    if w_ent < 0 or w_point < 0:
        raise ContractError("weights must be nonnegative")
    values = _values(costs)
    soft = softmax(-values)
    loss = -w_ent * _entropy(soft.mean(axis=0)) + w_point * _entropy(soft, axis=1).mean()
    return float(loss), np.argmin(values, axis=1)


def entropy_reg_grad(costs, w_ent: float = ENT_WEIGHTS[0], w_point: float = ENT_WEIGHTS[1]) -> np.ndarray:
    values = _values(costs)
    n = values.shape[0]
    soft = softmax(-values)
    m = soft.mean(axis=0)
    tiny = np.finfo(np.float64).tiny
    # dH(p)/dp = -(log p + 1); constant parts vanish through the softmax Jacobian
    d_soft = w_ent * (np.log(np.maximum(m, tiny)) + 1.0)[None, :] / n
    d_soft = d_soft - w_point * (np.log(np.maximum(soft, tiny)) + 1.0) / n
    return _softmax_backward(soft, d_soft)


def _variance_reg(m: np.ndarray, variant: str) -> float:
    if variant == "ss":
        return float(np.mean(m**2))
    if variant == "varm":
        return float(np.var(m))
    raise ContractError(f"unknown variance variant {variant!r}")


def variance_loss(costs, variant: str = "ss", w_reg: float = VAR_WEIGHTS[0], w_point: float = VAR_WEIGHTS[1]):
    """Sum-of-squares (``"ss"``) or variance (``"varm"``) of the mean soft assignment.

    Adds ``w_point`` times the mean nearest-cluster cost.
    """
    if w_reg < 0 or w_point < 0:
        raise ContractError("weights must be nonnegative")
    values = _values(costs)
    labels = np.argmin(values, axis=1)
    m = softmax(-values).mean(axis=0)
    loss = w_reg * _variance_reg(m, variant.lower()) + w_point * values[np.arange(values.shape[0]), labels].mean()
    return float(loss), labels


def variance_grad(costs, variant: str = "ss", w_reg: float = VAR_WEIGHTS[0], w_point: float = VAR_WEIGHTS[1]):
    values = _values(costs)
    n, k = values.shape
    soft = softmax(-values)
    m = soft.mean(axis=0)
    variant = variant.lower()
    if variant == "ss":
        d_m = 2.0 * m / k
    elif variant == "varm":
        d_m = 2.0 * (m - m.mean()) / k
    else:
        raise ContractError(f"unknown variance variant {variant!r}")
    d_soft = np.broadcast_to(w_reg * d_m / n, soft.shape)
    labels = np.argmin(values, axis=1)
    return _softmax_backward(soft, d_soft) + w_point * _assigned_mean_grad(values, labels)
