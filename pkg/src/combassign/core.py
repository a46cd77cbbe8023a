"""Domain types and the Gaussian cost kernel shared by every assignment method."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class ContractError(ValueError):
    """Raised when an input violates a shape or domain precondition."""


def as_batch(data, d: int | None = None) -> np.ndarray:
    """Validate an N x d feature batch and return it as a float64 array."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ContractError(f"feature batch must be N x d with N, d >= 1, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise ContractError(f"feature dimension {arr.shape[1]} does not match model dimension {d}")
    if not np.all(np.isfinite(arr)):
        raise ContractError("feature batch contains non-finite values")
    return arr


@dataclass(frozen=True)
class Prior:
    """A probability vector over clusters; zero entries mark unassignable clusters."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size < 1:
            raise ContractError("prior must be a non-empty 1-d vector")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ContractError("prior entries must be finite and nonnegative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise ContractError(f"prior must sum to 1, sums to {p.sum()!r}")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, k: int) -> "Prior":
        return cls(np.full(k, 1.0 / k))

    @classmethod
    def from_weights(cls, weights) -> "Prior":
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / w.sum())

    @property
    def k(self) -> int:
        return self.probs.size

    @property
    def log_probs(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    def permuted(self, order) -> "Prior":
        """Prior whose entry ``j`` is this prior's entry ``order[j]``."""
        return Prior(self.probs[np.asarray(order)])


@dataclass(frozen=True)
class ClusterModel:
    """K centroids with either an isotropic variance or full per-cluster covariances.

    In isotropic mode ``sigma`` is the shared variance (Sigma = sigma * I).
    In full mode ``inv_covs`` holds K inverse covariance matrices and
    ``half_log_dets`` holds 0.5 * log|Sigma_k| for each cluster.
    """

    centroids: np.ndarray
    prior: Prior
    sigma: float | None = 100.0
    inv_covs: np.ndarray | None = None
    half_log_dets: np.ndarray | None = None

    def __post_init__(self):
        mu = np.asarray(self.centroids, dtype=np.float64)
        if mu.ndim != 2 or mu.shape[0] < 2:
            raise ContractError("need at least two centroids in a K x d matrix")
        if not np.all(np.isfinite(mu)):
            raise ContractError("centroids must be finite")
        object.__setattr__(self, "centroids", mu)
        if self.prior.k != mu.shape[0]:
            raise ContractError(f"prior has {self.prior.k} entries for {mu.shape[0]} centroids")
        if self.inv_covs is None:
            if self.sigma is None or not self.sigma > 0:
                raise ContractError("isotropic model needs sigma > 0")
            object.__setattr__(self, "sigma", float(self.sigma))
            return
        inv = np.asarray(self.inv_covs, dtype=np.float64)
        k, d = mu.shape
        if inv.shape != (k, d, d):
            raise ContractError(f"inverse covariances must have shape {(k, d, d)}, got {inv.shape}")
        if not np.allclose(inv, np.swapaxes(inv, 1, 2), rtol=1e-10, atol=1e-12):
            raise ContractError("inverse covariances must be symmetric")
        signs, logdets = np.linalg.slogdet(inv)
        if np.any(signs <= 0) or np.any(np.linalg.eigvalsh(inv) <= 0):
            raise ContractError("inverse covariances must be positive definite")
        if self.half_log_dets is None:
            # 0.5 * log|Sigma| = -0.5 * log|Sigma^-1|
            hld = -0.5 * logdets
        else:
            hld = np.asarray(self.half_log_dets, dtype=np.float64)
        object.__setattr__(self, "inv_covs", inv)
        object.__setattr__(self, "half_log_dets", hld)
        object.__setattr__(self, "sigma", None)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]

    @property
    def isotropic(self) -> bool:
        return self.inv_covs is None

    def with_centroids(self, centroids) -> "ClusterModel":
        return ClusterModel(centroids, self.prior, self.sigma, self.inv_covs, self.half_log_dets)

    def with_prior(self, prior: Prior) -> "ClusterModel":
        return ClusterModel(self.centroids, prior, self.sigma, self.inv_covs, self.half_log_dets)

    def constants(self) -> np.ndarray:
        """Per-cluster additive term 0.5 * log((2 pi)^d |Sigma_k|)."""
        if self.isotropic:
            return np.full(self.k, 0.5 * self.d * (LOG_2PI + np.log(self.sigma)))
        return 0.5 * self.d * LOG_2PI + self.half_log_dets


@dataclass(frozen=True)
class CostMatrix:
    """N x K table of negative Gaussian log-likelihoods.

    ``constant`` is the per-column additive term already folded into
    ``values`` (all zeros when the normalization constant was omitted).
    ``sqdist`` carries the raw squared Euclidean distances in isotropic mode.
    """

    values: np.ndarray
    constant: np.ndarray
    sigma: float | None = None
    sqdist: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_values(cls, values) -> "CostMatrix":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim != 2:
            raise ContractError(f"cost matrix must be 2-d, got shape {v.shape}")
        return cls(v, np.zeros(v.shape[1]))


@dataclass
class BatchAssignment:
    labels: np.ndarray
    counts: np.ndarray
    loss: float

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)

    @classmethod
    def from_labels(cls, labels, costs: CostMatrix) -> "BatchAssignment":
        labels = np.asarray(labels, dtype=np.int64)
        counts = np.bincount(labels, minlength=costs.k)
        loss = float(costs.values[np.arange(costs.n), labels].mean())
        return cls(labels, counts, loss)

    def one_hot(self, k: int | None = None) -> np.ndarray:
        k = self.counts.size if k is None else k
        q = np.zeros((self.labels.size, k))
        q[np.arange(self.labels.size), self.labels] = 1.0
        return q


def point_cost(z, j: int, model: ClusterModel) -> float:
    """Negative log density of ``z`` under cluster ``j``.

    Returns 0.5 (z - mu_j)^T Sigma_j^-1 (z - mu_j) + 0.5 log((2 pi)^d |Sigma_j|).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size != model.d:
        raise ContractError(f"point of shape {z.shape} does not match model dimension {model.d}")
    if not np.all(np.isfinite(z)):
        raise ContractError("point contains non-finite values")
    if not 0 <= j < model.k:
        raise ContractError(f"cluster index {j} out of range for K={model.k}")
    diff = z - model.centroids[j]
    if model.isotropic:
        quad = float(diff @ diff) / model.sigma
    else:
        quad = float(diff @ model.inv_covs[j] @ diff)
    return 0.5 * quad + float(model.constants()[j])


def squared_distances(z: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = z[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def cost_matrix(batch, model: ClusterModel, include_constant: bool = True) -> CostMatrix:
    """Evaluate every point of ``batch`` against every cluster of ``model``."""
    z = as_batch(batch, model.d)
    const = model.constants() if include_constant else np.zeros(model.k)
    if model.isotropic:
        sq = squared_distances(z, model.centroids)
        values = sq / (2.0 * model.sigma) + const
        return CostMatrix(values, const, model.sigma, sq)
    diff = z[:, None, :] - model.centroids[None, :, :]
    quad = np.einsum("nku,kuv,nkv->nk", diff, model.inv_covs, diff)
    return CostMatrix(0.5 * quad + const, const)


def log_factorial(n) -> np.ndarray:
    """log(n!) for integer arrays, by summed logarithms (no Stirling)."""
    n = np.asarray(n, dtype=np.int64)
    if n.size == 0:
        return np.zeros(n.shape)
    top = int(n.max())
    table = np.concatenate([[0.0], np.cumsum(np.log(np.arange(1, top + 1, dtype=np.float64)))])
    return table[n]


def batch_objective(assignment: BatchAssignment | np.ndarray, costs: CostMatrix, prior: Prior) -> float:
    """MAP objective of a hard assignment: sum_i [c(i, k_i) - log p(k_i)] + sum_k log(n_k!).

    Assigning any point to a zero-prior cluster yields ``inf``.
    """
    labels = assignment.labels if isinstance(assignment, BatchAssignment) else np.asarray(assignment)
    n, k = costs.shape
    if labels.shape != (n,) or prior.k != k:
        raise ContractError("assignment, costs and prior shapes disagree")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ContractError("label out of range")
    logp = prior.log_probs[labels]
    if np.any(np.isneginf(logp)):
        return float("inf")
    counts = np.bincount(labels, minlength=k)
    return float(costs.values[np.arange(n), labels].sum() - logp.sum() + log_factorial(counts).sum())
