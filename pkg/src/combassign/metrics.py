"""Clustering evaluation metrics and marginal entropy diagnostics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import ContractError, Prior

KL_EPS = 1e-8


@dataclass(frozen=True)
class ContingencyTable:
    """Co-occurrence counts, predicted clusters on rows and true classes on columns."""

    table: np.ndarray

    @classmethod
    def from_labels(cls, pred, true, k_pred: int | None = None, k_true: int | None = None) -> "ContingencyTable":
        pred = np.asarray(pred, dtype=np.int64)
        true = np.asarray(true, dtype=np.int64)
        if pred.shape != true.shape or pred.ndim != 1:
            raise ContractError("pred and true must be 1-d arrays of equal length")
        if pred.size == 0:
            raise ContractError("labels are empty")
        if pred.min() < 0 or true.min() < 0:
            raise ContractError("labels must be nonnegative")
        kp = int(pred.max()) + 1 if k_pred is None else k_pred
        kt = int(true.max()) + 1 if k_true is None else k_true
        table = np.zeros((kp, kt), dtype=np.int64)
        np.add.at(table, (pred, true), 1)
        return cls(table)

    @property
    def n(self) -> int:
        return int(self.table.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.table.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.table.sum(axis=0)


def hungarian(cost) -> np.ndarray:
    """Minimum-cost perfect matching of a square matrix (Kuhn-Munkres with potentials).

    Returns ``perm`` such that row ``i`` is matched to column ``perm[i]``.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ContractError(f"hungarian needs a square matrix, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ContractError("cost matrix must be finite")
    n = c.shape[0]
    # 1-based arrays; index 0 is the virtual root of each augmenting search.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_col = np.zeros(n + 1, dtype=np.int64)  # column j -> matched row
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            free = ~used[1:]
            reduced = c[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[match_col[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[match_col[j] - 1] = j - 1
    return perm


def _square_table(pred, true, k: int | None = None) -> np.ndarray:
    ct = ContingencyTable.from_labels(pred, true)
    size = max(max(ct.table.shape), k or 0)
    square = np.zeros((size, size), dtype=np.int64)
    square[: ct.table.shape[0], : ct.table.shape[1]] = ct.table
    return square


def best_matching(pred, true, k: int | None = None) -> np.ndarray:
    """Map each predicted cluster to the true class maximizing matched mass.

    The table is padded to at least ``k`` rows and columns, so the result
    always covers ``k`` clusters.
    """
    return hungarian(-_square_table(pred, true, k))


def matched_class_distribution(pred, true, k: int) -> np.ndarray:
    """True class frequencies re-indexed so entry ``j`` belongs to the class matched to cluster ``j``."""
    true = np.asarray(true, dtype=np.int64)
    perm = best_matching(pred, true, k)
    freq = np.bincount(true, minlength=perm.size) / true.size
    ref = freq[perm[:k]]
    total = ref.sum()
    return ref / total if total > 0 else np.full(k, 1.0 / k)


def clustering_accuracy(pred, true) -> float:
    """Fraction of points on the best one-to-one cluster/class matching."""
    square = _square_table(pred, true)
    perm = hungarian(-square)
    return float(square[np.arange(square.shape[0]), perm].sum() / square.sum())


def _entropy_from_counts(counts: np.ndarray) -> float:
    counts = counts[counts > 0].astype(np.float64)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_information(pred, true) -> float:
    ct = ContingencyTable.from_labels(pred, true)
    t = ct.table.astype(np.float64)
    n = t.sum()
    nz = t > 0
    outer = np.outer(ct.row_sums, ct.col_sums).astype(np.float64)
    return float((t[nz] / n * np.log(t[nz] * n / outer[nz])).sum())


def nmi(pred, true, average: str = "arithmetic") -> float:
    """Normalized mutual information (arithmetic-mean normalization by default)."""
    ct = ContingencyTable.from_labels(pred, true)
    h_pred = _entropy_from_counts(ct.row_sums)
    h_true = _entropy_from_counts(ct.col_sums)
    if h_pred == 0.0 and h_true == 0.0:
        return 1.0
    mi = max(mutual_information(pred, true), 0.0)
    if average == "arithmetic":
        denom = 0.5 * (h_pred + h_true)
    elif average == "geometric":
        denom = np.sqrt(h_pred * h_true)
        if denom == 0.0:
            return 0.0
    else:
        raise ContractError(f"unknown NMI normalization {average!r}")
    return float(min(mi / denom, 1.0))


def _comb2(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2.0


def ari(pred, true) -> float:
    """Adjusted Rand index from pair counts of the contingency table."""
    ct = ContingencyTable.from_labels(pred, true)
    index = _comb2(ct.table).sum()
    sum_rows = _comb2(ct.row_sums).sum()
    sum_cols = _comb2(ct.col_sums).sum()
    total = _comb2(ct.n)
    expected = sum_rows * sum_cols / total if total > 0 else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        # both partitions trivial (all singletons or one block each)
        return 1.0 if index == max_index else 0.0
    return float((index - expected) / (max_index - expected))


def kl_star(counts, prior: Prior | np.ndarray, clean: bool = False) -> float:
    """KL divergence of the empirical cluster distribution from ``prior``.

    Default form is sum_k q_k log(q_k / p_k + 1e-8). ``clean=True`` instead
    sums q_k log(q_k / p_k) over clusters with q_k > 0.
    """
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c < 0) or c.sum() <= 0:
        raise ContractError("counts must be nonnegative and not all zero")
    p = prior.probs if isinstance(prior, Prior) else np.asarray(prior, dtype=np.float64)
    if p.shape != c.shape:
        raise ContractError("counts and prior lengths differ")
    q = c / c.sum()
    p_safe = np.maximum(p, KL_EPS)
    if clean:
        nz = q > 0
        return float((q[nz] * np.log(q[nz] / p_safe[nz])).sum())
    return float((q * np.log(q / p_safe + KL_EPS)).sum())


def entropy(dist, base: float = np.e) -> float:
    d = np.asarray(dist, dtype=np.float64)
    nz = d[d > 0]
    return float(0.0 - (nz * np.log(nz)).sum() / np.log(base))


def marginal_entropies(assignments, base: float = np.e, k: int | None = None):
    """Entropies of the marginal hard (argmax) and soft (column-mean) cluster distributions.

    ``assignments`` is either an N x K soft matrix or a length-N label vector
    (then ``k`` sets the number of clusters and soft equals hard).
    Returns ``(hard_entropy, soft_entropy, hard_dist, soft_dist)``.
    """
    a = np.asarray(assignments)
    if a.ndim == 1:
        labels = a.astype(np.int64)
        k = int(labels.max()) + 1 if k is None else k
        hard = np.bincount(labels, minlength=k) / labels.size
        soft = hard.copy()
    elif a.ndim == 2:
        probs = a.astype(np.float64)
        k = probs.shape[1]
        hard = np.bincount(np.argmax(probs, axis=1), minlength=k) / probs.shape[0]
        soft = probs.mean(axis=0)
    else:
        raise ContractError("assignments must be labels or an N x K matrix")
    return entropy(hard, base), entropy(soft, base), hard, soft


@dataclass(frozen=True)
class MetricsReport:
    acc: float
    nmi: float
    ari: float
    kl_star_hard: float
    kl_star_soft: float
    hard_entropy: float
    soft_entropy: float

    def as_dict(self) -> dict:
        return asdict(self)
