"""Combination assignment: the count-penalized greedy solver and its exact oracle."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field

import numpy as np

from .core import (
    BatchAssignment,
    ClusterModel,
    ContractError,
    CostMatrix,
    Prior,
    as_batch,
    batch_objective,
    log_factorial,
    squared_distances,
)

EXACT_GUARD = 10**7


@dataclass
class GreedyTrace:
    """Assignment order of one greedy pass: (point, cluster, penalized cost) per step."""

    order: list[tuple[int, int, float]] = field(default_factory=list)
    had_ties: bool = False


def _penalty(prior: Prior, counts: np.ndarray) -> np.ndarray:
    # -log p(k) + log(n_k + 1); +inf for zero-prior clusters
    with np.errstate(divide="ignore"):
        return -np.log(prior.probs) + np.log(counts + 1.0)


def conditional_costs(cost_row, prior: Prior, counts) -> np.ndarray:
    """Cost of adding one point to each cluster given the current counts."""
    row = np.asarray(cost_row, dtype=np.float64)
    counts = np.asarray(counts)
    if row.shape != (prior.k,) or counts.shape != (prior.k,):
        raise ContractError("cost row, prior and counts must all have length K")
    if np.any(counts < 0):
        raise ContractError("counts must be nonnegative")
    return row + _penalty(prior, counts.astype(np.float64))


def _check_inputs(costs: CostMatrix, prior: Prior, init_counts):
    values = np.asarray(costs.values, dtype=np.float64)
    n, k = values.shape
    if prior.k != k:
        raise ContractError(f"prior has {prior.k} entries for {k} cost columns")
    if np.any(np.isnan(values)):
        raise ContractError("cost matrix contains NaN")
    if not np.all(np.isfinite(values)):
        raise ContractError("cost matrix contains non-finite values")
    if not np.any(prior.probs > 0):
        raise ContractError("every cluster has zero prior mass")
    counts = np.zeros(k, dtype=np.int64) if init_counts is None else np.array(init_counts, dtype=np.int64)
    if counts.shape != (k,) or np.any(counts < 0):
        raise ContractError("init_counts must be a nonnegative length-K vector")
    return values, counts


def assign_greedy(
    costs: CostMatrix,
    prior: Prior,
    init_counts=None,
    naive: bool = False,
) -> tuple[BatchAssignment, GreedyTrace]:
    """Assign a batch by repeatedly committing the globally cheapest (point, cluster) pair.

    The pair cost is the raw cost minus the log prior plus log(n_k + 1),
    where ``n_k`` counts points already placed in cluster ``k`` (starting from
    ``init_counts``). Ties go to the lowest point index, then the lowest
    cluster index. The returned counts cover this batch only; the loss is the
    mean raw assigned cost.

    ``naive=True`` rescans the full table every step instead of using the
    lazily invalidated heap; both paths give identical results.
    """
    values, counts = _check_inputs(costs, prior, init_counts)
    if naive:
        labels, trace = _greedy_rescan(values, prior, counts)
    else:
        labels, trace = _greedy_heap(values, prior, counts)
    return BatchAssignment.from_labels(labels, costs), trace


def _greedy_rescan(values, prior, counts):
    n, k = values.shape
    labels = np.full(n, -1, dtype=np.int64)
    unassigned = np.ones(n, dtype=bool)
    trace = GreedyTrace()
    for _ in range(n):
        table = values + _penalty(prior, counts.astype(np.float64))
        table[~unassigned] = np.inf
        best = table.min()
        hits = np.flatnonzero(table.ravel() == best)
        if hits.size > 1:
            trace.had_ties = True
        i, j = divmod(int(hits[0]), k)
        labels[i] = j
        unassigned[i] = False
        counts[j] += 1
        trace.order.append((i, j, float(best)))
    return labels, trace


def _greedy_heap(values, prior, counts):
    # Each heap entry is a point's current best (value, point, cluster, version of
    # that cluster's penalty). Penalties only grow, so keys are lower bounds and an
    # entry whose cluster version is unchanged is the true global minimum.
    n, k = values.shape
    rows = values.tolist()
    pen = _penalty(prior, counts.astype(np.float64)).tolist()
    version = [0] * k
    assigned = [False] * n
    labels = np.full(n, -1, dtype=np.int64)
    trace = GreedyTrace()

    def best_of(i):
        r = rows[i]
        bj, bv = 0, r[0] + pen[0]
        for j in range(1, k):
            v = r[j] + pen[j]
            if v < bv:
                bj, bv = j, v
        return bv, bj

    heap = []
    for i in range(n):
        v, j = best_of(i)
        heap.append((v, i, j, version[j]))
    heapq.heapify(heap)

    done = 0
    while done < n:
        v, i, j, ver = heapq.heappop(heap)
        if assigned[i]:
            continue
        if ver != version[j]:
            nv, nj = best_of(i)
            heapq.heappush(heap, (nv, i, nj, version[nj]))
            continue
        if not trace.had_ties:
            trace.had_ties = _tie_pending(heap, v, i, j, rows, pen, version, assigned, best_of)
        assigned[i] = True
        labels[i] = j
        counts[j] += 1
        pen[j] = float(_penalty(prior, counts.astype(np.float64))[j])
        version[j] += 1
        trace.order.append((i, j, v))
        done += 1
    return labels, trace


def _tie_pending(heap, v, i, j, rows, pen, version, assigned, best_of) -> bool:
    r = rows[i]
    if any(r[c] + pen[c] == v for c in range(len(pen)) if c != j):
        return True
    # Refresh stale entries sitting at the same key until a valid one (a tie) or a larger key shows up.
    while heap and heap[0][0] == v:
        _, i2, j2, ver2 = heap[0]
        if assigned[i2]:
            heapq.heappop(heap)
            continue
        if ver2 == version[j2]:
            return True
        heapq.heappop(heap)
        nv, nj = best_of(i2)
        heapq.heappush(heap, (nv, i2, nj, version[nj]))
    return False


def assign_exact(costs: CostMatrix, prior: Prior) -> BatchAssignment:
    """Exact minimizer of the batch objective by exhaustive enumeration.

    Label vectors are visited in lexicographic order and the first minimum
    wins. Refuses instances with K**N above ``EXACT_GUARD``.
    """
    values = np.asarray(costs.values, dtype=np.float64)
    n, k = values.shape
    if prior.k != k:
        raise ContractError(f"prior has {prior.k} entries for {k} cost columns")
    if k**n > EXACT_GUARD:
        raise ContractError(f"K^N = {k}^{n} exceeds the enumeration guard of {EXACT_GUARD}")
    logp = prior.log_probs
    lf = log_factorial(np.arange(n + 1))
    unit = values - logp  # per-point cost of each label, +inf where p = 0

    best_val, best_labels = np.inf, None
    # Chunk over the leading labels so memory stays bounded.
    lead = max(0, n - 12)
    tail = n - lead
    tail_labels = np.array(list(itertools.product(range(k), repeat=tail)), dtype=np.int64).reshape(-1, tail)
    tail_unit = unit[lead:][np.arange(tail), tail_labels].sum(axis=1)
    tail_counts = np.stack([(tail_labels == j).sum(axis=1) for j in range(k)], axis=1)
    for head in itertools.product(range(k), repeat=lead):
        head = np.array(head, dtype=np.int64)
        head_unit = unit[np.arange(lead), head].sum() if lead else 0.0
        counts = tail_counts + np.bincount(head, minlength=k)
        with np.errstate(invalid="ignore"):
            obj = head_unit + tail_unit + lf[counts].sum(axis=1)
        obj = np.where(np.isnan(obj), np.inf, obj)
        idx = int(np.argmin(obj))
        if obj[idx] < best_val:
            best_val = float(obj[idx])
            best_labels = np.concatenate([head, tail_labels[idx]])
    if best_labels is None:
        raise ContractError("no assignment with finite objective exists")
    return BatchAssignment.from_labels(best_labels, costs)


def exact_objective_dfs(costs: CostMatrix, prior: Prior) -> float:
    """Minimum batch objective by depth-first search from the last point backwards.

    An independent second enumerator (different order, incremental counts,
    scalar arithmetic) used to cross-check ``assign_exact``.
    """
    values = np.asarray(costs.values, dtype=np.float64)
    n, k = values.shape
    if k**n > EXACT_GUARD:
        raise ContractError(f"K^N = {k}^{n} exceeds the enumeration guard of {EXACT_GUARD}")
    import math

    logp = [math.log(p) if p > 0 else None for p in prior.probs]
    counts = [0] * k
    best = [math.inf]

    def rec(i, acc):
        if i < 0:
            best[0] = min(best[0], acc)
            return
        for j in reversed(range(k)):
            if logp[j] is None:
                continue
            counts[j] += 1
            # log(n!) grows by log(n) when the n-th point joins
            rec(i - 1, acc + float(values[i, j]) - logp[j] + math.log(counts[j]))
            counts[j] -= 1

    rec(n - 1, 0.0)
    return best[0]


def infer_point(z, model: ClusterModel) -> int:
    """Nearest centroid by Euclidean distance; ties go to the lowest index."""
    z = as_batch(z, model.d)
    if z.shape[0] != 1:
        raise ContractError("infer_point takes a single point")
    return int(np.argmin(squared_distances(z, model.centroids)[0]))


def infer_batch(z, model: ClusterModel) -> np.ndarray:
    z = as_batch(z, model.d)
    return np.argmin(squared_distances(z, model.centroids), axis=1)


def _entropy_counts(c: np.ndarray) -> float:
    total = c.sum()
    p = c[c > 0] / total
    return float(-(p * np.log(p)).sum())


def lemma1_check(counts, k: int, k_prime: int, n: int | None = None) -> tuple[float, float, float]:
    """Compare the entropy gain of assigning to ``k`` vs ``k_prime`` with its log approximation.

    Returns ``(exact_diff, approx_diff, dropped_term)`` where ``exact_diff`` is
    H(after adding to k) - H(after adding to k'), ``approx_diff`` is
    [log(x_k' + 1) - log(x_k + 1)] / (N + 1) and ``dropped_term`` is
    (x_k' - x_k) / [(N + 1)(x_k + 1)(x_k' + 1)].
    """
    x = np.asarray(counts, dtype=np.int64)
    n = int(x.sum()) if n is None else n
    if x.sum() != n:
        raise ContractError("counts must sum to N")
    if k == k_prime:
        raise ContractError("k and k' must differ")
    after_k = x.copy()
    after_k[k] += 1
    after_kp = x.copy()
    after_kp[k_prime] += 1
    exact = _entropy_counts(after_k) - _entropy_counts(after_kp)
    xk, xkp = float(x[k]), float(x[k_prime])
    approx = (np.log(xkp + 1) - np.log(xk + 1)) / (n + 1)
    dropped = (xkp - xk) / ((n + 1) * (xk + 1) * (xkp + 1))
    return exact, float(approx), float(dropped)


def equivalence_check(costs: CostMatrix, counts) -> bool:
    """True iff the Gaussian conditional rule and the scaled-distance table pick the same cluster.

    Compares, for every row, argmin of c(i, k) + log K + log(n_k + 1) with
    argmin of ||z_i - mu_k||^2 + 2 sigma log(n_k + 1). Isotropic costs only.
    """
    if costs.sigma is None or costs.sqdist is None:
        raise ContractError("equivalence holds only for isotropic costs with stored squared distances")
    counts = np.asarray(counts, dtype=np.float64)
    prior = Prior.uniform(costs.k)
    pen = np.log(counts + 1.0)
    for i in range(costs.n):
        a = int(np.argmin(conditional_costs(costs.values[i], prior, counts)))
        b = int(np.argmin(costs.sqdist[i] + 2.0 * costs.sigma * pen))
        if a != b:
            return False
    return True
