"""Online training loop that backpropagates the assigned distance term.

All six methods share :class:`Trainer`; they differ only in the callback
registered in :data:`METHODS`, which maps a batch cost matrix to hard labels
and a scalar loss together with d(loss)/d(costs).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import baselines
from .assign import assign_greedy, infer_batch
from .core import ClusterModel, ContractError, CostMatrix, Prior, cost_matrix
from .data import LabeledDataset
from .encoder import AdamState, EncoderParams, adam_step, backward, cost_backward, forward
from .metrics import (
    MetricsReport,
    ari,
    best_matching,
    clustering_accuracy,
    entropy,
    kl_star,
    matched_class_distribution,
    nmi,
)

log = logging.getLogger(__name__)

RIDGE = 1e-6


@dataclass
class TrainConfig:
    method: str = "ca"
    epochs: int = 1
    batch_size: int = 256
    k: int = 10
    nz: int = 128
    sigma: float = 100.0
    lr: float = 1e-3
    prior: str | tuple = "uniform"
    seed: int = 0
    warm_start: bool = False
    keep_counts_across_batches: bool = False
    estimate_covars: bool = False
    encoder: str = "mlp"
    hidden: int = 64
    best_by: str = "nmi"
    # how an explicit prior is re-indexed onto clusters after each eval pass
    prior_alignment: str = "rank"
    sk_eps: float = baselines.SK_EPS
    sk_niters: int = baselines.SK_NITERS
    w_ent: float = baselines.ENT_WEIGHTS[0]
    w_point_ent: float = baselines.ENT_WEIGHTS[1]
    w_reg: float = baselines.VAR_WEIGHTS[0]
    w_point_var: float = baselines.VAR_WEIGHTS[1]

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        if self.epochs < 1:
            raise ContractError("epochs must be at least 1")
        if self.batch_size < 1 or self.k < 2:
            raise ContractError("batch_size must be >= 1 and k >= 2")
        if not self.sigma > 0 or not self.lr > 0:
            raise ContractError("sigma and lr must be positive")
        if self.best_by not in ("nmi", "last"):
            raise ContractError("best_by must be 'nmi' or 'last'")
        if self.prior_alignment not in ("none", "rank", "labels"):
            raise ContractError("prior_alignment must be 'none', 'rank' or 'labels'")
        if self.batch_size < self.k:
            warnings.warn(f"batch_size {self.batch_size} is smaller than k={self.k}", stacklevel=2)

    def make_prior(self) -> Prior:
        if isinstance(self.prior, str):
            if self.prior != "uniform":
                raise ContractError(f"unknown prior {self.prior!r}")
            return Prior.uniform(self.k)
        prior = Prior.from_weights(self.prior)
        if prior.k != self.k:
            raise ContractError(f"explicit prior has {prior.k} entries for k={self.k}")
        return prior

    def as_dict(self) -> dict:
        d = asdict(self)
        if not isinstance(self.prior, str):
            d["prior"] = [float(p) for p in self.prior]
        return d


@dataclass
class MethodStep:
    labels: np.ndarray
    loss: float
    dcost: np.ndarray
    soft: np.ndarray


def _onehot_grad(n: int, k: int, labels: np.ndarray) -> np.ndarray:
    g = np.zeros((n, k))
    g[np.arange(n), labels] = 1.0 / n
    return g


def _step_ca(costs: CostMatrix, prior: Prior, counts: np.ndarray, cfg: TrainConfig) -> MethodStep:
    assignment, _ = assign_greedy(costs, prior, counts)
    n, k = costs.shape
    soft = baselines.softmax(-costs.values)
    return MethodStep(assignment.labels, assignment.loss, _onehot_grad(n, k, assignment.labels), soft)


def _step_noreg(costs, prior, counts, cfg) -> MethodStep:
    a = baselines.assign_noreg(costs)
    n, k = costs.shape
    return MethodStep(a.labels, a.loss, _onehot_grad(n, k, a.labels), baselines.softmax(-costs.values))


def _step_sk(costs, prior, counts, cfg) -> MethodStep:
    a, soft = baselines.assign_sinkhorn(costs, cfg.sk_eps, cfg.sk_niters)
    n, k = costs.shape
    return MethodStep(a.labels, a.loss, _onehot_grad(n, k, a.labels), soft.probs)


def _step_ent(costs, prior, counts, cfg) -> MethodStep:
    loss, labels = baselines.entropy_reg_loss(costs, cfg.w_ent, cfg.w_point_ent)
    grad = baselines.entropy_reg_grad(costs, cfg.w_ent, cfg.w_point_ent)
    return MethodStep(labels, loss, grad, baselines.softmax(-costs.values))


def _variance_step(variant):
    def step(costs, prior, counts, cfg) -> MethodStep:
        loss, labels = baselines.variance_loss(costs, variant, cfg.w_reg, cfg.w_point_var)
        grad = baselines.variance_grad(costs, variant, cfg.w_reg, cfg.w_point_var)
        return MethodStep(labels, loss, grad, baselines.softmax(-costs.values))

    return step


METHODS: dict[str, Callable[..., MethodStep]] = {
    "ca": _step_ca,
    "sk": _step_sk,
    "ent": _step_ent,
    "ss": _variance_step("ss"),
    "varm": _variance_step("varm"),
    "noreg": _step_noreg,
}


@dataclass
class EpochReport:
    epoch: int
    loss: float
    metrics: MetricsReport | None
    hard_counts: np.ndarray
    soft_counts: np.ndarray

    def as_record(self) -> dict:
        rec = {"epoch": self.epoch, "loss": self.loss}
        m = self.metrics
        for key in ("acc", "nmi", "ari", "kl_star_hard", "kl_star_soft"):
            rec[key] = None if m is None else getattr(m, key)
        rec["hard_counts"] = [int(c) for c in self.hard_counts]
        rec["soft_counts"] = [float(c) for c in self.soft_counts]
        return rec


@dataclass
class TrainResult:
    reports: list[EpochReport]
    best: EpochReport

    def summary(self) -> str:
        """Best-epoch metrics as ``key: value`` lines."""
        lines = [f"best_epoch: {self.best.epoch}", f"epochs: {len(self.reports)}", f"loss: {self.best.loss:.6f}"]
        m = self.best.metrics
        if m is not None:
            lines += [f"{key}: {value:.6f}" for key, value in m.as_dict().items()]
        return "\n".join(lines) + "\n"


def estimate_covariances(features, labels, model: ClusterModel) -> ClusterModel:
    """Refit full inverse covariances from cluster members.

    The new inverses are rescaled together so their mean diagonal matches the
    previous model's. Returns ``model`` unchanged if any cluster is empty.
    """
    z = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k, d = model.k, model.d
    if np.any(np.bincount(labels, minlength=k) == 0):
        return model
    inv = np.empty((k, d, d))
    for c in range(k):
        members = z[labels == c]
        if members.shape[0] > 1:
            cov = np.cov(members, rowvar=False).reshape(d, d)
        else:
            cov = np.zeros((d, d))
        if np.linalg.matrix_rank(cov) < d:
            cov = cov + RIDGE * np.eye(d)
        inv_c = np.linalg.inv(cov)
        inv[c] = 0.5 * (inv_c + inv_c.T)
    if model.isotropic:
        old_scale = 1.0 / model.sigma
    else:
        old_scale = float(np.mean(np.diagonal(model.inv_covs, axis1=1, axis2=2)))
    inv *= old_scale / float(np.mean(np.diagonal(inv, axis1=1, axis2=2)))
    return ClusterModel(model.centroids, model.prior, None, inv)


class Trainer:
    def __init__(self, config: TrainConfig, din: int):
        self.config = config
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        nz = din if config.encoder == "identity" else config.nz
        self.encoder = EncoderParams.init(config.encoder, din, nz, config.hidden, rng=np.random.default_rng(seeds[0]))
        centroids = np.random.default_rng(seeds[1]).standard_normal((config.k, self.encoder.nz))
        self.base_prior = config.make_prior()
        self.model = ClusterModel(centroids, self.base_prior, config.sigma)
        self.shuffle_rng = np.random.default_rng(seeds[2])
        self.enc_opt = AdamState(lr=config.lr)
        self.cent_opt = AdamState(lr=config.lr)
        self.step_fn = METHODS[config.method]
        self.counts = np.zeros(config.k, dtype=np.int64)
        self.train_hard_counts = np.zeros(config.k, dtype=np.int64)
        self.train_soft_counts = np.zeros(config.k)

    def encode(self, x, chunk: int = 4096) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([forward(x[i : i + chunk], self.encoder)[0] for i in range(0, len(x), chunk)])

    def warm_start(self, x) -> None:
        """Place the centroids on the first K encoded points."""
        z = self.encode(np.asarray(x)[: self.config.k])
        if z.shape[0] < self.config.k:
            raise ContractError("warm start needs at least K points")
        self.model = self.model.with_centroids(z)

    def train_on_batch(self, x, y=None) -> float:
        z, cache = forward(x, self.encoder)
        costs = cost_matrix(z, self.model)
        init = self.counts if self.config.keep_counts_across_batches else None
        step = self.step_fn(costs, self.model.prior, init, self.config)
        batch_counts = np.bincount(step.labels, minlength=self.config.k)
        if self.config.keep_counts_across_batches:
            self.counts = self.counts + batch_counts
        self.train_hard_counts += batch_counts
        self.train_soft_counts += step.soft.sum(axis=0)

        dz, dmu = cost_backward(z, self.model, step.dcost)
        grads, _ = backward(cache, dz)
        if grads:
            self.encoder.arrays = adam_step(self.encoder.arrays, grads, self.enc_opt)
        new_mu = adam_step({"mu": self.model.centroids}, {"mu": dmu}, self.cent_opt)["mu"]
        self.model = self.model.with_centroids(new_mu)
        return step.loss

    def evaluate(self, dataset: LabeledDataset):
        """Nearest-centroid pass over ``dataset``; returns (metrics or None, hard, soft, preds, z)."""
        z = self.encode(dataset.features)
        preds = infer_batch(z, self.model)
        k = self.config.k
        hard = np.bincount(preds, minlength=k)
        soft = baselines.softmax(-cost_matrix(z, self.model).values).sum(axis=0)
        if dataset.labels is None:
            return None, hard, soft, preds, z
        # KL* references the ground-truth class mix, re-indexed onto clusters by the accuracy matching
        ref = matched_class_distribution(preds, dataset.labels, k)
        metrics = MetricsReport(
            acc=clustering_accuracy(preds, dataset.labels),
            nmi=nmi(preds, dataset.labels),
            ari=ari(preds, dataset.labels),
            kl_star_hard=kl_star(hard, ref),
            kl_star_soft=kl_star(soft, ref),
            hard_entropy=entropy(hard / hard.sum()),
            soft_entropy=entropy(soft / soft.sum()),
        )
        return metrics, hard, soft, preds, z

    def _align_prior(self, hard, preds, labels) -> None:
        mode = self.config.prior_alignment
        if isinstance(self.config.prior, str) or mode == "none":
            return
        probs = self.base_prior.probs
        if mode == "rank":
            order = np.empty(probs.size, dtype=np.int64)
            # largest prior mass to the largest cluster, ties by index
            order[np.argsort(-hard, kind="stable")] = np.argsort(-probs, kind="stable")
        else:
            if labels is None:
                return
            perm = best_matching(preds, labels, probs.size)[: probs.size]
            if np.any(perm >= probs.size):
                return
            order = perm
        self.model = self.model.with_prior(self.base_prior.permuted(order))

    def train_epochs(self, dataset: LabeledDataset) -> TrainResult:
        cfg = self.config
        if len(dataset) == 0:
            raise ContractError("dataset is empty")
        if cfg.warm_start:
            self.warm_start(dataset.features[self.shuffle_rng.permutation(len(dataset))])
        reports = []
        best = None
        for epoch in range(cfg.epochs):
            self.counts = np.zeros(cfg.k, dtype=np.int64)
            self.train_hard_counts = np.zeros(cfg.k, dtype=np.int64)
            self.train_soft_counts = np.zeros(cfg.k)
            perm = self.shuffle_rng.permutation(len(dataset))
            losses = []
            for start in range(0, len(dataset), cfg.batch_size):
                idx = perm[start : start + cfg.batch_size]
                losses.append(self.train_on_batch(dataset.features[idx]))
            metrics, hard, soft, preds, z = self.evaluate(dataset)
            report = EpochReport(epoch, float(np.mean(losses)), metrics, hard, soft)
            reports.append(report)
            log.info("epoch %d loss %.4f %s", epoch, report.loss, metrics)
            if cfg.estimate_covars:
                self.model = estimate_covariances(z, preds, self.model)
            self._align_prior(hard, preds, dataset.labels)
            if best is None or cfg.best_by == "last" or metrics is None or metrics.nmi > best.metrics.nmi:
                best = report
        return TrainResult(reports, best)


def train_epochs(dataset: LabeledDataset, config: TrainConfig) -> TrainResult:
    return Trainer(config, dataset.features.shape[1]).train_epochs(dataset)
