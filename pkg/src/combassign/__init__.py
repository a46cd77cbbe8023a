"""Prior-regularized hard assignment for online clustering, plus the tooling to evaluate it."""

from .assign import assign_exact, assign_greedy, conditional_costs, infer_batch, infer_point
from .core import BatchAssignment, ClusterModel, ContractError, CostMatrix, Prior, batch_objective, cost_matrix, point_cost
from .metrics import MetricsReport, ari, clustering_accuracy, kl_star, marginal_entropies, nmi
from .trainer import TrainConfig, Trainer, train_epochs

__version__ = "0.1.0"

__all__ = [
    "BatchAssignment",
    "ClusterModel",
    "ContractError",
    "CostMatrix",
    "MetricsReport",
    "Prior",
    "TrainConfig",
    "Trainer",
    "ari",
    "assign_exact",
    "assign_greedy",
    "batch_objective",
    "clustering_accuracy",
    "conditional_costs",
    "cost_matrix",
    "infer_batch",
    "infer_point",
    "kl_star",
    "marginal_entropies",
    "nmi",
    "point_cost",
    "train_epochs",
]
