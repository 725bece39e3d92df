"""
Structured sparsity penalties over named weight groups.

Grouped penalties take a tensor of shape (G, L, m): G groups (one per
(target, cause) pair), each made of L lag subgroups of m weights. All
functions return graph scalars so they can be added to the loss directly.
"""

import logging
from typing import Optional

from granger.core.errors import ConfigError, StructureError
from granger.models.experiment import ModelConfig, PenaltyConfig
from granger.services.autodiff import Tensor, absolute, add, reshape, row_norms, scale, take, total

logger = logging.getLogger(__name__)


def _check_grouped(groups: Tensor, lags: Optional[int] = None) -> tuple[int, int, int]:
    if len(groups.shape) != 3 or groups.shape[0] == 0:
        raise StructureError(f"expected groups of shape (G, L, m), got {groups.shape}")
    G, L, m = groups.shape
    if lags is not None and L != lags:
        raise StructureError(f"groups split into {L} lag subgroups, expected {lags}")
    return G, L, m


def group_lasso(groups: Tensor) -> Tensor:
    """Sum over groups of the L2 norm of the whole group."""
    if len(groups.shape) == 0 or groups.shape[0] == 0:
        raise StructureError(f"group_lasso needs at least one group, got shape {groups.shape}")
    count = groups.shape[0]
    return total(row_norms(reshape(groups, (count, groups.size // count))))


def sparse_group_lasso(groups: Tensor, alpha: float, lags: Optional[int] = None) -> Tensor:
    """
    alpha * ||W^{(i,j)}||_2 + (1 - alpha) * sum_k ||W^{(i,j)}_k||_2, summed over groups.

    Raises:
        StructureError: If ``groups`` does not split into ``lags`` subgroups.
        ConfigError: If alpha is outside (0, 1).
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    G, L, m = _check_grouped(groups, lags)
    whole = total(row_norms(reshape(groups, (G, L * m))))
    per_lag = total(row_norms(reshape(groups, (G * L, m))))
    return add(scale(whole, alpha), scale(per_lag, 1.0 - alpha))


def hierarchical_group_lasso(groups: Tensor, recurrent: bool = False, lags: Optional[int] = None) -> Tensor:
    """
    sum_k ||(W_k, ..., W_K)||_2 per group: lag k is penalized by every suffix that contains it.

    Raises:
        ConfigError: For recurrent models, which have no per-lag input weights.
    """
    if recurrent:
        raise ConfigError("HierarchicalGroupLasso is not applicable to recurrent models")
    G, L, m = _check_grouped(groups, lags)
    result = None
    for k in range(L):
        suffix = reshape(take(groups, k, L, axis=1), (G, (L - k) * m))
        term = total(row_norms(suffix))
        result = term if result is None else add(result, term)
    return result


def decoupled_l1(v: Tensor, q: Tensor, lambda_v: float, lambda_q: float) -> Tensor:
    """lambda_v * sum |v_j| + lambda_q * sum |q_k|."""
    return add(scale(total(absolute(v)), lambda_v), scale(total(absolute(q)), lambda_q))


def check_compatible(config: ModelConfig, penalty: PenaltyConfig) -> None:
    """
    Raises:
        ConfigError: If the penalty kind cannot act on the model kind.
    """
    if penalty.kind == "HierarchicalGroupLasso" and config.is_recurrent:
        raise ConfigError(f"HierarchicalGroupLasso is not applicable to recurrent model {config.name}")
    if penalty.kind == "DecoupledL1" and not config.is_decoupled:
        raise ConfigError(f"DecoupledL1 needs a wF model, got {config.name}")


def penalty_term(model, penalty: PenaltyConfig) -> Tensor:
    """
    lambda * Omega over the model's penalized groups, as a graph scalar.

    wF models are always penalized with decoupled_l1 on (v, q); lambda_q
    defaults to lambda.
    """
    config = model.config
    check_compatible(config, penalty)
    groups = model.penalized_groups()

    if config.is_decoupled:
        lambda_q = penalty.lam if penalty.lambda_q is None else penalty.lambda_q
        return decoupled_l1(groups["v"], groups["q"], penalty.lam, lambda_q)

    omega = None
    for name, tensor in groups.items():
        if penalty.kind == "GroupLasso":
            term = group_lasso(tensor)
        elif penalty.kind == "SparseGroupLasso":
            lags = model.lag_subgroups()
            if lags is None:
                raise StructureError(f"{config.name} group '{name}' has no lag subgroups")
            term = sparse_group_lasso(tensor, penalty.alpha, lags=lags)
        else:
            term = hierarchical_group_lasso(tensor, recurrent=config.is_recurrent, lags=model.lag_subgroups())
        omega = term if omega is None else add(omega, term)
    return scale(omega, penalty.lam)
