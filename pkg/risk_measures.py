# Sample-based risk estimators
# Monte-Carlo CVaR (empirical tail mean), the explicit variational CVaR
# minimisation used as an oracle, entropic risk and the risk-neutral mean.

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from errors import DomainError, UsageError, require

logger = logging.getLogger(__name__)

CostSample = Union[Sequence[float], np.ndarray]

# Guard on |sigma * max cost| for the entropic risk
ENTROPIC_EXPONENT_LIMIT = 700.0


# ============================================================================
# DATA MODELS
# ============================================================================

class RiskKind(Enum):
    """Which risk functional to apply to a cost sample."""
    CVAR = "cvar"
    ENTROPIC = "entropic"
    MEAN = "mean"


@dataclass(frozen=True)
class RiskSpec:
    """Risk measure kind plus its sensitivity level.

    CVaR needs 0 <= sigma <= 1, entropic risk needs sigma != 0, the mean
    ignores sigma.
    """
    kind: RiskKind = RiskKind.CVAR
    sigma: float = 0.0

    def __post_init__(self):
        require(math.isfinite(self.sigma), "sigma", f"must be finite, got {self.sigma}")
        if self.kind is RiskKind.CVAR:
            require(0.0 <= self.sigma <= 1.0, "sigma", f"must lie in [0, 1] for CVaR, got {self.sigma}")
        elif self.kind is RiskKind.ENTROPIC:
            require(self.sigma != 0.0, "sigma", "must be non-zero for entropic risk (use the mean kind)")


# ============================================================================
# ESTIMATORS
# ============================================================================

def _as_costs(costs: CostSample) -> np.ndarray:
    values = np.asarray(costs, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise UsageError("risk estimate needs at least one cost sample")
    if not np.all(np.isfinite(values)):
        raise DomainError("cost samples must be finite")
    return values


def _check_level(sigma: float):
    if not (0.0 <= sigma <= 1.0):
        raise DomainError(f"CVaR level sigma must lie in [0, 1], got {sigma}")


def tail_count(n: int, sigma: float) -> int:
    """Number of samples in the upper tail: ceil((1 - sigma) * n), at least 1."""
    k = math.ceil((1.0 - sigma) * n - 1e-9)
    return min(max(k, 1), n)


def cvar_mc(costs: CostSample, sigma: float) -> float:
    """Empirical tail-mean CVaR.

    Sort descending (stable) and average the top ceil((1 - sigma) * N)
    values. sigma=0 gives the mean, sigma=1 the max.
    """
    _check_level(sigma)
    values = _as_costs(costs)
    k = tail_count(values.size, sigma)
    ordered = values[np.argsort(-values, kind="stable")]
    return float(ordered[:k].mean())


def cvar_mc_rows(costs: np.ndarray, sigma: float) -> np.ndarray:
    """Tail-mean CVaR of every row of a (B, N) cost array."""
    _check_level(sigma)
    values = np.asarray(costs, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] == 0:
        raise UsageError(f"expected a non-empty (rows, samples) array, got shape {values.shape}")
    k = tail_count(values.shape[1], sigma)
    ordered = -np.sort(-values, axis=1, kind="stable")
    return ordered[:, :k].mean(axis=1)


def cvar_rockafellar(costs: CostSample, sigma: float, weights: Optional[CostSample] = None) -> float:
    """CVaR by explicit minimisation of t + E[(C - t)+] / (1 - sigma).

    For a discrete distribution the objective is piecewise linear in t with
    kinks at the atoms, so evaluating it at every atom gives the exact
    minimum. With uniform weights this agrees with ``cvar_mc`` whenever
    (1 - sigma) * N is an integer.
    """
    _check_level(sigma)
    values = _as_costs(costs)
    if weights is None:
        probs = np.full(values.size, 1.0 / values.size)
    else:
        probs = np.asarray(weights, dtype=np.float64).reshape(-1)
        if probs.shape != values.shape or np.any(probs < 0) or probs.sum() <= 0:
            raise UsageError("weights must be non-negative, match the costs and have positive mass")
        probs = probs / probs.sum()
    if sigma == 1.0:
        return float(values[probs > 0].max())
    excess = np.maximum(values[None, :] - values[:, None], 0.0) @ probs
    return float(np.min(values + excess / (1.0 - sigma)))


def entropic_risk(costs: CostSample, sigma: float) -> float:
    """(1/sigma) * log(mean(exp(sigma * c))) with max-shifted exponentials."""
    if sigma == 0.0:
        raise DomainError("entropic risk is undefined at sigma=0; use the mean")
    values = _as_costs(costs)
    if abs(sigma) * np.max(np.abs(values)) >= ENTROPIC_EXPONENT_LIMIT:
        raise DomainError(f"|sigma * cost| reaches {ENTROPIC_EXPONENT_LIMIT}; entropic risk would overflow")
    return float((logsumexp(sigma * values) - math.log(values.size)) / sigma)


def mean_cost(costs: CostSample) -> float:
    return float(_as_costs(costs).mean())


def risk(spec: RiskSpec, costs: CostSample) -> float:
    """Apply the risk functional named by ``spec`` to a cost sample."""
    if spec.kind is RiskKind.CVAR:
        return cvar_mc(costs, spec.sigma)
    if spec.kind is RiskKind.ENTROPIC:
        return entropic_risk(costs, spec.sigma)
    return mean_cost(costs)
