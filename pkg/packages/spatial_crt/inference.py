"""Variance estimation and confidence intervals for the Hajek estimators."""

import enum
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional

import numpy as np
from scipy import sparse
from scipy.stats import norm

from .clustering import Clustering
from .errors import InputValidationError
from .estimators import ExposureMap, UnitPanel, arm_means
from .geometry import PointSet

logger = logging.getLogger(__name__)

Z_95 = 1.96


class DependencyStructure:
    """Dependency relations A(1) (shared touching clusters) and A(2) (same cluster).

    ``A1[i, l] = 1`` iff some cluster intersects both N(i, r_n) and N(l, r_n);
    the row of unit i is the set Lambda_i. A(2) is block diagonal by cluster
    and is never materialized for the variance computation.
    """

    def __init__(self, exposure: ExposureMap):
        B = exposure.incidence
        self.A1 = (B @ B.T).astype(bool).astype(np.float64).tocsr()
        self.cluster = exposure.clustering.assignment
        self.k = exposure.clustering.k
        self.r_n = exposure.r

    @property
    def n(self) -> int:
        return int(self.cluster.size)

    def lambda_set(self, i: int) -> np.ndarray:
        row = self.A1.getrow(i)
        return np.sort(row.indices)

    def a2_matrix(self) -> sparse.csr_matrix:
        member = sparse.csr_matrix(
            (np.ones(self.n), (np.arange(self.n), self.cluster)), shape=(self.n, self.k)
        )
        return (member @ member.T).astype(bool).astype(np.float64).tocsr()


def lambda_sets(ps: PointSet, c: Clustering, r_n: float) -> DependencyStructure:
    return DependencyStructure(ExposureMap(ps, c, r_n))


@dataclass
class VarianceReport:
    sigma2_1: float
    sigma2_2: float
    sigma2: float
    mu_hat_1: float
    mu_hat_0: float
    k: int

    @property
    def se(self) -> float:
        """Standard error of the point estimate, sigma / sqrt(k)."""
        return math.sqrt(self.sigma2 / self.k)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sigma2_1": self.sigma2_1,
            "sigma2_2": self.sigma2_2,
            "sigma2": self.sigma2,
            "mu_hat_1": self.mu_hat_1,
            "mu_hat_0": self.mu_hat_0,
            "se": self.se,
        }


def centered_scores(panel: UnitPanel) -> np.ndarray:
    """Z_i = T1 (Y - mu1) / p1 - T0 (Y - mu0) / p0 with Hajek arm means."""
    means = arm_means(panel)
    return panel.T1 * (panel.Y - means[1]) / panel.p1 - panel.T0 * (
        panel.Y - means[0]
    ) / panel.p0


def variance(panel: UnitPanel, dep: DependencyStructure, k: Optional[int] = None) -> VarianceReport:
    """sigma2(1), sigma2(2) and their maximum.

    sigma2(t) = (k / n^2) sum_ij Z_i Z_j A_ij(t). The A(2) form reduces to the
    sum of squared cluster totals, so it is never negative.

    Raises:
        DegenerateDraw: an arm of the panel is empty.
    """
    k = dep.k if k is None else int(k)
    if panel.n != dep.n:
        raise InputValidationError("panel and dependency structure disagree on n")
    means = arm_means(panel)
    Z = centered_scores(panel)
    scale = k / float(panel.n) ** 2
    sigma2_1 = scale * float(Z @ (dep.A1 @ Z))
    totals = np.bincount(dep.cluster, weights=Z, minlength=dep.k)
    sigma2_2 = scale * float(np.sum(totals * totals))
    return VarianceReport(
        sigma2_1=sigma2_1,
        sigma2_2=sigma2_2,
        sigma2=max(sigma2_1, sigma2_2),
        mu_hat_1=means[1],
        mu_hat_0=means[0],
        k=k,
    )


class IntervalKind(str, enum.Enum):
    UNDERSMOOTHED = "undersmoothed"
    BIAS_AWARE = "bias_aware"
    BIAS_AWARE_STRICT = "bias_aware_strict"


@dataclass
class ConfidenceInterval:
    center: float
    halfwidth: float
    kind: IntervalKind
    level: float = 0.95

    @property
    def lower(self) -> float:
        return self.center - self.halfwidth

    @property
    def upper(self) -> float:
        return self.center + self.halfwidth

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper

    def to_dict(self) -> Dict[str, Any]:
        return {
            "ci_kind": self.kind.value,
            "ci_level": self.level,
            "ci_low": self.lower,
            "ci_high": self.upper,
            "ci_halfwidth": self.halfwidth,
        }


def _critical_value(level: float) -> float:
    if not 0 < level < 1:
        raise InputValidationError("confidence level must lie in (0, 1)")
    return Z_95 if level == 0.95 else float(norm.ppf(0.5 + level / 2))


def _sampling_halfwidth(sigma2: float, k: int, level: float) -> float:
    if sigma2 < 0 or int(k) < 1:
        raise InputValidationError("need sigma2 >= 0 and k >= 1")
    return _critical_value(level) * math.sqrt(sigma2) / math.sqrt(int(k))


def ci_undersmoothed(
    theta_hat: float, sigma2: float, k: int, level: float = 0.95
) -> ConfidenceInterval:
    """theta_hat +/- 1.96 sigma / sqrt(k)."""
    return ConfidenceInterval(
        center=float(theta_hat),
        halfwidth=_sampling_halfwidth(sigma2, k, level),
        kind=IntervalKind.UNDERSMOOTHED,
        level=level,
    )


def ci_bias_aware(
    theta_hat: float,
    sigma2: float,
    k: int,
    c: float,
    gamma: float,
    r_n: float,
    dim: int = 2,
    strict_paper: bool = False,
    level: float = 0.95,
) -> ConfidenceInterval:
    """Interval widened by the worst-case interference bias 3 c r_n^-gamma.

    The bias bound is placed on the estimate's own scale. ``strict_paper``
    keeps the extra sqrt(k) factor on the bias term instead.
    """
    if not c > 0:
        raise InputValidationError("bias constant c must be positive")
    if not gamma > dim:
        raise InputValidationError(f"gamma must exceed the dimension d={dim}")
    if not r_n > 0:
        raise InputValidationError("the bias bound is undefined for r_n = 0")
    bias = 3.0 * c * float(r_n) ** (-float(gamma))
    if strict_paper:
        bias *= math.sqrt(int(k))
    return ConfidenceInterval(
        center=float(theta_hat),
        halfwidth=bias + _sampling_halfwidth(sigma2, k, level),
        kind=IntervalKind.BIAS_AWARE_STRICT if strict_paper else IntervalKind.BIAS_AWARE,
        level=level,
    )
