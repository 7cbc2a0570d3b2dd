"""Well-surrounded indicators, exact propensity scores and Hajek estimators.

For a unit i and arm t, the inclusion indicator T^Q_{ti} asks whether every
cluster touching i's r_n-neighborhood sits in arm t (plus a condition on
D_i that depends on the estimand). Propensities are the exact probabilities
of those events under the two-stage design, so the Hajek weights carry no
simulation noise.
"""

import enum
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Union

import numpy as np
from scipy import sparse

from .clustering import Clustering
from .design import AssignmentDraw
from .errors import DegenerateDraw, InputValidationError
from .geometry import PointSet

logger = logging.getLogger(__name__)


class EstimandKind(str, enum.Enum):
    """Direct, indirect, total and overall effects."""

    DIRECT = "D"
    INDIRECT = "I"
    TOTAL = "T"
    OVERALL = "O"

    @classmethod
    def parse(cls, value: Union[str, "EstimandKind"]) -> "EstimandKind":
        if isinstance(value, EstimandKind):
            return value
        text = str(value).strip()
        for kind in cls:
            if text.upper() == kind.value or text.lower() == kind.name.lower():
                return kind
        raise InputValidationError(f"unknown estimand {value!r}; use D, I, T or O")


ALL_ESTIMANDS = tuple(EstimandKind)


class ExposureMap:
    """Which clusters touch each unit's r-neighborhood.

    Stores the sparse n x k incidence matrix B with B[i, j] = 1 iff cluster j
    intersects N(i, r), and phi_i = number of such clusters.
    """

    def __init__(self, ps: PointSet, c: Clustering, r: float):
        if ps.n != c.n:
            raise InputValidationError("point set and clustering disagree on n")
        self.r = float(r)
        self.clustering = c
        neighborhoods = ps.neighborhoods(self.r)
        rows = np.repeat(np.arange(ps.n), [nb.size for nb in neighborhoods])
        cols = c.assignment[np.concatenate(neighborhoods)]
        incidence = sparse.csr_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(ps.n, c.k)
        )
        incidence.sum_duplicates()
        incidence.data[:] = 1.0
        self.incidence = incidence
        self.phi = np.diff(incidence.indptr).astype(np.int64)

    @property
    def n(self) -> int:
        return int(self.phi.size)

    def treated_count(self, W: np.ndarray) -> np.ndarray:
        return np.asarray(self.incidence @ np.asarray(W, dtype=float)).round().astype(np.int64)

    def well_surrounded(self, t: int, W: np.ndarray) -> np.ndarray:
        """True where every cluster touching N(i, r) has W == t."""
        count = self.treated_count(W)
        return count == self.phi if t == 1 else count == 0


def phi(ps: PointSet, c: Clustering, i: int, r_n: float) -> int:
    """Number of distinct clusters intersecting N(i, r_n)."""
    return int(np.unique(c.assignment[ps.neighborhood(i, r_n)]).size)


def well_surrounded(
    ps: PointSet, c: Clustering, i: int, t: int, draw: AssignmentDraw, r_n: float
) -> bool:
    clusters = np.unique(c.assignment[ps.neighborhood(i, r_n)])
    return bool(np.all(draw.W[clusters] == t))


def _indicator_arrays(
    Q: EstimandKind, t: int, D: np.ndarray, surrounded: np.ndarray
) -> np.ndarray:
    D = np.asarray(D, dtype=np.int64)
    if Q is EstimandKind.DIRECT:
        # well surrounded by treated clusters in both arms; arm picks D_i
        own = D if t == 1 else 1 - D
        return own * surrounded
    if Q is EstimandKind.INDIRECT:
        return (1 - D) * surrounded if t == 1 else surrounded.astype(np.int64)
    if Q is EstimandKind.TOTAL:
        return D * surrounded if t == 1 else surrounded.astype(np.int64)
    return surrounded.astype(np.int64)


def indicators_for(
    Q: EstimandKind, t: int, draw: AssignmentDraw, exposure: ExposureMap
) -> np.ndarray:
    """T^Q_{ti} for all units."""
    Q = EstimandKind.parse(Q)
    _check_arm(t)
    arm = 1 if Q is EstimandKind.DIRECT else t
    surrounded = exposure.well_surrounded(arm, draw.W).astype(np.int64)
    return _indicator_arrays(Q, t, draw.D, surrounded)


def indicators(
    ps: PointSet,
    c: Clustering,
    Q: Union[str, EstimandKind],
    i: int,
    t: int,
    draw: AssignmentDraw,
    r_n: float,
) -> int:
    """T^Q_{ti} for a single unit."""
    Q = EstimandKind.parse(Q)
    _check_arm(t)
    arm = 1 if Q is EstimandKind.DIRECT else t
    surrounded = np.array([int(well_surrounded(ps, c, i, arm, draw, r_n))])
    return int(_indicator_arrays(Q, t, draw.D[i : i + 1], surrounded)[0])


def propensity(
    Q: Union[str, EstimandKind], t: int, p: float, q: float, phi_i: Any
) -> Any:
    """Exact P(T^Q_{ti} = 1) under the two-stage design; vectorizes over phi."""
    Q = EstimandKind.parse(Q)
    _check_arm(t)
    phi_arr = np.asarray(phi_i, dtype=float)
    if np.any(phi_arr < 1):
        raise InputValidationError("phi must be at least 1")
    if Q is EstimandKind.DIRECT:
        value = (p if t == 1 else 1 - p) * q**phi_arr
    elif t == 0:
        value = (1 - q) ** phi_arr
    elif Q is EstimandKind.INDIRECT:
        value = (1 - p) * q**phi_arr
    elif Q is EstimandKind.TOTAL:
        value = p * q**phi_arr
    else:
        value = q**phi_arr
    return float(value) if np.ndim(value) == 0 else value


def _check_arm(t: int) -> None:
    if t not in (0, 1):
        raise InputValidationError(f"arm must be 0 or 1, got {t}")


@dataclass(frozen=True, eq=False)
class UnitPanel:
    """Per-unit inputs of one estimand's Hajek estimator."""

    estimand: EstimandKind
    Y: np.ndarray
    D: np.ndarray
    W_own: np.ndarray
    cluster: np.ndarray
    phi: np.ndarray
    T1: np.ndarray
    T0: np.ndarray
    p1: np.ndarray
    p0: np.ndarray

    @property
    def n(self) -> int:
        return int(self.Y.size)


def build_panel(
    Q: Union[str, EstimandKind],
    Y: np.ndarray,
    draw: AssignmentDraw,
    exposure: ExposureMap,
    p: float,
    q: float,
) -> UnitPanel:
    Q = EstimandKind.parse(Q)
    Y = np.asarray(Y, dtype=float)
    c = exposure.clustering
    if Y.size != c.n:
        raise InputValidationError(f"expected {c.n} outcomes, got {Y.size}")
    draw.validate(c)
    return UnitPanel(
        estimand=Q,
        Y=Y,
        D=draw.D.astype(np.int64),
        W_own=draw.W[c.assignment].astype(np.int64),
        cluster=c.assignment,
        phi=exposure.phi,
        T1=indicators_for(Q, 1, draw, exposure),
        T0=indicators_for(Q, 0, draw, exposure),
        p1=np.asarray(propensity(Q, 1, p, q, exposure.phi)),
        p0=np.asarray(propensity(Q, 0, p, q, exposure.phi)),
    )


def arm_means(panel: UnitPanel) -> Dict[int, float]:
    """Hajek-weighted mean outcome of each arm.

    Raises:
        DegenerateDraw: an arm has no included units.
    """
    means = {}
    for t, T, prob in ((1, panel.T1, panel.p1), (0, panel.T0, panel.p0)):
        weights = T / prob
        total = float(np.sum(weights))
        if total <= 0:
            raise DegenerateDraw(t, panel.estimand.value)
        means[t] = float(np.sum(weights * panel.Y) / total)
    return means


def hajek(panel: UnitPanel) -> float:
    means = arm_means(panel)
    return means[1] - means[0]


def diff_in_means(panel: UnitPanel) -> float:
    """Unweighted group-mean difference; meant for panels built with r_n = 0."""
    diffs = []
    for t, T in ((1, panel.T1), (0, panel.T0)):
        count = int(T.sum())
        if count == 0:
            raise DegenerateDraw(t, panel.estimand.value)
        diffs.append(float(np.sum(T * panel.Y)) / count)
    return diffs[0] - diffs[1]


@dataclass
class EstimateReport:
    estimand: EstimandKind
    theta_hat: Optional[float]
    n_included_1: int
    n_included_0: int
    r_n: float
    theta_hat_plus: Optional[float] = None
    dropped_reason: Optional[str] = None
    panel: Optional[UnitPanel] = field(default=None, repr=False)

    @property
    def dropped(self) -> bool:
        return self.theta_hat is None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "estimand": self.estimand.value,
            "theta_hat": self.theta_hat,
            "theta_hat_plus": self.theta_hat_plus,
            "n_included_1": self.n_included_1,
            "n_included_0": self.n_included_0,
            "r_n": self.r_n,
            "dropped_reason": self.dropped_reason,
        }


def estimate(
    Q: Union[str, EstimandKind],
    Y: np.ndarray,
    draw: AssignmentDraw,
    exposure: ExposureMap,
    exposure_plus: ExposureMap,
    p: float,
    q: float,
) -> EstimateReport:
    """Bias-reduced estimate plus the r_n = 0 difference-in-means comparator.

    A degenerate arm is recorded rather than raised: ``theta_hat`` (or
    ``theta_hat_plus``) comes back as None with the reason attached. The
    panel is kept so variances can be computed from the same inputs.
    """
    panel = build_panel(Q, Y, draw, exposure, p, q)
    try:
        theta_plus: Optional[float] = diff_in_means(
            build_panel(Q, Y, draw, exposure_plus, p, q)
        )
    except DegenerateDraw as e:
        logger.debug("comparator dropped: %s", e)
        theta_plus = None
    theta: Optional[float] = None
    reason: Optional[str] = None
    try:
        theta = hajek(panel)
    except DegenerateDraw as e:
        reason = str(e)
    return EstimateReport(
        estimand=panel.estimand,
        theta_hat=theta,
        n_included_1=int(panel.T1.sum()),
        n_included_0=int(panel.T0.sum()),
        r_n=exposure.r,
        theta_hat_plus=theta_plus,
        dropped_reason=reason,
        panel=panel,
    )
