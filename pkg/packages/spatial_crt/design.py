"""Choosing k and drawing two-stage and ring-treatment assignments."""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .clustering import Clustering, medoid_distances
from .errors import InputValidationError
from .geometry import PointSet

logger = logging.getLogger(__name__)

# spawn-key tags for the named random streams of one replication
_CLUSTER_STREAM = 0
_UNIT_STREAM = 1
_ARM_STREAM = 2


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the named stream ``(seed, *key)``.

    Streams with different keys are independent, so draws do not depend on
    the order in which replications or clusters are processed.
    """
    if int(seed) < 0 or any(int(x) < 0 for x in key):
        raise InputValidationError("seeds and stream keys must be nonnegative")
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(x) for x in key))
    return np.random.Generator(np.random.Philox(seq))


def _check_probability(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise InputValidationError(f"{name} must lie strictly between 0 and 1, got {value}")
    return value


@dataclass(frozen=True)
class DesignParams:
    """Two-stage design: clusters treated w.p. q, then units w.p. p."""

    p: float
    q: float
    k: int
    seed: int

    def __post_init__(self) -> None:
        _check_probability("p", self.p)
        _check_probability("q", self.q)
        if int(self.k) < 1:
            raise InputValidationError(f"k must be at least 1, got {self.k}")
        if int(self.seed) < 0:
            raise InputValidationError("seed must be nonnegative")


@dataclass(frozen=True, eq=False)
class AssignmentDraw:
    """One realization of cluster (W) and unit (D) assignments."""

    W: np.ndarray
    D: np.ndarray

    def __post_init__(self) -> None:
        for name in ("W", "D"):
            arr = np.array(getattr(self, name), dtype=np.int8)
            if arr.ndim != 1 or np.any((arr != 0) & (arr != 1)):
                raise InputValidationError(f"{name} must be a binary vector")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def k(self) -> int:
        return int(self.W.size)

    @property
    def n(self) -> int:
        return int(self.D.size)

    def validate(self, c: Clustering) -> None:
        """Check lengths and that no unit in a control cluster is treated."""
        if self.k != c.k or self.n != c.n:
            raise InputValidationError(
                f"draw has k={self.k}, n={self.n} but clustering has k={c.k}, n={c.n}"
            )
        if np.any(self.D > self.W[c.assignment]):
            raise InputValidationError("a unit in a control cluster is assigned to treatment")


@dataclass(eq=False)
class GammaDesign:
    """Ring-treatment design: cluster arms 0..T and the treated unit mask."""

    arms: np.ndarray
    treated: np.ndarray
    cluster_of: np.ndarray
    T: int
    ring_width: float = 1.0
    warnings: List[str] = field(default_factory=list)

    def treated_units(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.treated & (self.cluster_of == j))


def plan_k(V: float, n: int, gamma_tilde: float, d: int) -> int:
    """Number of clusters balancing interference bias against variance.

    k = round(min{V, n}^(2g/(2g+d))) with g the decay-exponent lower bound,
    kept within 1..n.

    Raises:
        InputValidationError: V <= 0, n < 1, d < 1, or gamma_tilde < d
            (interference must decay faster than the spatial dimension).
    """
    if not float(V) > 0:
        raise InputValidationError(f"region volume must be positive, got {V}")
    if int(n) < 1 or int(d) < 1:
        raise InputValidationError("n and d must be positive integers")
    if float(gamma_tilde) < int(d):
        raise InputValidationError(
            f"gamma ({gamma_tilde}) must be at least the spatial dimension d={d}; "
            "the decay condition requires gamma > d, and gamma = d is the most "
            "conservative admissible choice"
        )
    g = float(gamma_tilde)
    raw = min(float(V), float(n)) ** (2 * g / (2 * g + int(d)))
    return int(min(max(1, math.floor(raw + 0.5)), int(n)))


def interference_ratio(gamma_tilde: float) -> float:
    """Bound on how much weaker spillovers are at twice the distance."""
    return float(2.0 ** (-float(gamma_tilde)))


def draw_assignment(c: Clustering, params: DesignParams, replication: int = 0) -> AssignmentDraw:
    """Draw W_j ~ Bernoulli(q) per cluster and D_i ~ Bernoulli(p) inside treated clusters.

    Cluster draws come from stream (seed, replication, 0); the unit draws of
    cluster j from stream (seed, replication, 1, j).
    """
    if int(params.k) != c.k:
        raise InputValidationError(f"design k={params.k} does not match clustering k={c.k}")
    W = (stream(params.seed, replication, _CLUSTER_STREAM).random(c.k) < params.q).astype(np.int8)
    D = np.zeros(c.n, dtype=np.int8)
    for j in np.flatnonzero(W):
        members = c.members(int(j))
        u = stream(params.seed, replication, _UNIT_STREAM, int(j)).random(members.size)
        D[members] = u < params.p
    return AssignmentDraw(W=W, D=D)


def variogram_k(V: float, T: int, ring_width: float = 1.0, d: int = 2) -> int:
    """Clusters wide enough to hold rings 1..T around their medoids.

    One cluster per (2 (T+1) w)^d of volume, so a typical medoid is at least
    (T+1) w from its cluster's edge.
    """
    if not float(V) > 0:
        raise InputValidationError(f"region volume must be positive, got {V}")
    if int(T) < 1 or not float(ring_width) > 0 or int(d) < 1:
        raise InputValidationError("need T >= 1, a positive ring width and d >= 1")
    cell = (2.0 * (int(T) + 1) * float(ring_width)) ** int(d)
    return max(1, int(math.floor(float(V) / cell)))


def ring_membership(radial: np.ndarray, t: int, ring_width: float = 1.0) -> np.ndarray:
    """Mask of units whose medoid distance lies in (t*w, (t+1)*w]."""
    return (radial > t * ring_width) & (radial <= (t + 1) * ring_width)


def variogram_design(
    ps: PointSet,
    c: Clustering,
    T: int,
    seed: int,
    replication: int = 0,
    ring_width: float = 1.0,
    arm_probs: Optional[Sequence[float]] = None,
) -> GammaDesign:
    """Randomize clusters over arms 0..T and treat only arm t's ring.

    Arm 0 clusters are all control. In an arm t >= 1 cluster exactly the units
    at medoid distance in (t, t+1] (in ring-width units) are treated. Arms are
    uniform unless ``arm_probs`` is given. A cluster whose ring is empty stays
    usable and is reported in ``warnings``.
    """
    if int(T) < 1:
        raise InputValidationError(f"T must be at least 1, got {T}")
    if not ring_width > 0:
        raise InputValidationError("ring width must be positive")
    T = int(T)
    if arm_probs is None:
        probs = np.full(T + 1, 1.0 / (T + 1))
    else:
        probs = np.asarray(arm_probs, dtype=float)
        if probs.size != T + 1 or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
            raise InputValidationError("arm probabilities must be T+1 nonnegative weights summing to 1")
    u = stream(seed, replication, _ARM_STREAM).random(c.k)
    arms = np.minimum(np.searchsorted(np.cumsum(probs), u, side="right"), T)

    radial = medoid_distances(ps, c)
    unit_arm = arms[c.assignment]
    treated = np.zeros(c.n, dtype=bool)
    warnings: List[str] = []
    for t in range(1, T + 1):
        in_arm = unit_arm == t
        treated |= in_arm & ring_membership(radial, t, ring_width)
    for j in np.flatnonzero(arms > 0):
        if not np.any(treated[c.assignment == j]):
            warnings.append(f"cluster {int(j)} (arm {int(arms[j])}) has an empty ring")
    if warnings:
        logger.debug("%d clusters drew an empty ring", len(warnings))
    return GammaDesign(
        arms=arms,
        treated=treated,
        cluster_of=c.assignment.copy(),
        T=T,
        ring_width=float(ring_width),
        warnings=warnings,
    )
