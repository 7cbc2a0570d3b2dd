"""Partitioning around medoids, cluster radii and the exclusion radius."""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Optional

import numpy as np
from scipy import sparse

from .errors import InputValidationError, IterationLimitError
from .geometry import PointSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Clustering:
    """Output of k-medoids.

    ``medoids`` are unit ids sorted ascending; cluster ``j`` is the set of
    units with ``assignment == j`` and its medoid is ``medoids[j]``.
    """

    medoids: np.ndarray
    assignment: np.ndarray
    radii: np.ndarray
    cost: float
    iterations: int = 0

    def __post_init__(self) -> None:
        for name in ("medoids", "assignment", "radii"):
            arr = np.array(getattr(self, name), dtype=float if name == "radii" else np.intp)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def k(self) -> int:
        return int(self.medoids.size)

    @property
    def n(self) -> int:
        return int(self.assignment.size)

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == j)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.k)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "k": self.k,
            "medoids": self.medoids.tolist(),
            "assignment": self.assignment.tolist(),
            "radii": self.radii.tolist(),
            "cost": self.cost,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Clustering":
        clustering = cls(
            medoids=np.asarray(data["medoids"]),
            assignment=np.asarray(data["assignment"]),
            radii=np.asarray(data["radii"]),
            cost=float(data["cost"]),
            iterations=int(data.get("iterations", 0)),
        )
        k, n = clustering.k, clustering.n
        if k != int(data.get("k", k)):
            raise InputValidationError("clusters file: k does not match the medoid list")
        if clustering.radii.size != k:
            raise InputValidationError(f"clusters file: {clustering.radii.size} radii for k={k} clusters")
        if np.any(clustering.assignment < 0) or np.any(clustering.assignment >= k):
            raise InputValidationError(f"clusters file: cluster labels must lie in 0..{k - 1}")
        if np.any(clustering.medoids < 0) or np.any(clustering.medoids >= n):
            raise InputValidationError(f"clusters file: medoid ids must lie in 0..{n - 1}")
        sizes = clustering.sizes()
        if np.any(sizes == 0):
            raise InputValidationError("clusters file: assignment is not a partition into k clusters")
        stray = np.flatnonzero(clustering.assignment[clustering.medoids] != np.arange(k))
        if stray.size:
            raise InputValidationError(
                f"clusters file: medoid of cluster {int(stray[0])} is assigned to another cluster"
            )
        return clustering


def _check_medoids(ps: PointSet, medoids: Iterable[int]) -> np.ndarray:
    ids = np.unique(np.asarray(list(medoids), dtype=np.intp))
    if ids.size == 0:
        raise InputValidationError("medoid set must be nonempty")
    if ids[0] < 0 or ids[-1] >= ps.n:
        raise InputValidationError(f"medoid ids must lie in 0..{ps.n - 1}")
    return ids


def medoid_cost(ps: PointSet, medoids: Iterable[int]) -> float:
    """Total distance between units and their nearest medoid."""
    ids = _check_medoids(ps, medoids)
    nearest = np.min(np.stack([ps.distances_from(m) for m in ids]), axis=0)
    return float(nearest.sum())


def assign_to_medoids(distances_to_medoids: np.ndarray, medoids: np.ndarray) -> np.ndarray:
    """Nearest-medoid labels; ties go to the lowest cluster index.

    Each medoid is pinned to its own cluster so coincident medoids still yield
    k nonempty clusters.
    """
    assignment = np.argmin(distances_to_medoids, axis=1)
    assignment[medoids] = np.arange(medoids.size)
    return assignment


def cluster_radii(distances_to_medoids: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """R_j = largest distance from a member of cluster j to its medoid."""
    k = distances_to_medoids.shape[1]
    own = distances_to_medoids[np.arange(assignment.size), assignment]
    radii = np.zeros(k)
    np.maximum.at(radii, assignment, own)
    return radii


def _pick(candidates: np.ndarray, rng: np.random.Generator) -> int:
    if candidates.size == 1:
        return int(candidates[0])
    return int(rng.choice(candidates))


def _build(dist: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy BUILD: add the unit that lowers total cost the most, k times."""
    totals = dist.sum(axis=0)
    chosen = [_pick(np.flatnonzero(totals == totals.min()), rng)]
    nearest = dist[:, chosen[0]].copy()
    for _ in range(1, k):
        costs = np.minimum(dist, nearest[:, np.newaxis]).sum(axis=0)
        costs[chosen] = np.inf
        m = _pick(np.flatnonzero(costs == costs.min()), rng)
        chosen.append(m)
        np.minimum(nearest, dist[:, m], out=nearest)
    return np.sort(np.asarray(chosen, dtype=np.intp))


def _swap_costs(dist: np.ndarray, medoids: np.ndarray) -> np.ndarray:
    """Cost after replacing medoids[j] with unit o, for every (j, o).

    Medoid columns are set to +inf so only non-medoid candidates compete.
    """
    n, k = dist.shape[0], medoids.size
    dm = dist[:, medoids]
    rows = np.arange(n)
    if k > 1:
        order = np.argsort(dm, axis=1, kind="stable")
        near_idx = order[:, 0]
        second = dm[rows, order[:, 1]]
    else:
        near_idx = np.zeros(n, dtype=np.intp)
        second = np.full(n, np.inf)
    nearest = dm[rows, near_idx]

    keep_nearest = np.minimum(dist, nearest[:, np.newaxis])
    base = keep_nearest.sum(axis=0)
    delta = np.minimum(dist, second[:, np.newaxis]) - keep_nearest
    owner = sparse.csr_matrix((np.ones(n), (near_idx, rows)), shape=(k, n))
    costs = base[np.newaxis, :] + np.asarray(owner @ delta)
    costs[:, medoids] = np.inf
    return costs


def k_medoids(
    ps: PointSet,
    k: int,
    seed: int = 0,
    max_swaps: Optional[int] = None,
    distances: Optional[np.ndarray] = None,
) -> Clustering:
    """Partitioning around medoids with best-improvement swaps.

    Starts from a greedy BUILD (seeded tie-breaks) and repeatedly applies the
    single (medoid, non-medoid) swap with the lowest resulting cost until no
    swap strictly lowers it. Swap ties go to the lowest (medoid, candidate) id
    pair. The default swap cap is 10*k*n.

    Raises:
        InputValidationError: k outside 1..n.
        IterationLimitError: the swap cap was reached.
    """
    if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or not 1 <= k <= ps.n:
        raise InputValidationError(f"k must be an integer in 1..{ps.n}, got {k}")
    k = int(k)
    dist = ps.distance_matrix() if distances is None else distances
    cap = 10 * k * ps.n if max_swaps is None else int(max_swaps)
    rng = np.random.default_rng(seed)

    medoids = _build(dist, k, rng)
    cost = float(dist[:, medoids].min(axis=1).sum())
    logger.debug("BUILD chose %d medoids with cost %.6f", k, cost)

    swaps = 0
    if k < ps.n:
        while True:
            costs = _swap_costs(dist, medoids)
            flat = int(np.argmin(costs))
            best = float(costs.flat[flat])
            if not best < cost - 1e-12 * max(1.0, cost):
                break
            if swaps >= cap:
                raise IterationLimitError(
                    f"k-medoids did not stabilise within {cap} swaps (k={k}, n={ps.n})"
                )
            j, o = divmod(flat, ps.n)
            logger.debug("swap %d: medoid %d -> unit %d, cost %.6f -> %.6f", swaps + 1, medoids[j], o, cost, best)
            medoids = medoids.copy()
            medoids[j] = o
            medoids.sort()
            cost = float(dist[:, medoids].min(axis=1).sum())
            swaps += 1

    dm = dist[:, medoids]
    assignment = assign_to_medoids(dm, medoids)
    radii = cluster_radii(dm, assignment)
    logger.info("k-medoids: k=%d, n=%d, cost=%.4f after %d swaps", k, ps.n, cost, swaps)
    return Clustering(medoids=medoids, assignment=assignment, radii=radii, cost=cost, iterations=swaps)


def exclusion_radius(c: Clustering, multiplier: float = 0.5) -> float:
    """r_n = multiplier x median cluster radius (even k: mean of middle two)."""
    if not multiplier > 0:
        raise InputValidationError("radius multiplier must be positive")
    if c.k < 1:
        raise InputValidationError("clustering has no clusters")
    return float(multiplier * np.median(c.radii))


def medoid_distances(ps: PointSet, c: Clustering) -> np.ndarray:
    """rho(i, m_{c(i)}) for every unit i."""
    return ps.pair_distances(np.arange(c.n), c.medoids[c.assignment])
