"""Data-generating processes, true estimands and the Monte Carlo harness.

Two outcome models are provided, both linear in the treatment vector:

* Cliff-Ord spatial autoregression,
  ``Y = -1 + 0.8 G Y + D * beta + eps`` with row-normalized distance-1
  adjacency ``G`` and spatially convolved noise ``(beta, eps)``.
* Spatial moving average,
  ``Y_i = sum_j max(rho(i, j), 1)^-5 (-1 + D_j beta~_j + eps~_j)``.

Replications of a cell share one population (locations, noise, clustering);
only the assignment is redrawn unless ``redraw_population`` is set.
"""

import abc
import concurrent.futures
import enum
import itertools
import logging
import math
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.stats import linregress

from .clustering import Clustering, exclusion_radius, k_medoids, medoid_distances
from .design import DesignParams, draw_assignment, plan_k, stream, variogram_design, variogram_k
from .errors import (
    ConvergenceError,
    DegenerateDraw,
    InputValidationError,
    VariogramError,
)
from .estimators import (
    ALL_ESTIMANDS,
    EstimandKind,
    ExposureMap,
    build_panel,
    diff_in_means,
    hajek,
)
from .geometry import Metric, PointSet, region_volume
from .inference import DependencyStructure, ci_undersmoothed, variance

logger = logging.getLogger(__name__)

INTERCEPT = -1.0
SPATIAL_LAG = 0.8
MA_DECAY = 5.0
ADJACENCY_RADIUS = 1.0

DIRECT_SOLVE_MAX_N = 2000
FIXED_POINT_TOL = 1e-10
FIXED_POINT_MAX_ITER = 1000
RESIDUAL_TOL = 1e-8
EXHAUSTIVE_MAX_N = 12

# replication-level stream tags; 0..2 belong to the design module
_POPULATION_STREAM = 3
_TRUTH_STREAM = 4

_DIAG_CHUNK = 256


class OutcomeModel(str, enum.Enum):
    CLIFF_ORD = "cliff_ord"
    MOVING_AVERAGE = "ma"

    @classmethod
    def parse(cls, value: Union[str, "OutcomeModel"]) -> "OutcomeModel":
        if isinstance(value, OutcomeModel):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {
            "cliff_ord": cls.CLIFF_ORD,
            "clifford": cls.CLIFF_ORD,
            "sar": cls.CLIFF_ORD,
            "ma": cls.MOVING_AVERAGE,
            "moving_average": cls.MOVING_AVERAGE,
        }
        if key not in aliases:
            raise InputValidationError(f"unknown outcome model {value!r}; use cliff_ord or ma")
        return aliases[key]


class TruthMethod(str, enum.Enum):
    MONTE_CARLO = "monte_carlo"
    EXACT = "exact"
    EXHAUSTIVE = "exhaustive"


@dataclass(frozen=True)
class DGPSpec:
    """One simulation cell."""

    model: OutcomeModel
    n: int
    alpha_n: float = 1.0
    p: float = 0.7
    q: float = 0.6
    gamma_tilde: float = 2.0
    seed: int = 0
    regime: str = "increasing"
    rn_multiplier: float = 0.5
    self_loop: bool = True
    redraw_population: bool = False
    k: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "model", OutcomeModel.parse(self.model))
        if int(self.n) < 1:
            raise InputValidationError(f"n must be positive, got {self.n}")
        if not 0 < float(self.alpha_n) <= 1:
            raise InputValidationError(f"alpha_n must lie in (0, 1], got {self.alpha_n}")
        # validates p, q and seed
        DesignParams(self.p, self.q, 1, self.seed)
        if self.k is not None and not 1 <= int(self.k) <= int(self.n):
            raise InputValidationError(f"k must lie in 1..{self.n}")

    @property
    def dim(self) -> int:
        return 2

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.value,
            "n": self.n,
            "alpha_n": self.alpha_n,
            "p": self.p,
            "q": self.q,
            "gamma_tilde": self.gamma_tilde,
            "seed": self.seed,
            "regime": self.regime,
            "rn_multiplier": self.rn_multiplier,
            "self_loop": self.self_loop,
            "redraw_population": self.redraw_population,
            "k": self.k,
        }


def gen_locations(n: int, alpha_n: float, rng: np.random.Generator) -> PointSet:
    """n iid uniform points on [-(n alpha_n)^1/2, (n alpha_n)^1/2]^2."""
    if int(n) < 1 or not 0 < float(alpha_n) <= 1:
        raise InputValidationError("need n >= 1 and 0 < alpha_n <= 1")
    half = math.sqrt(int(n) * float(alpha_n))
    return PointSet(rng.uniform(-half, half, size=(int(n), 2)), Metric.EUCLIDEAN)


def adjacency_weights(
    ps: PointSet, self_loop: bool = True, radius: float = ADJACENCY_RADIUS
) -> sparse.csr_matrix:
    """Row-normalized G with G_ij proportional to 1{rho(i, j) <= radius}.

    Without the self-loop a unit with no neighbor gets an all-zero row.
    """
    neighborhoods = ps.neighborhoods(radius)
    if not self_loop:
        neighborhoods = [nb[nb != i] for i, nb in enumerate(neighborhoods)]
    counts = np.array([nb.size for nb in neighborhoods])
    rows = np.repeat(np.arange(ps.n), counts)
    cols = np.concatenate(neighborhoods) if ps.n else np.empty(0, dtype=np.intp)
    data = 1.0 / np.repeat(np.maximum(counts, 1), counts)
    return sparse.csr_matrix((data, (rows, cols)), shape=(ps.n, ps.n))


@dataclass(frozen=True, eq=False)
class Noise:
    """Raw draws (beta~, eps~) and their spatial convolutions (beta, eps)."""

    beta_tilde: np.ndarray
    eps_tilde: np.ndarray
    beta: np.ndarray
    eps: np.ndarray

    def __iter__(self):
        return iter((self.beta, self.eps))


def shared_noise(ps: PointSet, rng: np.random.Generator, self_loop: bool = True) -> Noise:
    """beta~ ~ N(1, 1), eps~ ~ N(0, 1); (beta, eps) = (beta~, eps~) + G (beta~, eps~)."""
    beta_tilde = rng.normal(1.0, 1.0, ps.n)
    eps_tilde = rng.normal(0.0, 1.0, ps.n)
    G = adjacency_weights(ps, self_loop)
    return Noise(
        beta_tilde=beta_tilde,
        eps_tilde=eps_tilde,
        beta=beta_tilde + G @ beta_tilde,
        eps=eps_tilde + G @ eps_tilde,
    )


class PotentialOutcomeOracle(abc.ABC):
    """Maps a full treatment vector d to the outcome vector Y(d)."""

    def __init__(self, n: int):
        self.n = int(n)

    @abc.abstractmethod
    def outcomes(self, d: np.ndarray) -> np.ndarray:
        """Y(d) for every unit."""

    @cached_property
    def baseline(self) -> np.ndarray:
        """Y(0), the pure-control outcomes."""
        return self.outcomes(np.zeros(self.n))

    def flip_effects(self, d: np.ndarray) -> np.ndarray:
        """Y_i(1, d_-i) - Y_i(0, d_-i) for every i, by toggling each unit."""
        d = np.asarray(d, dtype=float)
        effects = np.empty(self.n)
        for i in range(self.n):
            on, off = d.copy(), d.copy()
            on[i], off[i] = 1.0, 0.0
            effects[i] = self.outcomes(on)[i] - self.outcomes(off)[i]
        return effects

    def expected_outcomes(self, p: float) -> np.ndarray:
        """E*[Y(D)] for D iid Bernoulli(p); only linear oracles have it."""
        raise NotImplementedError(f"{type(self).__name__} has no closed-form expectation")


class LinearOracle(PotentialOutcomeOracle):
    """Y(d) = M (offset + d * slope) for a fixed response operator M."""

    def __init__(self, offset: np.ndarray, slope: np.ndarray):
        super().__init__(np.asarray(offset).size)
        self.offset = np.asarray(offset, dtype=float)
        self.slope = np.asarray(slope, dtype=float)

    @abc.abstractmethod
    def respond(self, v: np.ndarray) -> np.ndarray:
        """M v."""

    @abc.abstractmethod
    def own_weights(self) -> np.ndarray:
        """diag(M)."""

    def outcomes(self, d: np.ndarray) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        if d.shape != (self.n,):
            raise InputValidationError(f"treatment vector must have length {self.n}")
        return self.respond(self.offset + d * self.slope)

    @cached_property
    def own_effects(self) -> np.ndarray:
        return self.own_weights() * self.slope

    def flip_effects(self, d: np.ndarray) -> np.ndarray:
        return self.own_effects

    def expected_outcomes(self, p: float) -> np.ndarray:
        return self.respond(self.offset + float(p) * self.slope)


class CliffOrdOracle(LinearOracle):
    """Solves (I - 0.8 G) Y = -1 + D beta + eps.

    Small systems use a sparse LU factorization; larger ones a fixed-point
    iteration, which contracts because 0.8 G has sup-norm at most 0.8.
    """

    def __init__(self, ps: PointSet, noise: Noise, self_loop: bool = True, lag: float = SPATIAL_LAG):
        super().__init__(INTERCEPT + noise.eps, noise.beta)
        if not 0 <= lag < 1:
            raise InputValidationError("spatial lag must lie in [0, 1)")
        self.lag = float(lag)
        self.G = adjacency_weights(ps, self_loop)
        self.system = (sparse.identity(self.n, format="csc") - self.lag * self.G).tocsc()
        self._lock = threading.Lock()

    @cached_property
    def _lu(self):
        return splu(self.system)

    def _lu_solve(self, rhs: np.ndarray) -> np.ndarray:
        with self._lock:
            return self._lu.solve(rhs)

    def _fixed_point(self, rhs: np.ndarray) -> np.ndarray:
        y = rhs.copy()
        for it in range(FIXED_POINT_MAX_ITER):
            nxt = rhs + self.lag * (self.G @ y)
            step = float(np.max(np.abs(nxt - y))) if y.size else 0.0
            y = nxt
            if step < FIXED_POINT_TOL:
                logger.debug("fixed point converged after %d iterations", it + 1)
                return y
        raise ConvergenceError(
            f"Cliff-Ord fixed point did not reach {FIXED_POINT_TOL} in {FIXED_POINT_MAX_ITER} iterations"
        )

    def respond(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        y = self._lu_solve(v) if self.n <= DIRECT_SOLVE_MAX_N else self._fixed_point(v)
        residual = float(np.max(np.abs(self.system @ y - v))) if self.n else 0.0
        if residual > RESIDUAL_TOL:
            raise ConvergenceError(f"Cliff-Ord solve left residual {residual:.3g}")
        return y

    def own_weights(self) -> np.ndarray:
        diag = np.empty(self.n)
        for start in range(0, self.n, _DIAG_CHUNK):
            stop = min(start + _DIAG_CHUNK, self.n)
            basis = np.zeros((self.n, stop - start))
            basis[np.arange(start, stop), np.arange(stop - start)] = 1.0
            cols = self._lu_solve(basis)
            diag[start:stop] = cols[np.arange(start, stop), np.arange(stop - start)]
        return diag


class MovingAverageOracle(LinearOracle):
    """Y_i = sum_j max(rho(i, j), 1)^-eta (-1 + D_j beta~_j + eps~_j).

    ``self_only`` keeps only the own term, which switches interference off.
    """

    def __init__(self, ps: PointSet, noise: Noise, eta: float = MA_DECAY, self_only: bool = False):
        super().__init__(INTERCEPT + noise.eps_tilde, noise.beta_tilde)
        if self_only:
            self.weights = np.eye(ps.n)
        else:
            self.weights = np.maximum(ps.distance_matrix(), 1.0) ** (-float(eta))

    def respond(self, v: np.ndarray) -> np.ndarray:
        return self.weights @ np.asarray(v, dtype=float)

    def own_weights(self) -> np.ndarray:
        return np.diag(self.weights).copy()


def cliff_ord_outcomes(
    ps: PointSet, D: np.ndarray, noise: Noise, self_loop: bool = True
) -> np.ndarray:
    return CliffOrdOracle(ps, noise, self_loop).outcomes(D)


def moving_average_outcomes(ps: PointSet, D: np.ndarray, noise: Noise) -> np.ndarray:
    return MovingAverageOracle(ps, noise).outcomes(D)


def make_oracle(spec: DGPSpec, ps: PointSet, noise: Noise) -> LinearOracle:
    if spec.model is OutcomeModel.CLIFF_ORD:
        return CliffOrdOracle(ps, noise, spec.self_loop)
    return MovingAverageOracle(ps, noise)


@dataclass
class EstimandTruth:
    """theta*_Q per estimand with the inner Monte Carlo standard errors."""

    values: Dict[EstimandKind, float]
    inner_se: Dict[EstimandKind, float]
    method: TruthMethod
    draws: int = 0

    def __getitem__(self, key: Union[str, EstimandKind]) -> float:
        return self.values[EstimandKind.parse(key)]


def _estimand_terms(
    y: np.ndarray, effects: np.ndarray, d: np.ndarray, y0: np.ndarray
) -> Dict[EstimandKind, float]:
    control = y - d * effects
    treated = y + (1 - d) * effects
    return {
        EstimandKind.DIRECT: float(np.mean(effects)),
        EstimandKind.INDIRECT: float(np.mean(control - y0)),
        EstimandKind.TOTAL: float(np.mean(treated - y0)),
        EstimandKind.OVERALL: float(np.mean(y - y0)),
    }


def true_estimands(
    oracle: PotentialOutcomeOracle,
    p: float,
    method: Union[str, TruthMethod] = TruthMethod.MONTE_CARLO,
    draws: int = 2000,
    seed: int = 0,
    replication: int = 0,
) -> EstimandTruth:
    """theta*_Q against pure control under the one-treated-cluster design.

    That design treats every unit independently with probability p, so the
    clustering does not enter. ``monte_carlo`` averages ``draws`` inner
    draws, ``exact`` uses the closed form of a linear oracle and
    ``exhaustive`` sums over all 2^n vectors (n <= 12).
    """
    method = TruthMethod(method)
    p = float(p)
    y0 = oracle.baseline
    n = oracle.n

    if method is TruthMethod.EXACT:
        if not isinstance(oracle, LinearOracle):
            raise InputValidationError("exact estimands need a linear oracle")
        mean_y = oracle.expected_outcomes(p)
        effects = oracle.own_effects
        values = {
            EstimandKind.DIRECT: float(np.mean(effects)),
            EstimandKind.INDIRECT: float(np.mean(mean_y - p * effects - y0)),
            EstimandKind.TOTAL: float(np.mean(mean_y + (1 - p) * effects - y0)),
            EstimandKind.OVERALL: float(np.mean(mean_y - y0)),
        }
        return EstimandTruth(values, {kind: 0.0 for kind in values}, method)

    if method is TruthMethod.EXHAUSTIVE:
        if n > EXHAUSTIVE_MAX_N:
            raise InputValidationError(f"exhaustive enumeration is limited to n <= {EXHAUSTIVE_MAX_N}")
        values = {kind: 0.0 for kind in ALL_ESTIMANDS}
        for bits in itertools.product((0, 1), repeat=n):
            d = np.array(bits, dtype=float)
            weight = p ** d.sum() * (1 - p) ** (n - d.sum())
            terms = _estimand_terms(oracle.outcomes(d), oracle.flip_effects(d), d, y0)
            for kind, value in terms.items():
                values[kind] += weight * value
        return EstimandTruth(values, {kind: 0.0 for kind in values}, method, 2**n)

    if int(draws) < 2:
        raise InputValidationError("need at least 2 inner draws")
    rng = stream(seed, replication, _TRUTH_STREAM)
    samples: Dict[EstimandKind, List[float]] = {kind: [] for kind in ALL_ESTIMANDS}
    for _ in range(int(draws)):
        d = (rng.random(n) < p).astype(float)
        terms = _estimand_terms(oracle.outcomes(d), oracle.flip_effects(d), d, y0)
        for kind, value in terms.items():
            samples[kind].append(value)
    values = {kind: float(np.mean(v)) for kind, v in samples.items()}
    inner_se = {kind: float(np.std(v, ddof=1) / math.sqrt(len(v))) for kind, v in samples.items()}
    return EstimandTruth(values, inner_se, method, int(draws))


@dataclass(eq=False)
class Population:
    """Everything a cell's replications share."""

    spec: DGPSpec
    points: PointSet
    noise: Noise
    clustering: Clustering
    r_n: float
    exposure: ExposureMap
    exposure_plus: ExposureMap
    dependency: DependencyStructure
    oracle: LinearOracle
    truth: EstimandTruth


def cell_k(spec: DGPSpec, ps: PointSet) -> int:
    """k from the bounding-box volume rule, unless the cell fixes it."""
    if spec.k is not None:
        return int(spec.k)
    return plan_k(region_volume(ps), ps.n, spec.gamma_tilde, ps.dim)


def build_population(
    spec: DGPSpec,
    replication: int = 0,
    truth_method: Union[str, TruthMethod] = TruthMethod.MONTE_CARLO,
    inner_draws: int = 2000,
    cache: Optional[Any] = None,
) -> Population:
    rng = stream(spec.seed, replication, _POPULATION_STREAM)
    ps = gen_locations(spec.n, spec.alpha_n, rng)
    noise = shared_noise(ps, rng, spec.self_loop)
    k = cell_k(spec, ps)
    if cache is not None:
        clustering = cache.get_or_compute(ps, k, spec.seed)
    else:
        clustering = k_medoids(ps, k, seed=spec.seed)
    r_n = exclusion_radius(clustering, spec.rn_multiplier)
    exposure = ExposureMap(ps, clustering, r_n)
    oracle = make_oracle(spec, ps, noise)
    truth = true_estimands(oracle, spec.p, truth_method, inner_draws, spec.seed, replication)
    return Population(
        spec=spec,
        points=ps,
        noise=noise,
        clustering=clustering,
        r_n=r_n,
        exposure=exposure,
        exposure_plus=ExposureMap(ps, clustering, 0.0),
        dependency=DependencyStructure(exposure),
        oracle=oracle,
        truth=truth,
    )


@dataclass
class ReplicationResult:
    estimand: EstimandKind
    theta_hat: Optional[float]
    theta_hat_plus: Optional[float]
    sigma2: Optional[float]
    se: Optional[float]
    covered: Optional[bool]
    dropped_reason: Optional[str] = None


def run_replication(
    population: Population,
    replication: int,
    estimands: Sequence[EstimandKind] = ALL_ESTIMANDS,
    level: float = 0.95,
) -> List[ReplicationResult]:
    """One assignment draw analysed for every estimand."""
    spec = population.spec
    c = population.clustering
    draw = draw_assignment(c, DesignParams(spec.p, spec.q, c.k, spec.seed), replication)
    Y = population.oracle.outcomes(draw.D)
    results = []
    for kind in estimands:
        try:
            theta_plus: Optional[float] = diff_in_means(
                build_panel(kind, Y, draw, population.exposure_plus, spec.p, spec.q)
            )
        except DegenerateDraw:
            theta_plus = None
        panel = build_panel(kind, Y, draw, population.exposure, spec.p, spec.q)
        try:
            theta = hajek(panel)
            report = variance(panel, population.dependency, c.k)
        except DegenerateDraw as e:
            logger.debug("replication %d dropped for %s: %s", replication, kind.value, e)
            results.append(ReplicationResult(kind, None, theta_plus, None, None, None, str(e)))
            continue
        ci = ci_undersmoothed(theta, report.sigma2, c.k, level)
        results.append(
            ReplicationResult(
                estimand=kind,
                theta_hat=theta,
                theta_hat_plus=theta_plus,
                sigma2=report.sigma2,
                se=report.se,
                covered=ci.covers(population.truth[kind]),
            )
        )
    return results


REPORT_COLUMNS = [
    "regime",
    "model",
    "estimand",
    "n",
    "alpha_n",
    "k",
    "r_n",
    "theta_star",
    "theta_star_inner_se",
    "mean_theta_hat",
    "bias",
    "bias_plus",
    "coverage",
    "mean_se",
    "true_se",
    "true_se_plus",
    "bias_mc_se",
    "bias_plus_mc_se",
    "coverage_mc_se",
    "min_sigma2",
    "reps",
    "dropped",
    "dropped_plus",
    "valid",
]


@dataclass
class SimulationReport:
    """Per (regime, model, estimand, n) summary, one row each."""

    table: pd.DataFrame
    invalid_cells: List[str] = field(default_factory=list)

    def to_csv(self, path: Any) -> None:
        self.table.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")

    def row(self, model: str, estimand: str, n: int, regime: Optional[str] = None) -> pd.Series:
        t = self.table
        mask = (t["model"] == OutcomeModel.parse(model).value) & (
            t["estimand"] == EstimandKind.parse(estimand).value
        ) & (t["n"] == int(n))
        if regime is not None:
            mask &= t["regime"] == regime
        rows = t[mask]
        if rows.empty:
            raise KeyError(f"no row for {model}/{estimand}/n={n}")
        return rows.iloc[0]


def _sd(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1)) if values.size > 1 else float("nan")


def summarize_cell(
    spec: DGPSpec,
    k: int,
    r_n: float,
    truth: Dict[EstimandKind, Tuple[float, float]],
    results: List[List[ReplicationResult]],
    estimands: Sequence[EstimandKind],
) -> Tuple[List[Dict[str, Any]], bool]:
    """Fold replication results into table rows; returns (rows, cell_valid)."""
    reps = len(results)
    rows = []
    cell_valid = True
    for idx, kind in enumerate(estimands):
        per_rep = [r[idx] for r in results]
        kept = [r for r in per_rep if r.theta_hat is not None]
        thetas = np.array([r.theta_hat for r in kept], dtype=float)
        plus = np.array([r.theta_hat_plus for r in per_rep if r.theta_hat_plus is not None], dtype=float)
        star, star_se = truth[kind]
        dropped = reps - len(kept)
        valid = dropped <= 0.5 * reps
        cell_valid &= valid
        coverage = float(np.mean([r.covered for r in kept])) if kept else float("nan")
        rows.append(
            {
                "regime": spec.regime,
                "model": spec.model.value,
                "estimand": kind.value,
                "n": spec.n,
                "alpha_n": spec.alpha_n,
                "k": k,
                "r_n": r_n,
                "theta_star": star,
                "theta_star_inner_se": star_se,
                "mean_theta_hat": float(thetas.mean()) if thetas.size else float("nan"),
                "bias": float(thetas.mean() - star) if thetas.size else float("nan"),
                "bias_plus": float(plus.mean() - star) if plus.size else float("nan"),
                "coverage": coverage,
                "mean_se": float(np.mean([r.se for r in kept])) if kept else float("nan"),
                "true_se": _sd(thetas),
                "true_se_plus": _sd(plus),
                "bias_mc_se": _sd(thetas) / math.sqrt(thetas.size) if thetas.size > 1 else float("nan"),
                "bias_plus_mc_se": _sd(plus) / math.sqrt(plus.size) if plus.size > 1 else float("nan"),
                "coverage_mc_se": math.sqrt(coverage * (1 - coverage) / len(kept)) if kept else float("nan"),
                "min_sigma2": float(min(r.sigma2 for r in kept)) if kept else float("nan"),
                "reps": reps,
                "dropped": dropped,
                "dropped_plus": reps - plus.size,
                "valid": valid,
            }
        )
    return rows, cell_valid


def run_cell(
    spec: DGPSpec,
    reps: int,
    estimands: Sequence[EstimandKind] = ALL_ESTIMANDS,
    threads: int = 1,
    truth_method: Union[str, TruthMethod] = TruthMethod.MONTE_CARLO,
    inner_draws: int = 2000,
    level: float = 0.95,
    cache: Optional[Any] = None,
) -> Tuple[List[Dict[str, Any]], bool]:
    estimands = [EstimandKind.parse(q) for q in estimands]
    if not spec.redraw_population:
        population = build_population(spec, 0, truth_method, inner_draws, cache)
        # computed once before the workers share the oracle
        _ = (population.oracle.baseline, population.oracle.own_effects)

        def job(rep: int) -> List[ReplicationResult]:
            return run_replication(population, rep, estimands, level)

        with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
            results = list(executor.map(job, range(reps)))
        truth = {kind: (population.truth[kind], population.truth.inner_se[kind]) for kind in estimands}
        k, r_n = population.clustering.k, population.r_n
    else:
        # superpopulation repetitions: the estimand moves with the population,
        # so bias is taken against the per-replication truth
        def job(rep: int) -> Tuple[List[ReplicationResult], Population]:
            population = build_population(spec, rep, truth_method, inner_draws, cache)
            return run_replication(population, rep, estimands, level), population

        with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
            pairs = list(executor.map(job, range(reps)))
        truth = {
            kind: (
                float(np.mean([pop.truth[kind] for _, pop in pairs])),
                float(np.sqrt(np.mean([pop.truth.inner_se[kind] ** 2 for _, pop in pairs]) / reps)),
            )
            for kind in estimands
        }
        results = [_shift(res, pop, truth) for res, pop in pairs]
        k = int(np.round(np.mean([pop.clustering.k for _, pop in pairs])))
        r_n = float(np.mean([pop.r_n for _, pop in pairs]))
    return summarize_cell(spec, k, r_n, truth, results, estimands)


def _shift(
    results: List[ReplicationResult],
    population: Population,
    truth: Dict[EstimandKind, Tuple[float, float]],
) -> List[ReplicationResult]:
    """Express each estimate relative to its own population's truth.

    Shifting by (mean truth - own truth) makes ``mean - mean truth`` equal the
    average per-population error.
    """
    shifted = []
    for r in results:
        offset = truth[r.estimand][0] - population.truth[r.estimand]
        shifted.append(
            ReplicationResult(
                estimand=r.estimand,
                theta_hat=None if r.theta_hat is None else r.theta_hat + offset,
                theta_hat_plus=None if r.theta_hat_plus is None else r.theta_hat_plus + offset,
                sigma2=r.sigma2,
                se=r.se,
                covered=r.covered,
                dropped_reason=r.dropped_reason,
            )
        )
    return shifted


def run_monte_carlo(
    cells: Iterable[DGPSpec],
    reps: int,
    estimands: Sequence[Union[str, EstimandKind]] = ALL_ESTIMANDS,
    threads: int = 1,
    truth_method: Union[str, TruthMethod] = TruthMethod.MONTE_CARLO,
    inner_draws: int = 2000,
    level: float = 0.95,
    cache: Optional[Any] = None,
) -> SimulationReport:
    """Run every cell for ``reps`` replications and tabulate the metrics.

    Replication r of a cell always uses the design stream (seed, r), so the
    report does not depend on ``threads``. Cells where more than half of the
    draws are degenerate for some estimand are flagged invalid.
    """
    if int(reps) < 1:
        raise InputValidationError("reps must be at least 1")
    kinds = [EstimandKind.parse(q) for q in estimands]
    rows: List[Dict[str, Any]] = []
    invalid: List[str] = []
    for spec in cells:
        cell_rows, valid = run_cell(
            spec, int(reps), kinds, threads, truth_method, inner_draws, level, cache
        )
        rows.extend(cell_rows)
        label = f"{spec.regime}/{spec.model.value}/n={spec.n}"
        if not valid:
            logger.warning("cell %s: more than half of the draws were degenerate", label)
            invalid.append(label)
        logger.info("cell %s done (k=%d, %d reps)", label, cell_rows[0]["k"], reps)
    table = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    return SimulationReport(table=table, invalid_cells=invalid)


@dataclass
class VariogramFit:
    """OLS of log theta_t on log t over the positive ring estimates."""

    gamma: float
    slope: float
    intercept: float
    r_squared: float
    slope_se: float
    rings: List[int]
    thetas: List[float]
    near_radius: Optional[float] = None
    baseline_adjust: bool = True
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "gamma_hat": self.gamma,
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "slope_se": self.slope_se,
            "rings_used": self.rings,
            "theta_t": [None if not np.isfinite(x) else x for x in self.thetas],
            "near_radius": self.near_radius,
            "baseline_adjust": self.baseline_adjust,
            "warnings": list(self.warnings),
        }


def estimate_variogram(thetas: Sequence[float]) -> VariogramFit:
    """Fit log theta_t = a + b log t for t = 1..T; gamma_hat = -b.

    Raises:
        VariogramError: fewer than three positive theta_t.
    """
    thetas = [float(x) for x in thetas]
    rings = [t for t, x in enumerate(thetas, start=1) if np.isfinite(x) and x > 0]
    if len(rings) < 3:
        raise VariogramError(
            f"need at least 3 positive ring estimates, got {len(rings)}", thetas
        )
    fit = linregress(np.log(rings), np.log([thetas[t - 1] for t in rings]))
    return VariogramFit(
        gamma=-float(fit.slope),
        slope=float(fit.slope),
        intercept=float(fit.intercept),
        r_squared=float(fit.rvalue**2),
        slope_se=float(fit.stderr),
        rings=rings,
        thetas=thetas,
    )


@dataclass
class RingEffects:
    """Pooled ring-design contrasts and what the draws reported along the way."""

    thetas: np.ndarray
    near_radius: float
    baseline_adjust: bool
    warnings: List[str]


def _ring_design_effects(
    ps: PointSet,
    c: Clustering,
    T: int,
    reps: int,
    oracle: PotentialOutcomeOracle,
    seed: int = 0,
    near_radius: Optional[float] = None,
    ring_width: float = 1.0,
    threads: int = 1,
    baseline_adjust: bool = True,
) -> RingEffects:
    radius = 0.0 if near_radius is None else float(near_radius)
    if radius < 0:
        raise InputValidationError("near radius must be nonnegative")
    near = medoid_distances(ps, c) <= radius
    baseline = oracle.baseline if baseline_adjust else None

    def job(rep: int) -> Tuple[np.ndarray, np.ndarray, int, int]:
        design = variogram_design(ps, c, T, seed, rep, ring_width)
        Y = oracle.outcomes(design.treated.astype(float))
        if baseline is not None:
            Y = Y - baseline
        unit_arm = design.arms[c.assignment]
        sums = np.zeros(T + 1)
        counts = np.zeros(T + 1)
        for t in range(T + 1):
            group = near & (unit_arm == t)
            sums[t] = Y[group].sum()
            counts[t] = group.sum()
        return sums, counts, len(design.warnings), int(np.count_nonzero(design.arms > 0))

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        results = list(executor.map(job, range(int(reps))))
    sums = np.sum([r[0] for r in results], axis=0)
    counts = np.sum([r[1] for r in results], axis=0)
    empty = sum(r[2] for r in results)
    ringed = sum(r[3] for r in results)

    means = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    thetas = means[1:] - means[0]

    warnings: List[str] = []
    if empty:
        warnings.append(
            f"{empty} of {ringed} ring-treated cluster draws had an empty ring; "
            f"clusters may be too small for {T} rings of width {ring_width:g}"
        )
    for t in np.flatnonzero(counts == 0):
        warnings.append(f"arm {int(t)} never had a unit within {radius:g} of a medoid")
    for message in warnings:
        logger.warning("variogram: %s", message)
    return RingEffects(thetas=thetas, near_radius=radius, baseline_adjust=baseline_adjust, warnings=warnings)


def ring_effects(
    ps: PointSet,
    c: Clustering,
    T: int,
    reps: int,
    oracle: PotentialOutcomeOracle,
    seed: int = 0,
    near_radius: Optional[float] = None,
    ring_width: float = 1.0,
    threads: int = 1,
    baseline_adjust: bool = True,
) -> np.ndarray:
    """theta_t, t = 1..T: near-medoid mean in arm t minus arm 0.

    Arm means pool the near units of every replication. Near units are those
    within ``near_radius`` of their medoid; the default 0 keeps the medoid
    alone, since units off the medoid sit closer than one ring width to parts
    of ring 1. With ``baseline_adjust`` each unit's outcome is taken relative
    to its pre-treatment outcome Y(0). An arm with no near unit in any
    replication leaves NaN.
    """
    return _ring_design_effects(
        ps, c, T, reps, oracle, seed, near_radius, ring_width, threads, baseline_adjust
    ).thetas


def variogram_gamma(
    ps: PointSet,
    c: Clustering,
    T: int,
    reps: int,
    oracle: PotentialOutcomeOracle,
    seed: int = 0,
    near_radius: Optional[float] = None,
    ring_width: float = 1.0,
    threads: int = 1,
    baseline_adjust: bool = True,
) -> VariogramFit:
    """Estimate the decay exponent from the ring-treatment design."""
    if int(T) < 3:
        raise InputValidationError("the variogram needs T >= 3 rings")
    if int(reps) < 1:
        raise InputValidationError("reps must be at least 1")
    effects = _ring_design_effects(
        ps, c, int(T), int(reps), oracle, seed, near_radius, ring_width, threads, baseline_adjust
    )
    try:
        fit = estimate_variogram(effects.thetas)
    except VariogramError:
        logger.warning("variogram: %s", "; ".join(effects.warnings) or "no ring warnings")
        raise
    fit.near_radius = effects.near_radius
    fit.baseline_adjust = effects.baseline_adjust
    fit.warnings = effects.warnings
    logger.info("variogram: gamma_hat=%.3f from %d rings (r^2=%.3f)", fit.gamma, len(fit.rings), fit.r_squared)
    return fit


def simulate_variogram(
    spec: DGPSpec,
    T: int,
    reps: int,
    k: Optional[int] = None,
    near_radius: Optional[float] = None,
    ring_width: float = 1.0,
    threads: int = 1,
    baseline_adjust: bool = True,
) -> Tuple[VariogramFit, Clustering]:
    """Draw one population for ``spec`` and run the ring-treatment design on it.

    ``k`` defaults to ``variogram_k`` for the population's bounding-box volume.
    """
    rng = stream(spec.seed, 0, _POPULATION_STREAM)
    ps = gen_locations(spec.n, spec.alpha_n, rng)
    noise = shared_noise(ps, rng, spec.self_loop)
    if k is None:
        k = min(variogram_k(region_volume(ps), int(T), ring_width, ps.dim), ps.n)
    clustering = k_medoids(ps, int(k), seed=spec.seed)
    oracle = make_oracle(spec, ps, noise)
    fit = variogram_gamma(
        ps, clustering, T, reps, oracle, spec.seed, near_radius, ring_width, threads, baseline_adjust
    )
    return fit, clustering
