"""Tests for the outcome models, true estimands and the Monte Carlo harness."""

import numpy as np
import pandas as pd
import pytest

from spatial_crt import simulation
from spatial_crt.design import stream
from spatial_crt.errors import InputValidationError
from spatial_crt.estimators import EstimandKind
from spatial_crt.geometry import PointSet
from spatial_crt.simulation import (
    CliffOrdOracle,
    DGPSpec,
    LinearOracle,
    MovingAverageOracle,
    Noise,
    OutcomeModel,
    PotentialOutcomeOracle,
    TruthMethod,
    adjacency_weights,
    build_population,
    cell_k,
    cliff_ord_outcomes,
    gen_locations,
    make_oracle,
    moving_average_outcomes,
    run_monte_carlo,
    shared_noise,
    true_estimands,
)


def _population(n, seed=0, alpha=1.0):
    rng = np.random.default_rng(seed)
    ps = gen_locations(n, alpha, rng)
    return ps, shared_noise(ps, rng)


def _noise(beta, eps):
    beta = np.asarray(beta, dtype=float)
    eps = np.asarray(eps, dtype=float)
    return Noise(beta_tilde=beta, eps_tilde=eps, beta=beta, eps=eps)


class PairOracle(PotentialOutcomeOracle):
    """Nonlinear two-unit model: each unit gains 1 only if both are treated."""

    def __init__(self):
        super().__init__(2)

    def outcomes(self, d):
        d = np.asarray(d, dtype=float)
        return np.full(2, d[0] * d[1])


def test_gen_locations_bounds_and_center():
    ps = gen_locations(2000, 0.5, np.random.default_rng(1))
    half = np.sqrt(1000.0)
    se = half / np.sqrt(3.0) / np.sqrt(2000)

    assert ps.n == 2000 and ps.dim == 2
    assert np.all(np.abs(ps.coords) <= half)
    assert np.all(np.abs(ps.coords.mean(axis=0)) < 4 * se)
    with pytest.raises(InputValidationError):
        gen_locations(10, 0.0, np.random.default_rng(0))


def test_adjacency_rows_are_normalized():
    ps, _ = _population(200)
    G = adjacency_weights(ps)
    np.testing.assert_allclose(np.asarray(G.sum(axis=1)).ravel(), 1.0)


def test_adjacency_without_self_loop_leaves_isolated_rows_empty():
    ps = PointSet(np.array([[0.0, 0.0], [0.5, 0.0], [10.0, 10.0]]))
    G = adjacency_weights(ps, self_loop=False).toarray()

    np.testing.assert_allclose(G[0], [0.0, 1.0, 0.0])
    np.testing.assert_allclose(G[2], 0.0)


def test_isolated_unit_doubles_its_noise():
    ps = PointSet(np.array([[0.0, 0.0], [5.0, 5.0]]))
    noise = shared_noise(ps, np.random.default_rng(3))
    np.testing.assert_allclose(noise.beta, 2.0 * noise.beta_tilde)
    np.testing.assert_allclose(noise.eps, 2.0 * noise.eps_tilde)


def test_cliff_ord_single_unit():
    """With the self-loop (1 - 0.8) Y = -1 + D beta + eps."""
    ps = PointSet(np.array([[0.0, 0.0]]))
    assert cliff_ord_outcomes(ps, np.array([0.0]), _noise([2.0], [0.0]))[0] == pytest.approx(-5.0)
    assert cliff_ord_outcomes(ps, np.array([1.0]), _noise([2.0], [0.5]))[0] == pytest.approx(7.5)


def test_cliff_ord_solves_the_system():
    ps, noise = _population(300)
    oracle = CliffOrdOracle(ps, noise)
    D = (np.random.default_rng(0).random(300) < 0.5).astype(float)
    Y = oracle.outcomes(D)

    lhs = Y - 0.8 * (oracle.G @ Y)
    rhs = -1.0 + D * noise.beta + noise.eps
    assert np.max(np.abs(lhs - rhs)) < 1e-8


def test_cliff_ord_fixed_point_matches_direct_solve(monkeypatch):
    ps, noise = _population(150)
    D = (np.random.default_rng(1).random(150) < 0.3).astype(float)
    direct = CliffOrdOracle(ps, noise).outcomes(D)

    monkeypatch.setattr(simulation, "DIRECT_SOLVE_MAX_N", 0)
    iterated = CliffOrdOracle(ps, noise).outcomes(D)

    np.testing.assert_allclose(iterated, direct, atol=1e-8)


def test_cliff_ord_own_weights_are_the_inverse_diagonal():
    ps, noise = _population(50, seed=4)
    oracle = CliffOrdOracle(ps, noise)
    inverse = np.linalg.inv(oracle.system.toarray())
    np.testing.assert_allclose(oracle.own_weights(), np.diag(inverse), rtol=1e-10)


def test_moving_average_single_unit():
    ps = PointSet(np.array([[0.0, 0.0]]))
    Y = moving_average_outcomes(ps, np.array([1.0]), _noise([2.0], [0.25]))
    assert Y[0] == pytest.approx(1.25)


def test_moving_average_cross_weight():
    ps = PointSet(np.array([[0.0, 0.0], [2.0, 0.0]]))
    oracle = MovingAverageOracle(ps, _noise([1.0, 1.0], [0.0, 0.0]))
    assert oracle.weights[0, 1] == pytest.approx(1.0 / 32.0)
    assert oracle.weights[0, 0] == 1.0


def test_moving_average_matches_double_loop():
    rng = np.random.default_rng(6)
    ps = PointSet(rng.uniform(0, 3, size=(5, 2)))
    beta, eps = rng.normal(1, 1, 5), rng.normal(0, 1, 5)
    D = np.array([1.0, 0.0, 1.0, 1.0, 0.0])

    Y = MovingAverageOracle(ps, _noise(beta, eps)).outcomes(D)

    expected = np.zeros(5)
    for i in range(5):
        for j in range(5):
            w = max(ps.distance(i, j), 1.0) ** -5
            expected[i] += w * (-1.0 + D[j] * beta[j] + eps[j])
    np.testing.assert_allclose(Y, expected)


def test_generic_flip_effects_match_linear_shortcut():
    ps, noise = _population(20, seed=2)
    oracle = CliffOrdOracle(ps, noise)
    d = (np.random.default_rng(0).random(20) < 0.5).astype(float)
    np.testing.assert_allclose(
        PotentialOutcomeOracle.flip_effects(oracle, d), oracle.flip_effects(d), atol=1e-10
    )


def test_true_estimands_without_interference():
    ps, noise = _population(40, seed=5)
    oracle = MovingAverageOracle(ps, noise, self_only=True)
    mean_beta = float(noise.beta_tilde.mean())

    exact = true_estimands(oracle, 0.7, "exact")
    assert exact["D"] == pytest.approx(mean_beta)
    assert exact["I"] == pytest.approx(0.0, abs=1e-12)
    assert exact["T"] == pytest.approx(mean_beta)
    assert exact["O"] == pytest.approx(0.7 * mean_beta)

    mc = true_estimands(oracle, 0.7, "monte_carlo", draws=200, seed=1)
    assert mc["D"] == pytest.approx(mean_beta)
    assert mc["I"] == pytest.approx(0.0, abs=1e-12)
    assert mc["T"] == pytest.approx(mean_beta)


@pytest.mark.parametrize("model", ["cliff_ord", "ma"])
def test_true_estimands_identities(model):
    """theta_T = theta_D + theta_I, and theta_O mixes T and I with weight p."""
    ps, noise = _population(60, seed=7)
    oracle = make_oracle(DGPSpec(model=model, n=60), ps, noise)
    p = 0.7

    exact = true_estimands(oracle, p, TruthMethod.EXACT)
    assert exact["T"] == pytest.approx(exact["D"] + exact["I"])
    assert exact["O"] == pytest.approx(p * exact["T"] + (1 - p) * exact["I"])

    mc = true_estimands(oracle, p, TruthMethod.MONTE_CARLO, draws=100, seed=3)
    assert mc["T"] == pytest.approx(mc["D"] + mc["I"])


@pytest.mark.parametrize("model", ["cliff_ord", "ma"])
def test_exhaustive_truth_matches_closed_form(model):
    ps, noise = _population(6, seed=9, alpha=0.2)
    oracle = make_oracle(DGPSpec(model=model, n=6), ps, noise)

    exact = true_estimands(oracle, 0.7, "exact")
    exhaustive = true_estimands(oracle, 0.7, "exhaustive")

    assert exhaustive.draws == 64
    for kind in EstimandKind:
        assert exhaustive[kind] == pytest.approx(exact[kind], abs=1e-10)


@pytest.mark.parametrize("model", ["cliff_ord", "ma"])
def test_monte_carlo_truth_close_to_closed_form(model):
    ps, noise = _population(80, seed=11)
    oracle = make_oracle(DGPSpec(model=model, n=80), ps, noise)

    exact = true_estimands(oracle, 0.7, "exact")
    mc = true_estimands(oracle, 0.7, "monte_carlo", draws=400, seed=2)

    for kind in EstimandKind:
        assert abs(mc[kind] - exact[kind]) <= 4 * mc.inner_se[kind] + 1e-9


def test_exhaustive_truth_for_a_nonlinear_oracle():
    """Both units gain 1 only when both are treated."""
    truth = true_estimands(PairOracle(), 0.5, "exhaustive")
    # Delta_i = d_j, so theta_D = P(d_j = 1)
    assert truth["D"] == pytest.approx(0.5)
    assert truth["O"] == pytest.approx(0.25)
    assert truth["T"] == pytest.approx(0.5)
    assert truth["I"] == pytest.approx(0.0)


def test_true_estimands_rejects_unsupported_methods():
    with pytest.raises(InputValidationError):
        true_estimands(PairOracle(), 0.5, "exact")
    ps, noise = _population(13)
    with pytest.raises(InputValidationError):
        true_estimands(MovingAverageOracle(ps, noise), 0.5, "exhaustive")
    with pytest.raises(InputValidationError):
        true_estimands(PairOracle(), 0.5, "monte_carlo", draws=1)


@pytest.mark.parametrize("alpha", [1.0, 0.9])
@pytest.mark.parametrize("n,expected", [(250, 40), (500, 63), (1000, 100)])
def test_cell_k_follows_the_sample_size(n, expected, alpha):
    spec = DGPSpec(model="ma", n=n, alpha_n=alpha)
    ps = gen_locations(n, alpha, stream(0, 0, 3))
    assert cell_k(spec, ps) == expected


def test_outcome_model_parse():
    assert OutcomeModel.parse("Cliff-Ord") is OutcomeModel.CLIFF_ORD
    assert OutcomeModel.parse("moving_average") is OutcomeModel.MOVING_AVERAGE
    with pytest.raises(InputValidationError):
        OutcomeModel.parse("probit")


def test_dgp_spec_validation():
    with pytest.raises(InputValidationError):
        DGPSpec(model="ma", n=10, alpha_n=1.5)
    with pytest.raises(InputValidationError):
        DGPSpec(model="ma", n=10, q=1.0)
    with pytest.raises(InputValidationError):
        DGPSpec(model="ma", n=10, k=11)


def test_build_population_is_reproducible():
    spec = DGPSpec(model="cliff_ord", n=80, seed=4, k=5)
    a = build_population(spec, truth_method="exact")
    b = build_population(spec, truth_method="exact")

    np.testing.assert_array_equal(a.points.coords, b.points.coords)
    assert a.clustering.assignment.tolist() == b.clustering.assignment.tolist()
    assert a.r_n == b.r_n
    assert isinstance(a.oracle, LinearOracle)
    assert a.truth["D"] == b.truth["D"]


def _small_cells(**extra):
    return [
        DGPSpec(model=model, n=60, seed=8, k=4, regime="increasing", **extra)
        for model in ("cliff_ord", "ma")
    ]


def test_run_monte_carlo_is_deterministic_across_threads():
    one = run_monte_carlo(_small_cells(), reps=8, threads=1, truth_method="exact")
    again = run_monte_carlo(_small_cells(), reps=8, threads=1, truth_method="exact")
    many = run_monte_carlo(_small_cells(), reps=8, threads=4, truth_method="exact")

    pd.testing.assert_frame_equal(one.table, again.table)
    pd.testing.assert_frame_equal(one.table, many.table)


def test_run_monte_carlo_table_shape_and_ranges(tmp_path):
    report = run_monte_carlo(_small_cells(), reps=8, truth_method="exact")
    table = report.table

    assert list(table.columns) == simulation.REPORT_COLUMNS
    assert len(table) == 8
    assert set(table["estimand"]) == {"D", "I", "T", "O"}
    assert (table["reps"] == 8).all()
    assert ((table["dropped"] >= 0) & (table["dropped"] <= 8)).all()
    coverage = table["coverage"].dropna()
    assert ((coverage >= 0) & (coverage <= 1)).all()
    assert (table["theta_star_inner_se"] == 0.0).all()

    row = report.row("ma", "D", 60)
    assert row["k"] == 4

    out = tmp_path / "report.csv"
    report.to_csv(out)
    assert pd.read_csv(out).shape == table.shape


def test_mostly_degenerate_cell_is_flagged():
    spec = DGPSpec(model="ma", n=30, q=0.02, k=2, seed=1)
    report = run_monte_carlo([spec], reps=10, truth_method="exact")

    assert report.invalid_cells == ["increasing/ma/n=30"]
    assert not report.table["valid"].all()


def test_redrawn_populations():
    spec = DGPSpec(model="ma", n=40, k=3, seed=2, redraw_population=True)
    report = run_monte_carlo([spec], reps=3, estimands=["D", "O"], truth_method="exact")

    assert len(report.table) == 2
    assert (report.table["reps"] == 3).all()
