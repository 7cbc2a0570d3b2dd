"""End-to-end tests for the spatial-crt command line."""

import json

import pytest

from spatial_crt import cli
from spatial_crt.cli import main
from spatial_crt.clustering import Clustering
from spatial_crt.simulation import VariogramFit


@pytest.fixture
def line4_files(tmp_path, fixtures_dir):
    """clusters.json built by the CLI from the four-point fixture."""
    line4 = fixtures_dir / "line4"
    clusters = tmp_path / "clusters.json"
    code = main(["cluster", "--in", str(line4 / "points.csv"), "--k", "2", "--out", str(clusters)])
    assert code == 0
    return {
        "clusters": clusters,
        "draw": line4 / "draw.json",
        "outcomes": line4 / "outcomes.csv",
        "expected": line4 / "expected_estimates.json",
    }


def test_plan_k_prints_k(capsys):
    code = main(["plan-k", "--volume", "685.7", "--n", "38000", "--gamma", "2", "--dim", "2"])
    assert code == 0
    assert capsys.readouterr().out.splitlines()[0] == "78"


def test_plan_k_unit_length(capsys):
    """84 square units of 100 m, given in metres."""
    code = main(["plan-k", "--volume", "840000", "--n", "38000", "--gamma", "2", "--unit-length", "100", "--explain"])
    out = capsys.readouterr().out.splitlines()
    assert code == 0
    assert out[0] == "19"
    assert "0.25" in out[1]


def test_plan_k_rejects_slow_decay(capsys):
    code = main(["plan-k", "--volume", "100", "--n", "50", "--gamma", "1"])
    assert code == 2
    assert "gamma" in capsys.readouterr().err


@pytest.mark.parametrize(
    "flag, value",
    [("--unit-length", "0"), ("--unit-length", "-100"), ("--volume", "0"), ("--volume", "-5")],
)
def test_plan_k_rejects_non_positive_lengths(capsys, flag, value):
    args = {"--volume": "840000", "--unit-length": "100"}
    args[flag] = value
    argv = ["plan-k", "--n", "38000", "--gamma", "2"]
    for name, given in args.items():
        argv += [f"{name}=" + given]
    assert main(argv) == 2
    assert "must be positive" in capsys.readouterr().err


def test_cluster_rejects_bad_k(tmp_path, fixtures_dir):
    points = fixtures_dir / "line4" / "points.csv"
    assert main(["cluster", "--in", str(points), "--k", "0", "--out", str(tmp_path / "c.json")]) == 2
    assert main(["cluster", "--in", str(tmp_path / "none.csv"), "--k", "1", "--out", str(tmp_path / "c.json")]) == 2


def test_unknown_flag_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["plan-k", "--volume", "1", "--n", "1", "--gamma", "2", "--bogus"])
    assert info.value.code == 2


def test_cluster_document(line4_files):
    doc = json.loads(line4_files["clusters"].read_text())

    assert doc["kind"] == "clusters"
    assert doc["assignment"] == [0, 0, 1, 1]
    assert doc["r_n"] == pytest.approx(0.5)
    assert doc["points"]["ids"] == ["u0", "u1", "u2", "u3"]
    assert doc["manifest"]["inputs"]["points"].startswith("sha256:")


def test_estimate_matches_golden_report(tmp_path, line4_files):
    out = tmp_path / "report.json"
    code = main(
        [
            "estimate",
            "--clusters", str(line4_files["clusters"]),
            "--draw", str(line4_files["draw"]),
            "--outcomes", str(line4_files["outcomes"]),
            "--out", str(out),
        ]
    )
    assert code == 0

    report = json.loads(out.read_text())
    expected = json.loads(line4_files["expected"].read_text())
    assert report["kind"] == "report"
    assert report["r_n"] == pytest.approx(0.5)
    assert [e["estimand"] for e in report["estimates"]] == ["D", "I", "T", "O"]
    for got, want in zip(report["estimates"], expected):
        for key, value in want.items():
            if isinstance(value, float):
                assert got[key] == pytest.approx(value), (want["estimand"], key)
            else:
                assert got[key] == value, (want["estimand"], key)


def test_estimate_is_byte_identical_across_runs(tmp_path, line4_files):
    args = [
        "estimate",
        "--clusters", str(line4_files["clusters"]),
        "--draw", str(line4_files["draw"]),
        "--outcomes", str(line4_files["outcomes"]),
        "--estimand", "O",
    ]
    main(args + ["--out", str(tmp_path / "a.json")])
    main(args + ["--out", str(tmp_path / "b.json")])
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_estimate_bias_aware_interval(tmp_path, line4_files):
    out = tmp_path / "report.json"
    code = main(
        [
            "estimate",
            "--clusters", str(line4_files["clusters"]),
            "--draw", str(line4_files["draw"]),
            "--outcomes", str(line4_files["outcomes"]),
            "--estimand", "D",
            "--bias-c", "1",
            "--bias-gamma", "3",
            "--strict-paper",
            "--out", str(out),
        ]
    )
    assert code == 0
    entry = json.loads(out.read_text())["estimates"][0]
    # 3 c r_n^-gamma with r_n = 0.5; the variance is zero here
    assert entry["bias_aware"]["ci_halfwidth"] == pytest.approx(24.0)
    assert entry["bias_aware"]["strict"]["ci_halfwidth"] == pytest.approx(24.0 * 2**0.5)


def test_estimate_bias_c_needs_gamma(tmp_path, line4_files):
    code = main(
        [
            "estimate",
            "--clusters", str(line4_files["clusters"]),
            "--draw", str(line4_files["draw"]),
            "--outcomes", str(line4_files["outcomes"]),
            "--bias-c", "1",
        ]
    )
    assert code == 2


def test_degenerate_draw_exits_three(tmp_path, line4_files, capsys):
    draw = json.loads(line4_files["draw"].read_text())
    draw.update({"W": [0, 0], "D": [0, 0, 0, 0]})
    draw_path = tmp_path / "draw.json"
    draw_path.write_text(json.dumps(draw))
    out = tmp_path / "report.json"

    code = main(
        [
            "estimate",
            "--clusters", str(line4_files["clusters"]),
            "--draw", str(draw_path),
            "--outcomes", str(line4_files["outcomes"]),
            "--out", str(out),
        ]
    )

    assert code == 3
    entries = json.loads(out.read_text())["estimates"]
    assert all(e["theta_hat"] is None and e["dropped_reason"] for e in entries)
    assert "has no included units" in capsys.readouterr().err


def test_assign_writes_a_valid_draw(tmp_path, line4_files):
    out = tmp_path / "draw.json"
    code = main(
        ["assign", "--clusters", str(line4_files["clusters"]), "--p", "0.7", "--q", "0.6", "--seed", "4", "--out", str(out)]
    )
    assert code == 0
    doc = json.loads(out.read_text())
    assert len(doc["W"]) == 2 and len(doc["D"]) == 4
    assert main(["validate", str(out)]) == 0


def test_assign_rejects_bad_probability(tmp_path, line4_files):
    code = main(
        ["assign", "--clusters", str(line4_files["clusters"]), "--p", "1.2", "--q", "0.6", "--seed", "4", "--out", str(tmp_path / "d.json")]
    )
    assert code == 2


def test_validate_reports_errors(tmp_path, capsys):
    path = tmp_path / "draw.json"
    path.write_text(json.dumps({"kind": "draw", "schema_version": "1"}))
    assert main(["validate", str(path)]) == 2
    assert "❌" in capsys.readouterr().out


def _small_config(tmp_path):
    path = tmp_path / "sim.json"
    path.write_text(
        json.dumps(
            {
                "reps": 4,
                "models": ["ma"],
                "estimands": ["D", "O"],
                "regimes": [{"name": "tiny", "n": [40], "alpha_n": [1.0]}],
                "truth": {"method": "exact", "inner_draws": 10},
            }
        )
    )
    return path


def test_simulate_is_identical_across_thread_counts(tmp_path):
    config = _small_config(tmp_path)
    one = tmp_path / "one.csv"
    many = tmp_path / "many.csv"

    assert main(["--cache-dir", str(tmp_path / "cache"), "simulate", "--config", str(config), "--seed", "5", "--out", str(one)]) == 0
    assert main(["--threads", "3", "simulate", "--config", str(config), "--seed", "5", "--no-cache", "--out", str(many)]) == 0

    assert one.read_bytes() == many.read_bytes()
    manifest = json.loads((tmp_path / "one.csv.manifest.json").read_text())
    assert manifest["seed"] == 5
    assert "threads" not in manifest["config"]
    assert manifest["config"]["region_volume"].startswith("bounding_box")
    assert manifest["inputs"]["config"].startswith("sha256:")


def test_threads_must_be_positive(tmp_path):
    assert main(["--threads", "0", "simulate", "--seed", "1", "--out", str(tmp_path / "r.csv")]) == 2


def test_variogram_reports_resolved_settings(tmp_path, monkeypatch, capsys):
    calls = {}

    def fake_simulate_variogram(spec, T, reps, k, near_radius, ring_width, threads, baseline_adjust=True):
        calls.update(k=k, near_radius=near_radius, baseline_adjust=baseline_adjust)
        fit = VariogramFit(
            gamma=3.2,
            slope=-3.2,
            intercept=0.5,
            r_squared=0.99,
            slope_se=0.1,
            rings=[1, 2, 3],
            thetas=[1.0, 0.11, 0.03],
            near_radius=0.0,
            baseline_adjust=baseline_adjust,
            warnings=["2 of 30 ring-treated cluster draws had an empty ring"],
        )
        clustering = Clustering(medoids=[0, 2], assignment=[0, 0, 1, 1], radii=[1.0, 1.0], cost=2.0)
        return fit, clustering

    monkeypatch.setattr(cli, "simulate_variogram", fake_simulate_variogram)
    out = tmp_path / "variogram.json"

    code = main(["variogram", "--T", "3", "--reps", "5", "--no-baseline-adjust", "--out", str(out)])
    assert code == 0
    assert calls == {"k": None, "near_radius": None, "baseline_adjust": False}

    printed = capsys.readouterr().out
    assert "k=2" in printed
    assert "near units within 0 of the medoid" in printed
    assert "⚠️  2 of 30 ring-treated cluster draws had an empty ring" in printed

    doc = json.loads(out.read_text())
    assert doc["near_radius"] == 0.0
    assert doc["warnings"] == ["2 of 30 ring-treated cluster draws had an empty ring"]
    config = doc["manifest"]["config"]
    assert (config["k"], config["k_derived"], config["near_radius"]) == (2, True, 0.0)
    assert config["baseline_adjust"] is False
    assert config["region_volume"].startswith("bounding_box")
