"""Command line interface for spatial-crt."""

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import __version__
from .artifacts import (
    ClusteringCache,
    RunManifest,
    clusters_document,
    draw_document,
    dumps,
    read_clusters,
    read_draw,
    read_outcomes,
    write_json,
)
from .clustering import exclusion_radius, k_medoids
from .config import SimulationConfig
from .design import DesignParams, draw_assignment, interference_ratio, plan_k
from .errors import InputValidationError, SpatialCRTError
from .estimators import ALL_ESTIMANDS, EstimandKind, ExposureMap, estimate
from .geometry import VOLUME_POLICY, PointSet
from .inference import DependencyStructure, ci_bias_aware, ci_undersmoothed, variance
from .simulation import DGPSpec, OutcomeModel, run_monte_carlo, simulate_variogram
from .validator import ArtifactValidator

logger = logging.getLogger(__name__)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        path = Path(out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def handle_cluster(args: argparse.Namespace) -> int:
    """k-medoids on a points file; writes clusters.json."""
    ps = PointSet.load(args.input, args.metric)
    if args.unit_length is not None:
        ps = ps.rescale(args.unit_length)
    c = k_medoids(ps, args.k, seed=args.seed)
    r_n = exclusion_radius(c, args.rn_multiplier)
    manifest = RunManifest.create(
        "cluster",
        {
            "k": args.k,
            "metric": ps.metric.value,
            "rn_multiplier": args.rn_multiplier,
            "unit_length": args.unit_length,
        },
        seed=args.seed,
        inputs={"points": args.input},
    )
    write_json(args.out, clusters_document(ps, c, r_n, args.rn_multiplier, manifest))
    print(f"✅ {c.k} clusters over {c.n} units (cost {c.cost:.4f}, r_n {r_n:.4f}) → {args.out}")
    return 0


def handle_plan_k(args: argparse.Namespace) -> int:
    """k = round(min(V, n)^(2g/(2g+d)))."""
    if not args.unit_length > 0:
        raise InputValidationError(f"--unit-length must be positive, got {args.unit_length:g}")
    if not args.volume > 0:
        raise InputValidationError(f"--volume must be positive, got {args.volume:g}")
    if args.dim < 1:
        raise InputValidationError(f"--dim must be at least 1, got {args.dim}")
    volume = args.volume / args.unit_length**args.dim
    k = plan_k(volume, args.n, args.gamma, args.dim)
    print(k)
    if args.explain:
        ratio = interference_ratio(args.gamma)
        print(
            f"gamma={args.gamma:g}: doubling the distance shrinks spillovers to at most "
            f"{ratio:.4g} of their size (2^-{args.gamma:g}); volume {volume:g} in "
            f"unit-length^{args.dim}, min(V, n) = {min(volume, args.n):g}"
        )
    return 0


def handle_assign(args: argparse.Namespace) -> int:
    _, c, _ = read_clusters(args.clusters)
    params = DesignParams(p=args.p, q=args.q, k=c.k, seed=args.seed)
    draw = draw_assignment(c, params, args.replication)
    manifest = RunManifest.create(
        "assign",
        {"p": args.p, "q": args.q, "replication": args.replication},
        seed=args.seed,
        inputs={"clusters": args.clusters},
    )
    write_json(args.out, draw_document(draw, args.p, args.q, args.seed, args.replication, manifest))
    print(f"✅ {int(draw.W.sum())}/{draw.k} clusters and {int(draw.D.sum())}/{draw.n} units treated → {args.out}")
    return 0


def _estimate_entry(
    kind: EstimandKind,
    Y,
    draw,
    exposure: ExposureMap,
    exposure_plus: ExposureMap,
    dep: DependencyStructure,
    p: float,
    q: float,
    args: argparse.Namespace,
) -> Dict[str, Any]:
    result = estimate(kind, Y, draw, exposure, exposure_plus, p, q)
    entry: Dict[str, Any] = {
        "estimand": kind.value,
        "theta_hat": result.theta_hat,
        "theta_hat_plus": result.theta_hat_plus,
        "n_included_1": result.n_included_1,
        "n_included_0": result.n_included_0,
        "sigma2_1": None,
        "sigma2_2": None,
        "sigma2": None,
        "se": None,
        "ci_low": None,
        "ci_high": None,
        "ci_kind": None,
        "ci_level": None,
        "bias_aware": None,
        "dropped_reason": result.dropped_reason,
    }
    if result.theta_hat is None or result.panel is None:
        return entry
    theta = result.theta_hat
    report = variance(result.panel, dep)
    entry.update(report.to_dict())
    entry.update(ci_undersmoothed(theta, report.sigma2, dep.k, args.level).to_dict())
    if args.bias_c is not None:
        wide = ci_bias_aware(
            theta, report.sigma2, dep.k, args.bias_c, args.bias_gamma, exposure.r,
            dim=args.dim, level=args.level,
        )
        bias_aware = wide.to_dict()
        if args.strict_paper:
            strict = ci_bias_aware(
                theta, report.sigma2, dep.k, args.bias_c, args.bias_gamma, exposure.r,
                dim=args.dim, strict_paper=True, level=args.level,
            )
            bias_aware["strict"] = strict.to_dict()
        entry["bias_aware"] = bias_aware
    return entry


def handle_estimate(args: argparse.Namespace) -> int:
    """Point estimates, variances and intervals for the requested estimands."""
    if args.bias_c is not None and args.bias_gamma is None:
        raise InputValidationError("--bias-c needs --bias-gamma")
    ps, c, _ = read_clusters(args.clusters)
    draw, draw_doc = read_draw(args.draw)
    draw.validate(c)
    Y = read_outcomes(args.outcomes, ps)
    p, q = float(draw_doc["p"]), float(draw_doc["q"])
    r_n = exclusion_radius(c, args.rn_multiplier)
    exposure = ExposureMap(ps, c, r_n)
    exposure_plus = ExposureMap(ps, c, 0.0)
    dep = DependencyStructure(exposure)

    kinds = list(ALL_ESTIMANDS) if args.estimand.lower() == "all" else [EstimandKind.parse(args.estimand)]
    entries = [_estimate_entry(kind, Y, draw, exposure, exposure_plus, dep, p, q, args) for kind in kinds]

    manifest = RunManifest.create(
        "estimate",
        {
            "estimand": args.estimand,
            "rn_multiplier": args.rn_multiplier,
            "level": args.level,
            "bias_c": args.bias_c,
            "bias_gamma": args.bias_gamma,
            "strict_paper": args.strict_paper,
            "p": p,
            "q": q,
        },
        seed=draw_doc.get("seed"),
        inputs={"clusters": args.clusters, "draw": args.draw, "outcomes": args.outcomes},
    )
    doc = {
        "kind": "report",
        "schema_version": "1",
        "k": c.k,
        "n": c.n,
        "r_n": r_n,
        "p": p,
        "q": q,
        "estimates": entries,
        "manifest": manifest.to_dict(),
    }
    _emit(dumps(doc), args.out)

    dropped = [e for e in entries if e["dropped_reason"]]
    for e in dropped:
        print(f"❌ {e['estimand']}: {e['dropped_reason']}", file=sys.stderr)
    if args.out:
        print(f"✅ {len(entries) - len(dropped)}/{len(entries)} estimands estimated → {args.out}")
    return 3 if dropped else 0


def _manifest_path(out: str) -> Path:
    return Path(f"{out}.manifest.json")


def handle_simulate(args: argparse.Namespace) -> int:
    overrides = {
        "seed": args.seed,
        "reps": args.reps,
        "threads": args.threads,
        "models": args.models,
        "estimands": args.estimands,
        "truth": {"method": args.truth_method, "inner_draws": args.inner_draws},
    }
    config = SimulationConfig.load(args.config, overrides)
    cache = None if args.no_cache else ClusteringCache(args.cache_dir)
    report = run_monte_carlo(
        config.cells(),
        config.reps,
        config.estimands,
        threads=config.threads,
        truth_method=config.truth_method,
        inner_draws=config.inner_draws,
        level=config.level,
        cache=cache,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(args.out)
    inputs = {"config": args.config} if args.config else {}
    # threads never changes the numbers, so it stays out of the manifest
    resolved = {key: value for key, value in config.raw.items() if key != "threads"}
    resolved["region_volume"] = VOLUME_POLICY
    manifest = RunManifest.create("simulate", resolved, seed=config.seed, inputs=inputs)
    write_json(_manifest_path(args.out), manifest.to_dict())
    print(f"✅ {len(report.table)} rows over {len(config.cells())} cells → {args.out}")
    for label in report.invalid_cells:
        print(f"⚠️  cell {label} flagged invalid: more than half of the draws were degenerate")
    return 0


def handle_variogram(args: argparse.Namespace) -> int:
    spec = DGPSpec(
        model=OutcomeModel.parse(args.model),
        n=args.n,
        alpha_n=args.alpha,
        seed=args.seed,
        regime="variogram",
    )
    fit, clustering = simulate_variogram(
        spec,
        args.T,
        args.reps,
        args.k,
        args.near_radius,
        args.ring_width,
        args.threads or 1,
        baseline_adjust=not args.no_baseline_adjust,
    )
    manifest = RunManifest.create(
        "variogram",
        {
            "model": spec.model.value,
            "n": args.n,
            "alpha_n": args.alpha,
            "k": clustering.k,
            "k_derived": args.k is None,
            "T": args.T,
            "reps": args.reps,
            "ring_width": args.ring_width,
            "near_radius": fit.near_radius,
            "baseline_adjust": fit.baseline_adjust,
            "region_volume": VOLUME_POLICY,
        },
        seed=args.seed,
    )
    doc = {"kind": "variogram", "schema_version": "1", **fit.to_dict(), "manifest": manifest.to_dict()}
    _emit(dumps(doc), args.out)
    status = sys.stdout if args.out else sys.stderr
    print(
        f"✅ gamma_hat = {fit.gamma:.3f} (slope SE {fit.slope_se:.3f}), k={clustering.k}, "
        f"near units within {fit.near_radius:g} of the medoid"
        + (f" → {args.out}" if args.out else ""),
        file=status,
    )
    for message in fit.warnings:
        print(f"⚠️  {message}", file=status)
    return 0


def handle_validate(args: argparse.Namespace) -> int:
    validator = ArtifactValidator()
    result = validator.validate_file(Path(args.path), args.kind)

    if result["valid"]:
        print("✅ Artifact is valid")
        if result.get("warnings"):
            print("⚠️  Warnings:")
            for warning in result["warnings"]:
                print(f"  - {warning}")
        return 0

    print("❌ Artifact is invalid")
    for error in result["errors"]:
        print(f"  - {error}")
    return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spatial-crt",
        description="Design and analysis of spatial cluster-randomized trials",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true", help="Verbose output")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads for simulations")
    parser.add_argument("--cache-dir", default=None, help="Clustering cache directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster", help="k-medoids clustering of unit locations")
    p.add_argument("--in", dest="input", required=True, help="Points CSV (id,x,y,...) or JSON")
    p.add_argument("--k", type=int, required=True, help="Number of clusters")
    p.add_argument("--seed", type=int, default=0, help="Seed for BUILD tie-breaks")
    p.add_argument("--metric", choices=["euclidean", "chebyshev"], default="euclidean")
    p.add_argument("--rn-multiplier", type=float, default=0.5, help="r_n as a multiple of the median radius")
    p.add_argument("--unit-length", type=float, default=None, help="Divide coordinates by this length")
    p.add_argument("--out", required=True, help="Output clusters.json")
    p.set_defaults(handler=handle_cluster)

    p = sub.add_parser("plan-k", help="Number of clusters from the decay exponent")
    p.add_argument("--volume", type=float, required=True, help="Region volume")
    p.add_argument("--n", type=int, required=True, help="Number of units")
    p.add_argument("--gamma", type=float, required=True, help="Lower bound on the decay exponent")
    p.add_argument("--dim", type=int, default=2, help="Spatial dimension")
    p.add_argument("--unit-length", type=float, default=1.0, help="Volume is divided by unit-length^dim")
    p.add_argument("--explain", action="store_true", help="Print the decay interpretation")
    p.set_defaults(handler=handle_plan_k)

    p = sub.add_parser("assign", help="Draw a two-stage assignment")
    p.add_argument("--clusters", required=True)
    p.add_argument("--p", type=float, required=True, help="Treated share within treated clusters")
    p.add_argument("--q", type=float, required=True, help="Cluster treatment probability")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--replication", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=handle_assign)

    p = sub.add_parser("estimate", help="Estimates, variances and confidence intervals")
    p.add_argument("--clusters", required=True)
    p.add_argument("--draw", required=True)
    p.add_argument("--outcomes", required=True, help="Outcomes CSV (id,y)")
    p.add_argument("--estimand", default="all", help="D, I, T, O or all")
    p.add_argument("--rn-multiplier", type=float, default=0.5)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--bias-c", type=float, default=None, help="Interference bound constant c")
    p.add_argument("--bias-gamma", type=float, default=None, help="Decay exponent for the bias bound")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--strict-paper", action="store_true", help="Also report the sqrt(k)-scaled bias bound")
    p.add_argument("--out", default=None, help="Output report.json (stdout if omitted)")
    p.set_defaults(handler=handle_estimate)

    p = sub.add_parser("simulate", help="Monte Carlo study over a grid of cells")
    p.add_argument("--config", default=None, help="JSON or TOML simulation config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--models", nargs="+", choices=["cliff_ord", "ma"], default=None)
    p.add_argument("--estimands", nargs="+", choices=["D", "I", "T", "O"], default=None)
    p.add_argument("--truth-method", choices=["monte_carlo", "exact", "exhaustive"], default=None)
    p.add_argument("--inner-draws", type=int, default=None)
    p.add_argument("--no-cache", action="store_true", help="Do not reuse cached clusterings")
    p.add_argument("--out", required=True, help="Output report.csv")
    p.set_defaults(handler=handle_simulate)

    p = sub.add_parser("variogram", help="Estimate the decay exponent with ring treatments")
    p.add_argument("--model", choices=["cliff_ord", "ma"], default="ma")
    p.add_argument("--T", type=int, default=8, help="Number of treated rings")
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--k", type=int, default=None, help="Clusters (default: sized to hold T rings)")
    p.add_argument("--ring-width", type=float, default=1.0)
    p.add_argument(
        "--near-radius", type=float, default=None, help="Units within this medoid distance (default 0)"
    )
    p.add_argument(
        "--no-baseline-adjust", action="store_true", help="Do not subtract the untreated outcomes"
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(handler=handle_variogram)

    p = sub.add_parser("validate", help="Check an artifact against its schema")
    p.add_argument("path")
    p.add_argument("--kind", choices=["clusters", "draw", "report", "simulation-config"], default=None)
    p.set_defaults(handler=handle_validate)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(levelname)s - %(message)s",
    )
    if args.threads is not None and args.threads < 1:
        print("❌ --threads must be at least 1", file=sys.stderr)
        return 2

    try:
        return args.handler(args)
    except SpatialCRTError as e:
        print(f"❌ {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, json.JSONDecodeError) as e:
        print(f"❌ {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"❌ unexpected error: {e}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
