"""Command-line entry point.

Exit status: 0 on success, 2 for invalid input, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attack import (
    AttackConfig,
    SampleDropped,
    baseline_normal,
    baseline_uniform,
    evaluate_perturbation,
    optimize_perturbation,
)
from .data import (
    SHAPE_KINDS,
    SUITE_KINDS,
    ManifestError,
    ManifestLoad,
    generate_scene,
    load_manifest,
    make_pair,
    synthetic_route,
    synthetic_suite,
    write_manifest,
)
from .geometry import PoseValidationError
from .gradients import GradientConfig, finite_difference_check
from .harness import compute_allowance, route_map, run_benchmark
from .icp import IcpError, MapModel, icp_profile, run_icp

log = logging.getLogger("icp_attack")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class NumericalFailure(RuntimeError):
    pass


def _floats(text: str, n: int | None = None) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _weights(text: str) -> list[float]:
    return _floats(text, 6)


def _load(path) -> ManifestLoad:
    if not Path(path).exists():
        raise ManifestError(f"{path}: no such file")
    loaded = load_manifest(path)
    for eid, msg in loaded.errors:
        print(f"warning: entry {eid} skipped: {msg}", file=sys.stderr)
    if not loaded.pairs:
        raise ManifestError(f"{path}: no usable entries")
    return loaded


def _first_pair(path):
    loaded = _load(path)
    if len(loaded.pairs) > 1:
        print(f"note: {path} has {len(loaded.pairs)} entries; using {loaded.pairs[0].id}", file=sys.stderr)
    return loaded.pairs[0], loaded


def _attack_config(args, lam: float, profile: str) -> AttackConfig:
    kw = {
        "lam": lam,
        "alpha": args.alpha,
        "beta": args.beta,
        "steps": args.steps,
        "unroll": GradientConfig(unroll_iterations=25, icp=icp_profile(profile)),
    }
    if getattr(args, "w", None) is not None:
        kw["w"] = tuple(args.w)
    return AttackConfig(**kw)


def _write_json(path, doc) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))


# --- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.kind == "route":
        pairs, polyline = synthetic_route(segments=args.count, seed=args.seed)
        path = write_manifest(pairs, out, "shapenet", "normalized", route=polyline)
    elif args.profile == "boreas":
        kinds = SUITE_KINDS if args.kind == "suite" else (args.kind,)
        seeds = np.random.SeedSequence(args.seed).spawn(args.count)
        pairs = []
        for i, ss in enumerate(seeds):
            shape_seed, pair_seed = ss.spawn(2)
            kind = kinds[i % len(kinds)]
            scene = generate_scene(kind, np.random.default_rng(shape_seed))
            pairs.append(make_pair(scene, "boreas", np.random.default_rng(pair_seed), pair_id=f"{kind}-{i:04d}"))
        path = write_manifest(pairs, out, "boreas", "m")
    else:
        kinds = SUITE_KINDS if args.kind == "suite" else (args.kind,)
        pairs = synthetic_suite(args.count, seed=args.seed, kinds=kinds)
        path = write_manifest(pairs, out, "shapenet", "normalized")
    print(path)
    return EXIT_OK


def cmd_icp(args) -> int:
    pair, _ = _first_pair(args.pair)
    overrides = {}
    if args.max_iters is not None:
        overrides["max_iterations"] = args.max_iters
    if args.tol is not None:
        overrides["tolerance"] = args.tol
    result = run_icp(pair.scan, pair.map, icp_profile(args.profile, **overrides))
    print(json.dumps(result.to_dict(), indent=2))
    return EXIT_OK


def cmd_attack(args) -> int:
    loaded = _load(args.manifest)
    config = _attack_config(args, args.lam, loaded.profile)
    out = Path(args.out)
    summary, done = [], []
    for pair in loaded.pairs:
        try:
            res = optimize_perturbation(pair, config)
        except SampleDropped as exc:
            summary.append({"id": pair.id, "dropped": str(exc)})
            continue
        res.save(out, pair.id)
        done.append(res)
        summary.append({
            "id": pair.id,
            "planar_error_before": res.pose_error_before.planar_norm,
            "planar_error_after": res.pose_error_after.planar_norm if res.pose_error_after else None,
            "converged_after": res.converged_after,
            "warning": res.warning,
        })
    if not done:
        raise NumericalFailure("ICP did not converge on any unperturbed scan")
    doc = {
        "config": config.to_dict(),
        "allowance": compute_allowance(done),
        "pairs": summary,
        "rejected_entries": [list(e) for e in loaded.errors],
    }
    _write_json(out / "summary.json", doc)
    print(out / "summary.json")
    return EXIT_OK


def cmd_baseline(args) -> int:
    loaded = _load(args.manifest)
    cfg = icp_profile(loaded.profile)
    out = Path(args.out)
    summary = []
    for i, pair in enumerate(loaded.pairs):
        if args.method == "uniform":
            seed = int(np.random.SeedSequence([args.seed, i]).generate_state(1)[0])
            res = baseline_uniform(pair.scan, args.lam, seed)
        else:
            res = baseline_normal(pair.scan, args.lam)
        res = evaluate_perturbation(res, pair, cfg, MapModel(pair.map))
        res.save(out, pair.id)
        summary.append({
            "id": pair.id,
            "planar_error_before": res.pose_error_before.planar_norm if res.pose_error_before else None,
            "planar_error_after": res.pose_error_after.planar_norm if res.pose_error_after else None,
            "converged_after": res.converged_after,
        })
    _write_json(out / "summary.json", {"method": args.method, "lambda": args.lam, "pairs": summary})
    print(out / "summary.json")
    return EXIT_OK


def cmd_bench(args) -> int:
    groups, pairs, profiles = {}, [], set()
    multi = len(args.manifest) > 1
    for i, path in enumerate(args.manifest):
        loaded = _load(path)
        profiles.add(loaded.profile)
        name = Path(path).parent.name or Path(path).stem
        if name in groups:
            name = f"{name}-{i}"
        for p in loaded.pairs:
            if multi:
                p = replace(p, id=f"{name}/{p.id}")
            groups.setdefault(name, []).append(p.id)
            pairs.append(p)
    if len(profiles) > 1:
        raise ManifestError(f"manifests mix ICP profiles: {sorted(profiles)}")
    config = _attack_config(args, args.lambdas[0], profiles.pop())
    table = run_benchmark(pairs, args.lambdas, config, seed=args.seed, workers=args.workers)
    if multi:
        table.breakdown = {name: table.subset(ids) for name, ids in groups.items()}
    json_path, csv_path = table.write(args.out)
    print(json_path)
    print(csv_path)
    return EXIT_OK


def cmd_route_map(args) -> int:
    loaded = _load(args.manifest)
    report = route_map(
        loaded.pairs,
        _attack_config(args, args.lam, loaded.profile),
        args.cap,
        polyline=loaded.route,
        bin_size=args.bin_size,
        workers=args.workers,
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json())
    print(args.out)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    pair, loaded = _first_pair(args.pair)
    icp_cfg = icp_profile(loaded.profile)
    w = args.w or (AttackConfig().w if loaded.profile == "shapenet" else (1.0,) * 6)
    report = finite_difference_check(
        pair.scan,
        pair.map,
        GradientConfig(unroll_iterations=args.unroll, icp=icp_cfg),
        pair.ground_truth,
        w,
        args.samples,
        seed=args.seed,
        tolerance=args.tolerance,
    )
    print(json.dumps(report.to_dict(), indent=2))
    if not report.passed:
        print(f"gradient check failed: {report.pass_fraction:.1%} of probes within tolerance", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _add_attack_options(p, with_w: bool = True) -> None:
    defaults = AttackConfig()
    p.add_argument("--alpha", type=float, default=defaults.alpha)
    p.add_argument("--beta", type=float, default=defaults.beta)
    p.add_argument("--steps", type=int, default=defaults.steps)
    if with_w:
        p.add_argument("--w", type=_weights, default=None, help="six comma-separated loss weights")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icp-attack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic pairs and a manifest")
    p.add_argument("--kind", required=True, choices=SHAPE_KINDS + ("suite", "route"))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--profile", choices=("shapenet", "boreas"), default="shapenet")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("icp", help="align the first pair of a manifest")
    p.add_argument("--pair", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float)
    p.set_defaults(func=cmd_icp)

    p = sub.add_parser("attack", help="optimize perturbations for every pair")
    p.add_argument("--manifest", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    _add_attack_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("baseline", help="apply a heuristic perturbation to every pair")
    p.add_argument("--method", required=True, choices=("uniform", "normal"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("bench", help="benchmark table over several bounds")
    p.add_argument("--manifest", required=True, action="append")
    p.add_argument("--lambdas", required=True, type=_floats)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    _add_attack_options(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("route-map", help="attack-induced error along a route")
    p.add_argument("--manifest", required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--cap", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bin-size", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=1)
    _add_attack_options(p)
    p.set_defaults(func=cmd_route_map)

    p = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    p.add_argument("--pair", required=True)
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--unroll", type=int, default=25)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--w", type=_weights, default=None)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ManifestError, PoseValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (IcpError, SampleDropped, NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
