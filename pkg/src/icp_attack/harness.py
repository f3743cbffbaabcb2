"""Benchmark tables and route vulnerability maps.

Work is split per pair and fanned out over an optional process pool. Every
per-pair result is keyed by pair id and reduced in id order, so the output
does not depend on the number of workers.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .attack import (
    AttackConfig,
    PerturbationResult,
    SampleDropped,
    baseline_normal,
    baseline_uniform,
    evaluate_perturbation,
    optimize_perturbation,
)
from .data import LocalizationPair
from .geometry import PoseError, pose_error
from .icp import IcpError, MapModel, run_icp

log = logging.getLogger(__name__)

METHODS = ("original", "uniform", "normal", "attack")
DEFAULT_QUANTILE = 0.997


def planar_translation_error(err: PoseError) -> float:
    """Lateral/longitudinal translation error; z is ignored."""
    return float(np.hypot(err.rho[0], err.rho[1]))


def compute_allowance(results: Iterable, quantile: float = DEFAULT_QUANTILE) -> float:
    """Quantile of per-point overshoots ``max(|d| - lam, 0)`` pooled over results.

    ``results`` holds :class:`PerturbationResult` objects or raw overshoot
    arrays.
    """
    if not 0.0 < quantile <= 1.0:
        raise ValueError("quantile must lie in (0, 1]")
    chunks = [
        r.overshoots if isinstance(r, PerturbationResult) else np.asarray(r, dtype=float).ravel()
        for r in results
    ]
    if not chunks:
        raise ValueError("no attack results to pool")
    return float(np.quantile(np.concatenate(chunks), quantile))


# --- per-pair work (module level so worker processes can unpickle it) ---------


@dataclass(frozen=True)
class _Outcome:
    """Planar error of one method on one pair, or why it is missing."""

    error: float | None
    converged: bool

    @property
    def usable(self) -> bool:
        return self.converged and self.error is not None


def _outcome(err: PoseError | None, converged: bool | None) -> _Outcome:
    return _Outcome(None if err is None else planar_translation_error(err), bool(converged))


def _attack_task(args) -> dict:
    pair, lambdas, config = args
    mm = MapModel(pair.map)
    try:
        base = run_icp(pair.scan, mm, config.eval_icp)
    except IcpError:
        base = None
    if base is None or not base.converged:
        return {"original": _Outcome(None, False), "attack": {}}
    original = _outcome(pose_error(base.estimate, pair.ground_truth), True)
    attacks = {}
    for lam in lambdas:
        try:
            res = optimize_perturbation(pair, replace(config, lam=lam), mm)
        except (SampleDropped, IcpError) as exc:
            log.debug("%s at lambda=%g: %s", pair.id, lam, exc)
            attacks[lam] = (_Outcome(None, False), np.zeros(0))
            continue
        attacks[lam] = (_outcome(res.pose_error_after, res.converged_after), res.overshoots)
    return {"original": original, "attack": attacks}


def _baseline_task(args) -> dict:
    pair, bounds, seeds, config = args
    mm = MapModel(pair.map)
    out = {}
    for lam, bound in bounds.items():
        uni = evaluate_perturbation(baseline_uniform(pair.scan, bound, seeds[lam]), pair, config.eval_icp, mm)
        nrm = evaluate_perturbation(baseline_normal(pair.scan, bound), pair, config.eval_icp, mm)
        out[lam] = {
            "uniform": _outcome(uni.pose_error_after, uni.converged_after),
            "normal": _outcome(nrm.pose_error_after, nrm.converged_after),
        }
    return out


def _map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=1))


def _pair_seed(root: int, index: int, lam_index: int) -> int:
    return int(np.random.SeedSequence([root, index, lam_index]).generate_state(1)[0])


# --- benchmark ----------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkRow:
    method: str
    lam: float
    mean_error: float | None
    std_error: float | None
    pct_attack_larger: float | None  # None on the attack row
    samples_used: int
    samples_dropped: int

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "lambda": self.lam,
            "mean_error": self.mean_error,
            "std_error": self.std_error,
            "pct_attack_larger": self.pct_attack_larger,
            "samples_used": self.samples_used,
            "samples_dropped": self.samples_dropped,
        }


CSV_COLUMNS = (
    "lambda", "method", "mean_error", "std_error", "pct_attack_larger",
    "samples_used", "samples_dropped", "allowance",
)


@dataclass
class BenchmarkTable:
    rows: list[BenchmarkRow]
    allowances: dict[float, float]
    # lambda -> pair id -> method -> planar error, usable pairs only
    errors: dict[float, dict[str, dict[str, float]]]
    dropped: dict[float, list[str]]
    seed: int
    config: dict = field(default_factory=dict)
    breakdown: dict[str, "BenchmarkTable"] = field(default_factory=dict)

    def subset(self, ids) -> BenchmarkTable:
        """Rows recomputed over a subset of pairs; allowances are kept."""
        ids = set(ids)
        errors = {lam: {p: e for p, e in per.items() if p in ids} for lam, per in self.errors.items()}
        dropped = {lam: [p for p in lost if p in ids] for lam, lost in self.dropped.items()}
        return BenchmarkTable(
            _summarize(errors, dropped), dict(self.allowances), errors, dropped, self.seed, self.config
        )

    def row(self, method: str, lam: float) -> BenchmarkRow:
        for r in self.rows:
            if r.method == method and r.lam == lam:
                return r
        raise KeyError((method, lam))

    def mean(self, method: str, lam: float) -> float | None:
        return self.row(method, lam).mean_error

    def fraction_attack_beats_all(self, lam: float) -> float:
        """Share of usable pairs where the attack exceeds both baselines."""
        per = self.errors[lam]
        if not per:
            return 0.0
        wins = [e["attack"] > max(e["uniform"], e["normal"]) for e in per.values()]
        return float(np.mean(wins))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "allowances": {repr(k): v for k, v in self.allowances.items()},
            "rows": [r.to_dict() for r in self.rows],
            "dropped": {repr(k): v for k, v in self.dropped.items()},
            "per_pair": {
                repr(lam): {pid: per[pid] for pid in sorted(per)} for lam, per in self.errors.items()
            },
            "breakdown": {
                name: [r.to_dict() for r in sub.rows] for name, sub in sorted(self.breakdown.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([
                r.lam, r.method, _fmt(r.mean_error), _fmt(r.std_error),
                _fmt(r.pct_attack_larger), r.samples_used, r.samples_dropped,
                _fmt(self.allowances.get(r.lam)),
            ])
        return buf.getvalue()

    def write(self, json_path) -> tuple[Path, Path]:
        """Write the JSON table and a CSV next to it."""
        json_path = Path(json_path)
        json_path.parent.mkdir(parents=True, exist_ok=True)
        json_path.write_text(self.to_json())
        csv_path = json_path.with_suffix(".csv")
        csv_path.write_text(self.to_csv())
        return json_path, csv_path


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def run_benchmark(
    pairs: Sequence[LocalizationPair],
    lambdas: Sequence[float],
    attack_config: AttackConfig | None = None,
    seed: int = 0,
    workers: int = 1,
    quantile: float = DEFAULT_QUANTILE,
) -> BenchmarkTable:
    """Original, uniform, normal and attack rows for every bound.

    Baselines run at ``lam + allowance``. A pair that fails to converge for
    any method at some bound is dropped from every row of that bound.
    """
    if not pairs:
        raise ValueError("no pairs to benchmark")
    config = attack_config or AttackConfig()
    lambdas = [float(l) for l in lambdas]
    if not lambdas or any(l < 0 for l in lambdas):
        raise ValueError("lambdas must be a non-empty list of values >= 0")
    ordered = sorted(pairs, key=lambda p: p.id)
    ids = [p.id for p in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("pair ids must be unique")

    attack_out = _map(_attack_task, [(p, lambdas, config) for p in ordered], workers)

    allowances = {}
    for lam in lambdas:
        pooled = [o["attack"][lam][1] for o in attack_out if lam in o["attack"]]
        pooled = [a for a in pooled if a.size]
        allowances[lam] = compute_allowance(pooled, quantile=quantile) if pooled else 0.0

    jobs = []
    for i, (p, o) in enumerate(zip(ordered, attack_out)):
        todo = {lam: lam + allowances[lam] for lam in lambdas if o["original"].usable}
        seeds = {lam: _pair_seed(seed, i, k) for k, lam in enumerate(lambdas)}
        jobs.append((p, todo, seeds, config))
    baseline_out = _map(_baseline_task, jobs, workers)

    errors: dict[float, dict[str, dict[str, float]]] = {}
    dropped: dict[float, list[str]] = {}
    for lam in lambdas:
        usable, lost = {}, []
        for pid, a, b in zip(ids, attack_out, baseline_out):
            outs = {"original": a["original"]}
            if lam in a["attack"]:
                outs["attack"] = a["attack"][lam][0]
            outs.update(b.get(lam, {}))
            if len(outs) == len(METHODS) and all(v.usable for v in outs.values()):
                usable[pid] = {m: outs[m].error for m in METHODS}
            else:
                lost.append(pid)
        if not usable:
            raise RuntimeError(f"every sample was dropped at lambda={lam}")
        errors[lam], dropped[lam] = usable, lost
    config_doc = {**config.to_dict(), "quantile": quantile}
    return BenchmarkTable(_summarize(errors, dropped), allowances, errors, dropped, seed, config_doc)


def _summarize(errors, dropped) -> list[BenchmarkRow]:
    rows = []
    for lam, usable in errors.items():
        n_drop = len(dropped[lam])
        if not usable:
            rows += [BenchmarkRow(m, lam, None, None, None, 0, n_drop) for m in METHODS]
            continue
        attack = np.array([e["attack"] for e in usable.values()])
        for method in METHODS:
            vals = np.array([e[method] for e in usable.values()])
            pct = None if method == "attack" else float(np.mean(attack > vals))
            rows.append(
                BenchmarkRow(method, lam, float(vals.mean()), float(vals.std()), pct, len(usable), n_drop)
            )
    return rows


# --- route map ----------------------------------------------------------------


def snap_to_polyline(points, polyline) -> tuple[np.ndarray, np.ndarray]:
    """Arc length and foot point of each point's nearest spot on a polyline."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    poly = np.atleast_2d(np.asarray(polyline, dtype=float))
    if len(poly) == 1:
        return np.zeros(len(pts)), np.repeat(poly, len(pts), axis=0)
    a, b = poly[:-1], poly[1:]
    seg = b - a
    seg_len = np.linalg.norm(seg, axis=1)
    start = np.concatenate([[0.0], np.cumsum(seg_len)[:-1]])
    rel = pts[:, None, :] - a[None]
    denom = np.where(seg_len > 0, seg_len**2, 1.0)
    t = np.clip(np.einsum("psk,sk->ps", rel, seg) / denom, 0.0, 1.0)
    foot = a[None] + t[..., None] * seg[None]
    d = np.linalg.norm(pts[:, None, :] - foot, axis=2)
    best = np.argmin(d, axis=1)  # first segment wins ties
    rows = np.arange(len(pts))
    s = start[best] + t[rows, best] * seg_len[best]
    return s, foot[rows, best]


@dataclass(frozen=True)
class RouteEntry:
    location: tuple[float, float]
    worst_error: float  # capped value for display
    raw_error: float
    cap_applied: bool
    bin: int
    samples: int
    pair_ids: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "location": list(self.location),
            "worst_error": self.worst_error,
            "raw_error": self.raw_error,
            "cap_applied": self.cap_applied,
            "bin": self.bin,
            "samples": self.samples,
            "pair_ids": list(self.pair_ids),
        }


@dataclass
class RouteReport:
    entries: list[RouteEntry]
    cap: float
    bin_size: float
    dropped: list[str] = field(default_factory=list)

    def raw_errors(self) -> np.ndarray:
        return np.array([e.raw_error for e in self.entries])

    def to_dict(self) -> dict:
        return {
            "cap": self.cap,
            "bin_size": self.bin_size,
            "entries": [e.to_dict() for e in self.entries],
            "dropped": self.dropped,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _route_task(args) -> _Outcome:
    pair, config = args
    try:
        res = optimize_perturbation(pair, config)
    except (SampleDropped, IcpError) as exc:
        log.debug("%s: %s", pair.id, exc)
        return _Outcome(None, False)
    return _outcome(res.pose_error_after, res.converged_after)


def route_map(
    pairs: Sequence[LocalizationPair],
    attack_config: AttackConfig,
    cap: float,
    polyline=None,
    bin_size: float = 1.0,
    workers: int = 1,
) -> RouteReport:
    """Mean attack-induced planar error per route bin.

    Pair locations are snapped onto ``polyline`` and binned by arc length.
    Without a polyline, the route runs through the pair locations in id
    order.
    """
    if cap <= 0 or bin_size <= 0:
        raise ValueError("cap and bin_size must be positive")
    ordered = sorted(pairs, key=lambda p: p.id)
    missing = [p.id for p in ordered if p.location is None]
    if missing:
        raise ValueError(f"pairs without a location: {missing[:5]}")
    if not ordered:
        return RouteReport([], cap, bin_size)
    locs = np.array([p.location for p in ordered], dtype=float)
    if polyline is None:
        keep = np.r_[True, np.any(np.diff(locs, axis=0) != 0, axis=1)]
        polyline = locs[keep]
    s, foot = snap_to_polyline(locs, polyline)
    bins = np.floor(s / bin_size).astype(int)

    outcomes = _map(_route_task, [(p, attack_config) for p in ordered], workers)
    dropped = [p.id for p, o in zip(ordered, outcomes) if not o.usable]

    entries = []
    for b in np.unique(bins):
        members = [i for i in np.flatnonzero(bins == b) if outcomes[i].usable]
        if not members:
            continue
        raw = float(np.mean([outcomes[i].error for i in members]))
        where = foot[members].mean(axis=0)
        entries.append(
            RouteEntry(
                (float(where[0]), float(where[1])),
                min(raw, cap),
                raw,
                raw > cap,
                int(b),
                len(members),
                tuple(ordered[i].id for i in members),
            )
        )
    return RouteReport(entries, cap, bin_size, dropped)
