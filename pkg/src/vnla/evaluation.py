"""Metrics, multi-seed aggregation and the request-timing / per-label analyses."""
from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from vnla.env import geodesic_distance
from vnla.training import (
    EpisodeSettings,
    _chunks,
    run_episode,
)
from vnla import policy as P

SUCCESS_RADIUS = 2.0
CI_Z = 1.96
NUM_BINS = 10


def nav_error_detail(trace, dp, env, cap: float = 100.0) -> tuple[float, bool]:
    """``(error, unreachable)``; unreachable endpoints report ``cap``."""
    d = geodesic_distance(env, trace.final_viewpoint, dp.goals)
    if math.isinf(d):
        return cap, True
    return d, False


def nav_error(trace, dp, env, cap: float = 100.0) -> float:
    return nav_error_detail(trace, dp, env, cap)[0]


def is_success(trace, dp, env, d: float = SUCCESS_RADIUS, require_explicit_stop: bool = False) -> bool:
    if require_explicit_stop and not trace.stopped:
        return False
    return geodesic_distance(env, trace.final_viewpoint, dp.goals) <= d


def is_room_success(trace, dp, env) -> bool | None:
    """None for data points without a room label (excluded from the metric)."""
    if dp.room_label is None:
        return None
    room = env.rooms[env.room_of[trace.final_viewpoint]]
    return room.label == dp.room_label


def success_rate(traces, points, envs, d: float = SUCCESS_RADIUS) -> float:
    if not traces:
        return 0.0
    return sum(is_success(t, dp, envs[dp.env_id], d) for t, dp in zip(traces, points)) / len(traces)


def mean_ci(values) -> tuple[float, float]:
    values = [float(v) for v in values]
    mean = sum(values) / len(values)
    if len(values) < 2:
        return mean, 0.0
    sd = float(np.std(values, ddof=1))
    return mean, CI_Z * sd / math.sqrt(len(values))


@dataclass
class MetricsReport:
    success_rate: tuple[float, float]
    room_success_rate: tuple[float, float] | None
    mean_nav_error: tuple[float, float]
    per_seed: dict
    seeds: list
    num_points: int
    num_room_points: int
    mean_requests: float
    unreachable_endpoints: int = 0
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


_EVAL: dict = {}


def _eval_chunk(task):
    arrays, items, args = task
    w = _EVAL
    params = P.ModelParams(w["policy_cfg"], arrays)
    out = []
    for i, seed_key in items:
        dp = w["points"][i]
        trace, _, _ = run_episode(
            dp, w["envs"][dp.env_id], params, w["vocab"], "eval", args["ask_kind"],
            args["advisor_mode"], np.random.default_rng(seed_key), w["settings"],
            budget_stats=w["budget_stats"],
        )
        trace.datapoint = i
        out.append(trace)
    return out


def run_split(points, envs, params: P.ModelParams, vocab, ask_kind, advisor_mode, seed: int,
              settings: EpisodeSettings, budget_stats: dict, workers: int = 1) -> list:
    """Evaluation episodes for every point; episode i uses the rng stream (seed, i)."""
    _EVAL.clear()
    _EVAL.update({"policy_cfg": params.cfg, "points": list(points), "envs": envs,
                  "vocab": vocab, "settings": settings, "budget_stats": budget_stats})
    items = [(i, [seed, i]) for i in range(len(points))]
    args = {"ask_kind": ask_kind, "advisor_mode": advisor_mode}
    arrays = params.arrays()
    tasks = [(arrays, chunk, args) for chunk in _chunks(items, max(1, workers))]
    if workers > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(workers) as pool:
            chunks = pool.map(_eval_chunk, tasks)
    else:
        chunks = [_eval_chunk(t) for t in tasks]
    return [t for c in chunks for t in c]


def evaluate(params: P.ModelParams, vocab, points, envs, ask_kind, advisor_mode, seeds,
             settings: EpisodeSettings, budget_stats: dict, workers: int = 1,
             d: float = SUCCESS_RADIUS, require_explicit_stop: bool = False,
             nav_error_cap: float = 100.0) -> tuple[MetricsReport, dict]:
    """Metrics over ``seeds``; returns the report and the traces keyed by seed."""
    if not points:
        raise ValueError("cannot evaluate an empty split")
    seeds = list(seeds)
    per_seed = {"success_rate": [], "room_success_rate": [], "mean_nav_error": []}
    traces_by_seed = {}
    n_room = 0
    unreachable = 0
    requests = []
    for seed in seeds:
        traces = run_split(points, envs, params, vocab, ask_kind, advisor_mode, seed,
                           settings, budget_stats, workers)
        traces_by_seed[seed] = traces
        succ, room, err = [], [], []
        for tr, dp in zip(traces, points):
            env = envs[dp.env_id]
            succ.append(is_success(tr, dp, env, d, require_explicit_stop))
            r = is_room_success(tr, dp, env)
            if r is not None:
                room.append(r)
            e, flag = nav_error_detail(tr, dp, env, nav_error_cap)
            err.append(e)
            unreachable += flag
            requests.append(len(tr.requests))
        n_room = len(room)
        per_seed["success_rate"].append(sum(succ) / len(succ))
        per_seed["room_success_rate"].append(sum(room) / len(room) if room else None)
        per_seed["mean_nav_error"].append(sum(err) / len(err))
    room_vals = [v for v in per_seed["room_success_rate"] if v is not None]
    report = MetricsReport(
        success_rate=mean_ci(per_seed["success_rate"]),
        room_success_rate=mean_ci(room_vals) if room_vals else None,
        mean_nav_error=mean_ci(per_seed["mean_nav_error"]),
        per_seed=per_seed,
        seeds=seeds,
        num_points=len(points),
        num_room_points=n_room,
        mean_requests=sum(requests) / len(requests),
        unreachable_endpoints=unreachable,
        meta={"ask_kind": str(getattr(ask_kind, "value", ask_kind)),
              "advisor_mode": str(getattr(advisor_mode, "value", advisor_mode)),
              "success_radius": d},
    )
    return report, traces_by_seed


# -- analyses ---------------------------------------------------------------


def _get(trace, name):
    return trace[name] if isinstance(trace, dict) else getattr(trace, name)


def _request_steps(trace):
    steps = _get(trace, "steps")
    return [(_get(s, "t")) for s in steps if _get(s, "granted")]


def analyze_requests(traces, bins: int = NUM_BINS) -> list[float]:
    """Fraction of granted requests per normalized-time bin, (t - 1) / T_hat."""
    counts = [0] * bins
    for tr in traces:
        T_hat = _get(tr, "T_hat")
        for t in _request_steps(tr):
            counts[min(int(bins * (t - 1) / T_hat), bins - 1)] += 1
    total = sum(counts)
    if total == 0:
        return [0.0] * bins
    return [c / total for c in counts]


def analyze_by_label(traces, points, envs, threshold: int = 10, d: float = SUCCESS_RADIUS) -> dict:
    """Success tables grouped by object and by room label, best first."""
    groups = {"objects": defaultdict(list), "rooms": defaultdict(list)}
    for tr, dp in zip(traces, points):
        final = _get(tr, "final_viewpoint")
        ok = geodesic_distance(envs[dp.env_id], final, dp.goals) <= d
        groups["objects"][dp.object_label].append(ok)
        if dp.room_label is not None:
            groups["rooms"][dp.room_label].append(ok)
    out = {}
    for name, g in groups.items():
        rows = [(label, len(v), sum(v) / len(v)) for label, v in g.items() if len(v) > threshold]
        rows.sort(key=lambda r: (-r[2], -r[1], r[0]))
        out[name] = [{"label": lab, "count": n, "success_rate": s} for lab, n, s in rows]
    return out


def histogram_to_csv(hist) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_start", "bin_end", "fraction"])
    n = len(hist)
    for i, frac in enumerate(hist):
        w.writerow([repr(i / n), repr((i + 1) / n), repr(float(frac))])
    return buf.getvalue()


def histogram_from_csv(text: str) -> list[float]:
    rows = list(csv.reader(io.StringIO(text)))
    return [float(r[2]) for r in rows[1:]]


def format_report(reports: dict) -> str:
    """Aligned plain-text table; ``reports`` maps a row name to a MetricsReport."""
    header = ("agent", "success %", "room success %", "nav error (m)", "requests")
    rows = [header]
    for name, r in reports.items():
        s = f"{100 * r.success_rate[0]:.2f} ± {100 * r.success_rate[1]:.2f}"
        if r.room_success_rate is None:
            rs = "n/a"
        else:
            rs = f"{100 * r.room_success_rate[0]:.2f} ± {100 * r.room_success_rate[1]:.2f}"
        e = f"{r.mean_nav_error[0]:.2f} ± {r.mean_nav_error[1]:.2f}"
        rows.append((name, s, rs, e, f"{r.mean_requests:.2f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
