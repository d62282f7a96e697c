"""Monte Carlo experiment driver: trials, threshold sweeps, reports.

Reproducibility contract: the pilot matrix comes from the (seed, PILOTS)
substream, trial i's scenario and noise from (seed, SCENARIO/NOISE, i), so
every per-trial row depends only on (config, seed, i) regardless of how
many workers run the trials.  The runtime_ms column in trials.csv is a
deterministic work proxy (counted complex-multiply units / 1e6) so output
files are bit-identical across runs and thread counts; measured wall-clock
lives in summary.json and in the complexity report.
"""

import concurrent.futures
import csv
import json
import math
import os
import time

import numpy as np

from . import baseline_amp, fpamp, freeprob, metrics, oamp, opcount
from . import rng as rngmod
from . import sysmodel
from .config import format_config, full_scale_profile
from .errors import SweepSpecError

ALGOS = ("amp", "oamp", "fpamp")

_RUNNERS = {
    "amp": baseline_amp.run_amp,
    "oamp": oamp.run_oamp,
    "fpamp": fpamp.run_fpamp,
}

CSV_HEADER = ["trial", "algo", "theta", "p_md", "p_fa", "delay_err",
              "nmse_db", "iters", "runtime_ms"]


def prepare_pilots(config):
    base = sysmodel.gen_pilots(config, rngmod.substream(config.seed, rngmod.PILOTS))
    return sysmodel.expand_pilots(base, config.max_delay)


EIG_FEASIBLE_ROWS = 2000


def prepare_profile(config, pilots):
    """Spectral profile shared by every fpamp run under this config.

    The probe estimator keeps the receiver matrix-free at scale, but its
    moment noise is amplified by the cancellations in the cumulant
    recursion; whenever the dense spectrum is affordable it is the better
    source of the same quantities.
    """
    if config.frame_len <= EIG_FEASIBLE_ROWS:
        return freeprob.spectral_profile(pilots.expanded,
                                         2 * config.max_iters + 4, method="eig")
    return freeprob.spectral_profile(
        pilots.expanded, 2 * config.max_iters + 4,
        rng=rngmod.substream(config.seed, rngmod.PROBES))


def run_single_trial(config, pilots, trial, algos, profile=None, distances=None,
                     trace=None):
    """One scenario, every requested receiver on the same realization."""
    scen = sysmodel.gen_scenario(
        config, rngmod.substream(config.seed, rngmod.SCENARIO, trial), distances)
    sig = sysmodel.synthesize(
        scen, pilots, config, rngmod.substream(config.seed, rngmod.NOISE, trial))
    record = {"trial": trial, "truth_activity": scen.activity,
              "truth_delays": scen.delays, "algos": {}}
    for algo in algos:
        counter = opcount.MultiplyCounter()
        kwargs = {"counter": counter}
        if algo == "fpamp":
            kwargs["profile"] = profile
            if trace is not None:
                kwargs["trace"] = trace
        t0 = time.perf_counter()
        out = _RUNNERS[algo](sig.Y, pilots, config, scen.pathloss, **kwargs)
        wall_ms = (time.perf_counter() - t0) * 1e3
        m = metrics.compute_metrics(scen, out,
                                    runtime_ms=counter.complex_units / 1e6)
        record["algos"][algo] = {"metrics": m, "omega": out.omega,
                                 "diverged": out.diverged, "wall_ms": wall_ms}
    return record


def run_trials(config, algos, n_trials, jobs=1, pilots=None, profile=None,
               trace=None):
    """All trials, deterministically ordered by trial index."""
    pilots = pilots if pilots is not None else prepare_pilots(config)
    if profile is None and "fpamp" in algos:
        profile = prepare_profile(config, pilots)
    distances = None
    if config.fixed_distances:
        distances = sysmodel.draw_distances(
            config, rngmod.substream(config.seed, rngmod.SCENARIO))

    def _one(trial):
        return run_single_trial(config, pilots, trial, algos, profile, distances,
                                trace if trial == 0 else None)

    if jobs <= 1:
        return [_one(t) for t in range(n_trials)]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_one, range(n_trials)))


def roc_sweep(algo, config, theta_grid, n_trials, jobs=1, records=None):
    """Missed-detection / false-alarm trade-off over the threshold grid.

    Decisions are re-thresholded from each trial's stored sparsity ratios;
    the receivers run once per trial.  Returns a dict with the averaged
    curve and the per-trial rate matrices (trials x thetas).
    """
    theta_grid = list(theta_grid)
    if any(not 0.0 < th < 1.0 for th in theta_grid) or \
            sorted(theta_grid) != theta_grid:
        raise SweepSpecError("theta grid must be sorted and inside (0, 1)")
    if records is None:
        records = run_trials(config, [algo], n_trials, jobs=jobs)
    p_md = np.zeros((len(records), len(theta_grid)))
    p_fa = np.zeros_like(p_md)
    for ti, rec in enumerate(records):
        omega = rec["algos"][algo]["omega"]
        for gi, theta in enumerate(theta_grid):
            m = metrics.rethreshold_metrics(rec["truth_activity"],
                                            rec["truth_delays"], omega, theta)
            p_md[ti, gi] = m.p_md
            p_fa[ti, gi] = m.p_fa
    return {"algo": algo, "theta": theta_grid,
            "p_md": p_md.mean(axis=0), "p_fa": p_fa.mean(axis=0),
            "p_md_trials": p_md, "p_fa_trials": p_fa}


def operating_point(curve, target_fa=0.1):
    """Interpolate the averaged curve to a target false-alarm rate.

    Returns (p_md at target, theta index whose mean p_fa is closest); the
    p_md value is linearly interpolated in p_fa between neighbours.
    """
    fa = np.asarray(curve["p_fa"])
    md = np.asarray(curve["p_md"])
    order = np.argsort(fa)
    fa_s, md_s = fa[order], md[order]
    p_md = float(np.interp(target_fa, fa_s, md_s))
    idx = int(np.argmin(np.abs(fa - target_fa)))
    return p_md, idx


# Sweep specifications ----------------------------------------------------

_SWEEP_KEYS = {"K": "n_active", "n_active": "n_active",
               "tx_power": "tx_power", "T": "max_delay",
               "max_delay": "max_delay", "theta": "theta",
               "threshold": "theta"}


def parse_sweep(spec):
    """Parse 'name=v1,v2,...' into (field, values); raises SweepSpecError."""
    if "=" not in spec:
        raise SweepSpecError(f"sweep spec {spec!r} must look like name=v1,v2,...")
    name, _, rest = spec.partition("=")
    name = name.strip()
    if name not in _SWEEP_KEYS:
        raise SweepSpecError(
            f"unknown sweep parameter {name!r}; choose from {sorted(set(_SWEEP_KEYS))}")
    field = _SWEEP_KEYS[name]
    try:
        values = [float(v) if field in ("tx_power", "theta") else int(v)
                  for v in rest.split(",") if v.strip()]
    except ValueError as exc:
        raise SweepSpecError(f"bad sweep values in {spec!r}: {exc}") from exc
    if not values:
        raise SweepSpecError(f"sweep spec {spec!r} has no values")
    if field == "theta":
        values = sorted(values)
        if any(not 0.0 < v < 1.0 for v in values):
            raise SweepSpecError("theta sweep values must lie in (0, 1)")
    return field, values


# Report writing ----------------------------------------------------------

def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_trials_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def aggregate_rows(rows):
    """Per-algo means recomputable exactly from the CSV rows."""
    agg = {}
    for row in rows:
        algo = row[1]
        agg.setdefault(algo, []).append(row)
    out = {}
    for algo, items in agg.items():
        cols = np.array([[float(r[3]), float(r[4]), float(r[5]), float(r[6]),
                          float(r[7]), float(r[8])] for r in items])
        nmse = cols[:, 3]
        finite = nmse[np.isfinite(nmse)]
        out[algo] = {
            "trials": len(items),
            "p_md_mean": float(np.mean(cols[:, 0])),
            "p_fa_mean": float(np.mean(cols[:, 1])),
            "delay_err_mean": float(np.mean(cols[:, 2])),
            "nmse_db_mean": float(np.mean(finite)) if len(finite) else math.nan,
            "iters_mean": float(np.mean(cols[:, 4])),
            "runtime_ms_mean": float(np.mean(cols[:, 5])),
        }
    return out


def write_trace_csv(path, trace_rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "antenna", "sigma_diag", "mu", "residual"])
        for row in trace_rows:
            sig = ";".join(repr(float(v)) for v in row["sigma_diag"])
            mu = ";".join(f"{v.real!r}{v.imag:+}j" for v in row["mu"])
            w.writerow([row["iteration"], row["antenna"], sig, mu,
                        repr(float(row["residual"]))])


def run_experiment(config, algos, n_trials, out_dir, sweep=None, jobs=1,
                   trace=False, full_scale=False):
    """Execute a (possibly swept) experiment and write the report files.

    Returns the summary dict.  Layout: trials.csv/summary.json in out_dir;
    parameter sweeps write one subdirectory per swept value plus the
    aggregate summary.json at the top.
    """
    if full_scale:
        config = full_scale_profile(config)
    algos = list(ALGOS) if algos == "all" else \
        ([algos] if isinstance(algos, str) else list(algos))
    for a in algos:
        if a not in ALGOS:
            raise SweepSpecError(f"unknown algorithm {a!r}")
    os.makedirs(out_dir, exist_ok=True)

    summary = {"config": format_config(config), "algos": algos,
               "n_trials": n_trials, "seed": config.seed, "points": []}

    if sweep is None:
        rows, wall = _experiment_point(config, algos, n_trials, out_dir, jobs, trace)
        summary["aggregates"] = aggregate_rows(rows)
        summary["measured_wall_ms_mean"] = wall
    else:
        field, values = parse_sweep(sweep) if isinstance(sweep, str) else sweep
        summary["sweep"] = {"field": field, "values": values}
        if field == "theta":
            records = run_trials(config, algos, n_trials, jobs=jobs)
            all_rows = []
            for theta in values:
                for rec in records:
                    for algo in algos:
                        entry = rec["algos"][algo]
                        m = metrics.rethreshold_metrics(
                            rec["truth_activity"], rec["truth_delays"],
                            entry["omega"], theta,
                            nmse=entry["metrics"].nmse_db,
                            runtime_ms=entry["metrics"].runtime_ms,
                            iterations=entry["metrics"].iterations)
                        all_rows.append([rec["trial"], algo, theta, m.p_md,
                                         m.p_fa, m.delay_err, m.nmse_db,
                                         m.iterations, m.runtime_ms])
            write_trials_csv(os.path.join(out_dir, "trials.csv"), all_rows)
            summary["points"] = [{"theta": th,
                                  "aggregates": aggregate_rows(
                                      [r for r in all_rows if r[2] == th])}
                                 for th in values]
        else:
            for value in values:
                sub = config.replace(**{field: type(getattr(config, field))(value)})
                sub_dir = os.path.join(out_dir, f"{field}={value:g}")
                os.makedirs(sub_dir, exist_ok=True)
                rows, wall = _experiment_point(sub, algos, n_trials, sub_dir,
                                               jobs, trace)
                summary["points"].append({field: value,
                                          "aggregates": aggregate_rows(rows),
                                          "measured_wall_ms_mean": wall})

    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def _experiment_point(config, algos, n_trials, out_dir, jobs, trace):
    trace_rows = [] if (trace and "fpamp" in algos) else None
    records = run_trials(config, algos, n_trials, jobs=jobs, trace=trace_rows)
    rows = []
    wall = {a: [] for a in algos}
    for rec in records:
        for algo in algos:
            entry = rec["algos"][algo]
            m = entry["metrics"]
            rows.append([rec["trial"], algo, config.threshold, m.p_md, m.p_fa,
                         m.delay_err, m.nmse_db, m.iterations, m.runtime_ms])
            wall[algo].append(entry["wall_ms"])
    write_trials_csv(os.path.join(out_dir, "trials.csv"), rows)
    if trace_rows:
        write_trace_csv(os.path.join(out_dir, "trace.csv"), trace_rows)
    return rows, {a: float(np.mean(v)) for a, v in wall.items()}


# Complexity measurement ---------------------------------------------------

def measure_complexity(config, iters=10, algos=ALGOS):
    """Instrumented multiply counts and wall-clock, against the closed forms.

    Runs each receiver for exactly `iters` iterations on one synthesized
    realization at the configured dimensions.
    """
    forced = config.replace(max_iters=iters, tol=1e-300)
    pilots = prepare_pilots(forced)
    scen = sysmodel.gen_scenario(forced, rngmod.substream(forced.seed, rngmod.SCENARIO, 0))
    sig = sysmodel.synthesize(scen, pilots, forced,
                              rngmod.substream(forced.seed, rngmod.NOISE, 0))
    profile = prepare_profile(forced, pilots)

    closed = {
        "amp": [opcount.amp_closed_form(forced)] * iters,
        "oamp": [opcount.oamp_closed_form(forced)] * iters,
        "fpamp": [opcount.fpamp_closed_form(forced, i) for i in range(1, iters + 1)],
    }
    report = {}
    for algo in algos:
        counter = opcount.MultiplyCounter()
        kwargs = {"counter": counter}
        if algo == "fpamp":
            kwargs["profile"] = profile
        t0 = time.perf_counter()
        out = _RUNNERS[algo](sig.Y, pilots, forced, scen.pathloss, **kwargs)
        wall = time.perf_counter() - t0
        counts = counter.per_iteration
        report[algo] = {
            "iterations": out.iterations,
            "counted": counts,
            "closed_form": closed[algo][:len(counts)],
            "ratio": [c / f for c, f in zip(counts, closed[algo])],
            "wall_ms_per_iteration": wall * 1e3 / max(out.iterations, 1),
        }
    return report
