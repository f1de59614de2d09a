"""Command-line entry point: generate, estimate, complexity, scaling.

Exit codes: 0 success, 2 configuration error, 3 estimator stall, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .complexity import leap_plan, mixture_groups, planted_path, symbolic_leap_plan
from .config import ConfigError, ExperimentConfig, load_config, parse_groups, to_ini
from .estimator import (
    DegenerateKernelError,
    EstimatorStall,
    UnfoldConfig,
    multi_step,
    one_step,
    oracle_kernel,
    table_kernel,
)
from .models import (
    random_frame,
    read_dataset,
    read_frame,
    sample_mim,
    write_dataset,
    write_frame,
)
from .tensor_core import frame_distance

log = logging.getLogger("smim")

EXIT_OK, EXIT_CONFIG, EXIT_STALL, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def derive_seed(master: int, *key: int) -> int:
    """64-bit seed determined by (master, key...) only."""
    ss = np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def build_hash() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def environment() -> dict:
    return {"version": __version__, "build": build_hash()}


def resolve_threads(arg) -> int:
    if arg is not None:
        return max(1, int(arg))
    env = os.environ.get("SMIM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SMIM_THREADS must be an integer, got {env!r}") from None
    return 1


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return str(obj)


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
        fh.write("\n")


def _round(x, digits=12):
    # trims platform noise in the last bits of reported floats
    return [float(f"{v:.{digits}g}") for v in np.ravel(x)]


def build_kernels(cfg: ExperimentConfig, d: int):
    """Kernels and planted ranks along the population path of cfg.degrees."""
    link = cfg.link
    degrees = cfg.degrees or [link.s]
    if cfg.kernel.startswith("table:"):
        paths = cfg.kernel[len("table:"):].split(",")
        if len(paths) != len(degrees):
            raise ConfigError("field 'kernel' needs one table file per degree")
        kernels = []
        for p in paths:
            with open(p, encoding="utf-8") as fh:
                spec = json.load(fh)
            kernels.append(table_kernel(spec["edges"], spec["table"], spec.get("label_arity", 1)))
    else:
        kernels = None
    path = planted_path(link, degrees, d, cfg.n_cal, seed=derive_seed(cfg.seed, d, 102))
    out, ranks = [], []
    for step, (ell, (t, s0, coords)) in enumerate(zip(degrees, path)):
        if kernels is None:
            try:
                out.append(oracle_kernel(link, ell, d, cfg.n_cal, cfg.n_bins,
                                         seed=derive_seed(cfg.seed, d, 101, step),
                                         cond=coords if coords.shape[1] else None))
            except DegenerateKernelError as exc:
                raise EstimatorStall(f"step {step}: {exc}") from None
        ranks.append((max(t, 1), max(s0, 1)))
    if kernels is not None:
        out = kernels
    if isinstance(cfg.ranks, list):
        ranks = list(cfg.ranks)
    return degrees, out, ranks


def run_estimation(batches, degrees, kernels, ranks, cfg: ExperimentConfig, seed: int):
    adaptive = cfg.ranks == "adaptive"
    if len(degrees) == 1:
        t, s0 = ranks[0]
        res = one_step(batches[0], UnfoldConfig(degrees[0], t=t, s0=s0, tol=cfg.tol),
                       kernels[0], seed=seed, adaptive=adaptive)
        if res.rank_deficient:
            raise EstimatorStall("one-step estimate is rank deficient")
        return res.frame, [res]
    U, trace = multi_step(batches, degrees, kernels, ranks, n_rot=cfg.n_rot, seed=seed,
                          tol=cfg.tol)
    return U, trace.steps


def step_record(res) -> dict:
    return {
        "degree": res.ell,
        "rank": int(res.frame.shape[1]),
        "mhat_eigenvalues": _round(res.mhat_eigenvalues, 10),
        "p_eigenvalues": _round(res.p_eigenvalues[:10], 10),
        "iterations": res.iterations,
        "converged": res.converged,
        "wall_ms": round(res.wall_time * 1e3, 3),
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, out: Path) -> dict:
    d, n = cfg.d, cfg.n
    if not cfg.n_grid and not cfg.n_over_d:
        raise ConfigError("missing field 'n' in section [data]")
    W = random_frame(d, cfg.link.s, np.random.default_rng(derive_seed(cfg.seed, 1)))
    ds = sample_mim(cfg.link, W, n, derive_seed(cfg.seed, 2))
    ds.seed = cfg.seed
    suffix = ".smimb" if cfg.fmt == "binary" else ".smim"
    path = out / f"dataset{suffix}"
    write_dataset(path, ds, binary=cfg.fmt == "binary")
    write_frame(str(path) + ".frame", W)
    with open(str(path) + ".link.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.link.to_dict(), fh, indent=2, default=_json_default)
    return {"dataset": str(path), "frame": str(path) + ".frame", "d": d, "n": n}


def cmd_estimate(cfg: ExperimentConfig, dataset: Path, out: Path) -> dict:
    ds = read_dataset(dataset)
    if cfg.d_grid and ds.d != cfg.d:
        raise ConfigError(f"dataset has d={ds.d} but config field 'd' is {cfg.d}")
    if ds.label_arity != cfg.link.label_arity:
        raise ConfigError(f"dataset label arity {ds.label_arity} does not match the link "
                          f"({cfg.link.label_arity})")
    degrees, kernels, ranks = build_kernels(cfg, ds.d)
    batches = ds.split(len(degrees)) if len(degrees) > 1 else [ds]
    start = time.perf_counter()
    stalled = None
    try:
        U, steps = run_estimation(batches, degrees, kernels, ranks, cfg,
                                  seed=derive_seed(ds.seed, 3))
    except EstimatorStall as exc:
        stalled = exc
        steps = exc.trace.steps if exc.trace is not None else []
        U = exc.trace.frame if exc.trace is not None else np.zeros((ds.d, 0))
    report = {
        "command": "estimate",
        "environment": environment(),
        "config": cfg.to_dict(),
        "dataset": {"path": str(dataset), "d": ds.d, "n": ds.n, "seed": ds.seed,
                    "link": ds.link_hash},
        "degrees": degrees,
        "ranks": [list(r) for r in ranks],
        "steps": [step_record(s) for s in steps],
        "status": "stall" if stalled else "ok",
    }
    sidecar = Path(str(dataset) + ".frame")
    if sidecar.exists() and U.shape[1]:
        report["frame_distance"] = round(frame_distance(U, read_frame(sidecar)), 12)
    frame_path = out / "estimate.frame"
    write_frame(frame_path, U, label="ESTIMATED frame")
    report["frame_file"] = str(frame_path)
    report["wall_ms"] = round((time.perf_counter() - start) * 1e3, 3)
    write_json(out / "estimate_report.json", report)
    if stalled:
        raise EstimatorStall(str(stalled), getattr(stalled, "trace", None))
    return report


def _spectrum_record(spec) -> list:
    rows = []
    for ell, e in sorted(spec.entries.items()):
        rows.append({"degree": ell, "xi_norm_sq": round(e.xi_norm_sq, 10),
                     "std_error": round(e.std_error, 10),
                     "eigenvalues": _round(e.eigenvalues[:6], 8),
                     "r": e.r, "t": e.t, "s0": e.s0})
    return rows


def cmd_complexity(cfg: ExperimentConfig, out: Path) -> dict:
    modes = ["sample", "query"] if cfg.mode == "both" else [cfg.mode]
    plans = {}
    warnings = []
    if cfg.symbolic:
        groups = mixture_groups(cfg.q) if cfg.symbolic == "mixture" else \
            parse_groups(cfg.symbolic[len("groups:"):])
        for mode in modes:
            plans[mode] = symbolic_leap_plan(groups, mode)
    else:
        for mode in modes:
            plans[mode] = leap_plan(cfg.link, cfg.d, cfg.max_ell, mode, cfg.n_mc,
                                    seed=derive_seed(cfg.seed, 4))
            for spec in plans[mode].spectra:
                for e in spec.entries.values():
                    if e.std_error > 0.05:
                        warnings.append(f"degree {e.ell}: standard error {e.std_error:.3g} "
                                        "is large; increase n_mc")
    report = {"command": "complexity", "environment": environment(), "config": cfg.to_dict(),
              "symbolic": bool(cfg.symbolic), "plans": {}}
    lines = []
    for mode, plan in plans.items():
        verdict = "finite" if plan.complete else "infinite leap"
        steps = [{"degree": st.ell, "cost_exponent": _fmt_exp(st.exponent),
                  "rank_increment": st.increment} for st in plan.steps]
        entry = {"degrees": plan.degrees, "steps": steps,
                 "total_exponent": _fmt_exp(plan.total_exponent), "verdict": verdict,
                 "log_factor": plan.log_factor}
        if not cfg.symbolic:
            entry["spectra"] = [_spectrum_record(sp) for sp in plan.spectra]
        report["plans"][mode] = entry
        total = "inf" if plan.total_exponent is None else str(_fmt_exp(plan.total_exponent))
        lines.append(f"{mode:<7} degrees={plan.degrees} exponent={total}"
                     f"{' (x log)' if plan.log_factor and plan.complete else ''} [{verdict}]")
    report["warnings"] = sorted(set(warnings))
    write_json(out / "complexity_report.json", report)
    table = "mode    plan\n" + "\n".join(lines) + "\n"
    (out / "complexity.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    for w in report["warnings"]:
        log.warning(w)
    return report


def _fmt_exp(x):
    if x is None:
        return None
    if hasattr(x, "denominator"):
        return str(x) if x.denominator != 1 else int(x)
    return round(float(x), 6)


def scaling_trial(cfg: ExperimentConfig, d: int, n: int, trial: int, degrees, kernels, ranks):
    seed = derive_seed(cfg.seed, d, n, trial)
    W = random_frame(d, cfg.link.s, np.random.default_rng(derive_seed(seed, 0)))
    batches = [sample_mim(cfg.link, W, n, derive_seed(seed, 1, k)) for k in range(len(degrees))]
    start = time.perf_counter()
    try:
        U, steps = run_estimation(batches, degrees, kernels, ranks, cfg, seed=derive_seed(seed, 2))
        dist = frame_distance(U, W)
        iters = sum(s.iterations for s in steps)
        top = _round(steps[-1].mhat_eigenvalues[:4], 10)
    except EstimatorStall:
        dist, iters, top = 1.0, 0, []
    return {"d": d, "n": n, "trial": trial, "seed": seed, "frame_distance": round(dist, 12),
            "iterations": iters, "eigen_profile": top,
            "wall_ms": round((time.perf_counter() - start) * 1e3, 3)}


SCALING_FIELDS = ["d", "n", "trials", "success_rate", "median_distance", "median_wall_ms"]


def cmd_scaling(cfg: ExperimentConfig, out: Path, threads: int) -> dict:
    if not cfg.n_grid and not cfg.n_over_d:
        raise ConfigError("empty n grid: set 'n_grid' or 'n_over_d' in section [data]")
    csv_path = out / "scaling.csv"
    previous = []
    if cfg.resume and csv_path.exists():
        with open(csv_path, encoding="utf-8") as fh:
            previous = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    done = {(int(row["d"]), int(row["n"])) for row in previous}
    rows, records, aggregates = [], [], []
    start = time.perf_counter()
    incomplete = None
    for d in cfg.d_grid:
        degrees, kernels, ranks = build_kernels(cfg, d)
        for n in cfg.n_values(d):
            if (d, n) in done:
                continue
            if cfg.budget_s and time.perf_counter() - start > cfg.budget_s:
                incomplete = (d, n)
                break
            with ThreadPoolExecutor(max_workers=threads) as pool:
                recs = list(pool.map(lambda t: scaling_trial(cfg, d, n, t, degrees, kernels, ranks),
                                     range(cfg.trials)))
            dists = np.array([r["frame_distance"] for r in recs])
            row = {"d": d, "n": n, "trials": cfg.trials,
                   "success_rate": round(float(np.mean(dists <= cfg.threshold)), 6),
                   "median_distance": round(float(np.median(dists)), 6),
                   "median_wall_ms": round(float(np.median([r["wall_ms"] for r in recs])), 3)}
            rows.append(row)
            records.extend(recs)
            q1, q3 = np.quantile(dists, [0.25, 0.75])
            aggregates.append({"d": d, "n": n, "median": round(float(np.median(dists)), 12),
                               "q1": round(float(q1), 12), "q3": round(float(q3), 12),
                               "success_rate": row["success_rate"]})
        if incomplete:
            break
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=SCALING_FIELDS)
        writer.writeheader()
        writer.writerows(previous + rows)
        if incomplete:
            fh.write(f"# incomplete: budget exceeded, resume from d={incomplete[0]} n={incomplete[1]}\n")
    report = {"command": "scaling", "environment": environment(), "config": cfg.to_dict(),
              "threshold": cfg.threshold, "trials": records, "aggregates": aggregates,
              "complete": incomplete is None}
    write_json(out / "scaling_report.json", report)
    return report


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _add_globals(p, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", help="experiment config file (key=value sections)", **kw)
    p.add_argument("--seed", type=int, help="master seed (overrides the config)", **kw)
    p.add_argument("--threads", type=int, help="worker threads (fallback: SMIM_THREADS)", **kw)
    p.add_argument("--out", help="output directory", **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smim", description=__doc__.splitlines()[0])
    _add_globals(parser, False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("generate", "sample a dataset and its planted frame"),
                        ("estimate", "recover the hidden subspace from a dataset"),
                        ("complexity", "plan harmonic degrees from Monte Carlo spectra"),
                        ("scaling", "success rate over a (d, n) grid")):
        sp = sub.add_parser(name, help=help_)
        _add_globals(sp, True)
        if name == "estimate":
            sp.add_argument("dataset", help="SMIM dataset file")
        if name == "complexity":
            sp.add_argument("--symbolic", help="'mixture' or 'groups:<lo-hi:exp;...>'",
                            default=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if not args.config:
            raise ConfigError("missing --config")
        overrides = {"seed": args.seed}
        if getattr(args, "symbolic", None):
            overrides["symbolic"] = args.symbolic
        cfg = load_config(args.config, overrides)
        threads = resolve_threads(args.threads)
        out = Path(args.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.ini").write_text(to_ini(cfg), encoding="utf-8")
        if args.command == "generate":
            cmd_generate(cfg, out)
        elif args.command == "estimate":
            cmd_estimate(cfg, Path(args.dataset), out)
        elif args.command == "complexity":
            cmd_complexity(cfg, out)
        else:
            cmd_scaling(cfg, out, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimatorStall as exc:
        print(f"estimator stall: {exc}", file=sys.stderr)
        return EXIT_STALL
    except (OSError, ValueError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
