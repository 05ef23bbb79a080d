"""Command-line entry point: ``sourceloc {netstats,simulate,calibrate,infer,experiment}``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    CalibrationLibrary,
    build_library,
    load_library,
    save_library,
    simulate_replicates,
    write_replicates_csv,
)
from .errors import SourceLocError
from .experiments import (
    load_experiment_config,
    place_observers,
    run_experiment,
    write_cases_csv,
    write_summary_csv,
)
from .inference import (
    fit_path_delays,
    hpd_region,
    load_prior_csv,
    path_covariance_structure,
    pinto_baseline_models,
    posterior,
    r0_prior,
    uniform_prior,
    write_hpd_csv,
    write_posterior_csv,
)
from .network import (
    gravity_matrix,
    load_distance_csv,
    load_nodes,
    local_r0_all,
    node_strength,
    pairwise_distances,
    save_nodes,
    small_world_stats,
    synthetic_nodes,
)
from .params import EpidemicParams, load_params
from .simulator import (
    first_arrival_times,
    read_arrivals_csv,
    simulate,
    write_arrivals_csv,
    write_trajectory_csv,
)

log = logging.getLogger("sourceloc")

MANIFEST = "manifest.json"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, args, inputs: dict, seed, started: datetime) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": str(args.config) if getattr(args, "config", None) else None,
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in inputs.items() if v},
        "master_seed": seed,
        "tool_version": __version__,
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _params(args) -> EpidemicParams:
    return load_params(args.config) if args.config else EpidemicParams()


def _network(args, params):
    nodes = load_nodes(args.nodes)
    dist = load_distance_csv(args.distances, nodes.N) if getattr(args, "distances", None) else pairwise_distances(nodes)
    return nodes, dist, gravity_matrix(nodes, dist, params.D)


def _ids(text):
    return [int(x) for x in text.replace(",", " ").split()] if text else None


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands --------------------------------------------------------------------

def cmd_netstats(args) -> int:
    started = datetime.now(timezone.utc)
    params = _params(args)
    nodes, dist, mob = _network(args, params)
    out = _outdir(args)
    r0 = local_r0_all(nodes, params)
    s_in, s_out = node_strength(mob, "in"), node_strength(mob, "out")
    with (out / "gravity_summary.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "population", "in_strength", "out_strength", "local_r0"])
        for i in range(nodes.N):
            w.writerow([i, int(nodes.population[i]), repr(float(s_in[i])), repr(float(s_out[i])), repr(float(r0[i]))])
    report = small_world_stats(mob, args.n_perm, args.seed)
    (out / "smallworld.txt").write_text(report.to_text(), encoding="utf-8")
    write_manifest(out, "netstats", args, {"nodes": args.nodes, "distances": args.distances, "config": args.config},
                   args.seed, started)
    return 0


def cmd_simulate(args) -> int:
    started = datetime.now(timezone.utc)
    params = _params(args)
    nodes, _, mob = _network(args, params)
    out = _outdir(args)
    observers = _ids(args.observers) or list(range(nodes.N))
    traj = simulate(args.source, nodes, mob, params, np.random.SeedSequence(args.seed))
    if not args.no_trajectory:
        write_trajectory_csv(traj, out / "trajectory.csv")
    write_arrivals_csv(first_arrival_times(traj, observers, params.arrival_threshold), out / "arrivals.csv")
    write_manifest(out, "simulate", args, {"nodes": args.nodes, "config": args.config}, args.seed, started)
    return 0


def _observers_for(args, nodes, mob):
    ids = _ids(args.observers)
    if ids:
        return ids
    return list(place_observers(args.placement, args.n_observers, nodes, mob, args.seed))


def cmd_calibrate(args) -> int:
    started = datetime.now(timezone.utc)
    params = _params(args)
    nodes, _, mob = _network(args, params)
    out = _outdir(args)
    observers = _observers_for(args, nodes, mob)
    existing = None
    if (out / "library_meta.csv").exists():
        existing = load_library(out)
    lib = build_library(nodes, mob, params, args.n_train, args.seed, observers,
                        source_set=_ids(args.sources), jobs=args.jobs, existing=existing)
    if existing is not None:
        # keep sources calibrated by earlier runs that this run did not request
        if existing.fingerprint == lib.fingerprint and existing.observers == lib.observers:
            for s, m in existing.models.items():
                lib.models.setdefault(s, m)
            for s, f in existing.failures.items():
                lib.failures.setdefault(s, f)
            lib.models = dict(sorted(lib.models.items()))
            lib.failures = dict(sorted(lib.failures.items()))
    save_library(lib, out)
    if args.keep_replicates:
        reps = {s: simulate_replicates(s, nodes, mob, params, args.seed, range(args.n_train))[:, observers]
                for s in sorted(set(lib.models) | set(lib.failures))}
        write_replicates_csv(reps, observers, out / "replicates.csv")
    for s, (u, c) in lib.failures.items():
        log.warning("source %d not calibrated: %d usable, %d censored replicates", s, u, c)
    write_manifest(out, "calibrate", args, {"nodes": args.nodes, "config": args.config}, args.seed, started)
    return 0


def _pilot_delays(nodes, mob, params, observers, seed, n_sources=10, n_reps=5):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31 + 2,)))
    sources = sorted(rng.choice(nodes.N, size=min(n_sources, nodes.N), replace=False).tolist())
    lengths, days = [], []
    for s in sources:
        L, _ = path_covariance_structure(mob, s, observers)
        X = simulate_replicates(s, nodes, mob, params, seed, range(n_reps))[:, observers]
        lengths.append(np.broadcast_to(L, X.shape))
        days.append(X)
    return fit_path_delays(np.concatenate(lengths), np.concatenate(days))


def _prior(args, nodes, params):
    if args.prior == "uniform":
        return uniform_prior(nodes.N)
    if args.prior == "r0":
        return r0_prior(nodes, params)
    if args.prior.startswith("custom:"):
        return load_prior_csv(args.prior.split(":", 1)[1], nodes.N)
    raise SourceLocError(f"unknown prior {args.prior!r}")


def cmd_infer(args) -> int:
    started = datetime.now(timezone.utc)
    params = _params(args)
    nodes, _, mob = _network(args, params)
    out = _outdir(args)
    if args.baseline == "pinto":
        if args.library:
            observers = load_library(args.library).observers
        else:
            observers = tuple(read_arrivals_csv(args.arrivals).observers)
        if args.mean_delay is not None and args.delay_var is not None:
            a, v = args.mean_delay, args.delay_var
        else:
            a, v = _pilot_delays(nodes, mob, params, list(observers), args.seed)
        lib: CalibrationLibrary = pinto_baseline_models(nodes, mob, observers, a, v)
        prior = uniform_prior(nodes.N)
    else:
        if not args.library:
            raise SourceLocError("--library is required unless --baseline pinto is given")
        lib = load_library(args.library)
        prior = _prior(args, nodes, params)
    t = read_arrivals_csv(args.arrivals, params.horizon_days)
    table = posterior(t, lib, prior, include_logdet=(args.logdet == "on"), time_mode=args.time_mode)
    region = hpd_region(table, args.alpha)
    write_posterior_csv(table, out / "posterior.csv")
    write_hpd_csv(region, table, out / "hpd.csv")
    if lib.notes:
        (out / "baseline.txt").write_text("".join(f"{k} = {v}\n" for k, v in lib.notes.items()), encoding="utf-8")
    write_manifest(out, "infer", args, {"nodes": args.nodes, "config": args.config, "arrivals": args.arrivals},
                   args.seed, started)
    return 0


def cmd_experiment(args) -> int:
    started = datetime.now(timezone.utc)
    params = _params(args)
    nodes, dist, mob = _network(args, params)
    out = _outdir(args)
    config = load_experiment_config(args.experiment)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.baseline:
        overrides["baseline"] = args.baseline
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if overrides:
        config = config.replace(**overrides)
    result = run_experiment(config, nodes, mob, params, jobs=args.jobs, dist=dist)
    for name, rep in result.reports.items():
        write_cases_csv(rep, out / ("cases.csv" if name == "proposed" else f"cases_{name}.csv"))
    r0 = local_r0_all(nodes, params)
    write_summary_csv(result.reports, r0, nodes.population, out / "summary.csv")
    write_manifest(out, "experiment", args,
                   {"nodes": args.nodes, "config": args.config, "experiment": args.experiment},
                   config.seed, started)
    return 0


def cmd_synth_nodes(args) -> int:
    nodes = synthetic_nodes(args.n, seed=args.seed, extent_km=args.extent_km)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_nodes(nodes, args.out)
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sourceloc", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--nodes", required=True, help="nodes CSV")
        sp.add_argument("--distances", help="optional i,j,km distance CSV")
        sp.add_argument("--config", help="epidemic parameter file (key = value)")
        sp.add_argument("--seed", type=int, default=seed_default)
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("netstats", help="gravity matrix summary and small-world statistics")
    common(sp)
    sp.add_argument("--n-perm", type=int, default=100)
    sp.set_defaults(func=cmd_netstats)

    sp = sub.add_parser("simulate", help="one stochastic realization")
    common(sp)
    sp.add_argument("--source", type=int, required=True)
    sp.add_argument("--observers", help="comma-separated observer ids (default: all nodes)")
    sp.add_argument("--no-trajectory", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("calibrate", help="build a per-source calibration library")
    common(sp)
    sp.add_argument("--n-train", type=int, default=300)
    sp.add_argument("--observers", help="comma-separated observer ids")
    sp.add_argument("--n-observers", type=int, default=9)
    sp.add_argument("--placement", choices=["random", "high_degree"], default="high_degree")
    sp.add_argument("--sources", help="comma-separated source subset (default: all nodes)")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--keep-replicates", action="store_true", help="also write raw replicate arrivals")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("infer", help="posterior, MAP and HPD region for observed arrivals")
    common(sp)
    sp.add_argument("--library", help="calibration library directory")
    sp.add_argument("--arrivals", required=True, help="observer_id,day CSV (-1 = censored)")
    sp.add_argument("--prior", default="uniform", help="uniform, r0 or custom:<path>")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--logdet", choices=["on", "off"], default="on")
    sp.add_argument("--time-mode", choices=["absolute", "centered", "differenced"], default="absolute")
    sp.add_argument("--baseline", choices=["pinto"])
    sp.add_argument("--mean-delay", type=float, help="baseline delay per unit path length (days)")
    sp.add_argument("--delay-var", type=float, help="baseline delay variance per unit path length")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("experiment", help="synthetic train/test experiment")
    common(sp, seed_default=None)
    sp.add_argument("--experiment", required=True, help="experiment config (key = value)")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--baseline", choices=["pinto"])
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("synth-nodes", help="write a random synthetic nodes CSV")
    sp.add_argument("--n", type=int, default=50)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--extent-km", type=float, default=300.0)
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.set_defaults(func=cmd_synth_nodes)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (SourceLocError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
