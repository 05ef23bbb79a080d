"""Synthetic source-detection experiments: train on simulated outbreaks from
every candidate, test on held-out outbreaks, and score the estimates."""

from __future__ import annotations

import csv
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .calibration import VAR_FLOOR, CalibrationLibrary, fit_source_model, simulate_replicates
from .errors import CalibrationError, InputError
from .inference import (
    PriorSpec,
    fit_path_delays,
    hpd_region,
    map_estimate,
    path_covariance_structure,
    pinto_baseline_models,
    posterior,
    r0_prior,
    uniform_prior,
)
from .network import NodeTable, local_r0_all, pairwise_distances, rank_by_strength
from .parallel import parallel_map
from .params import EpidemicParams, parse_config
from .simulator import CENSORED

R0_EDGES = (0.0, 0.9, 1.8, 2.7, 3.6, 4.5)
LOG10_POP_EDGES = (3.5, 4.5)
TOP_K = 10

# spawn keys for streams that are not (source, replicate) simulations
_PLACEMENT_KEY = 2**31
_SOURCE_PICK_KEY = 2**31 + 1


@dataclass(frozen=True)
class ExperimentConfig:
    n_observers: int = 9
    placement: str = "high_degree"
    prior: str = "uniform"
    n_train: int = 300
    n_test: int = 100
    seed: int = 0
    sources: tuple[int, ...] | None = None
    n_random_sources: int | None = None
    alpha: float = 0.05
    include_logdet: bool = True
    time_mode: str = "absolute"
    baseline: str | None = None
    eligible: tuple[int, ...] | None = None
    var_floor: float = VAR_FLOOR

    def __post_init__(self):
        if self.n_observers < 1:
            raise InputError("n_observers must be >= 1")
        if self.n_train < 2:
            raise InputError("n_train must be >= 2")
        if self.n_test < 1:
            raise InputError("n_test must be >= 1")
        if self.placement not in ("random", "high_degree"):
            raise InputError(f"placement must be random or high_degree, got {self.placement!r}")
        if self.prior not in ("uniform", "r0"):
            raise InputError(f"prior must be uniform or r0, got {self.prior!r}")
        if not 0 < self.alpha < 1:
            raise InputError("alpha must be in (0, 1)")
        if self.baseline not in (None, "pinto"):
            raise InputError(f"unknown baseline {self.baseline!r}")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _parse_ids(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def load_experiment_config(path) -> ExperimentConfig:
    """Read a ``key = value`` experiment config; unknown keys are errors.

    ``sources`` is ``all``, ``random:<n>`` or a list of node ids.
    """
    path = Path(path)
    values = parse_config(path.read_text(encoding="utf-8"), path)
    kw: dict = {}
    parsers = {
        "n_observers": int,
        "placement": str,
        "prior": str,
        "n_train": int,
        "n_test": int,
        "seed": int,
        "alpha": float,
        "include_logdet": _parse_bool,
        "time_mode": str,
        "baseline": lambda s: None if s in ("", "none") else s,
        "eligible": lambda s: None if s in ("", "all") else _parse_ids(s),
        "var_floor": float,
    }
    for key, value in values.items():
        if key == "sources":
            if value == "all":
                kw["sources"] = None
            elif value.startswith("random:"):
                kw["n_random_sources"] = int(value.split(":", 1)[1])
            else:
                kw["sources"] = _parse_ids(value)
            continue
        if key not in parsers:
            raise InputError(f"unknown experiment key {key!r}", path=path)
        try:
            kw[key] = parsers[key](value)
        except ValueError:
            raise InputError(f"{key}: cannot parse {value!r}", path=path) from None
    return ExperimentConfig(**kw)


# -- observers ---------------------------------------------------------------------

def place_observers(strategy: str, k: int, nodes: NodeTable, Q, seed: int = 0, eligible=None) -> tuple[int, ...]:
    """Choose ``k`` observers uniformly at random or by descending in-strength."""
    pool = list(range(nodes.N)) if eligible is None else sorted(set(int(e) for e in eligible))
    if k > len(pool):
        raise InputError(f"cannot place {k} observers among {len(pool)} eligible nodes")
    if k < 1:
        raise InputError("k must be >= 1")
    if strategy == "high_degree":
        return tuple(rank_by_strength(Q, "in", pool)[:k])
    if strategy == "random":
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(_PLACEMENT_KEY,)))
        return tuple(int(x) for x in rng.choice(pool, size=k, replace=False))
    raise InputError(f"unknown placement strategy {strategy!r}")


def pick_sources(config: ExperimentConfig, n_nodes: int) -> tuple[int, ...]:
    if config.sources is not None:
        return tuple(sorted(set(config.sources)))
    if config.n_random_sources is not None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(_SOURCE_PICK_KEY,)))
        picked = rng.choice(n_nodes, size=config.n_random_sources, replace=False)
        return tuple(sorted(int(x) for x in picked))
    return tuple(range(n_nodes))


# -- simulation bank ---------------------------------------------------------------

@dataclass
class ArrivalBank:
    """Simulated arrival days keyed by source, restricted to ``columns``."""

    columns: tuple[int, ...]
    replicates: range
    data: dict[int, np.ndarray] = field(default_factory=dict)

    def select(self, source: int, observers) -> np.ndarray:
        pos = {c: i for i, c in enumerate(self.columns)}
        try:
            idx = [pos[o] for o in observers]
        except KeyError as exc:
            raise InputError(f"observer {exc.args[0]} not stored in the arrival bank") from None
        return self.data[source][:, idx]


def _bank_job(args):
    source, nodes, Q, params, master_seed, replicates, columns = args
    days = simulate_replicates(source, nodes, Q, params, master_seed, replicates)
    return days[:, list(columns)].astype(np.int16)


def simulate_bank(nodes, Q, params, master_seed, sources, replicates, columns=None, jobs=1) -> ArrivalBank:
    columns = tuple(range(nodes.N)) if columns is None else tuple(int(c) for c in columns)
    sources = sorted(set(int(s) for s in sources))
    args = [(s, nodes, Q, params, master_seed, replicates, columns) for s in sources]
    results = parallel_map(_bank_job, args, jobs)
    return ArrivalBank(columns, replicates, dict(zip(sources, results)))


# -- per-case evaluation ----------------------------------------------------------

UNSCORED = -1


@dataclass(frozen=True)
class CaseResult:
    source: int
    replicate: int
    map: int
    in_region: int
    region_size: int
    rank: int
    dist_km: float
    reason: str = ""

    @property
    def scored(self) -> bool:
        return self.map != UNSCORED


def evaluate_case(truth: int, table, region, dist: np.ndarray) -> tuple[bool, int, int, float]:
    """(truth in region, region size, rank of truth, km from truth to MAP)."""
    if truth not in set(int(x) for x in table.node_ids):
        raise InputError(f"truth {truth} is not a candidate source")
    s_hat = map_estimate(table)
    return (truth in region, len(region), table.rank_of(truth), float(dist[truth, s_hat]))


def _unscored(source, rep, reason):
    return CaseResult(source, rep, UNSCORED, UNSCORED, UNSCORED, UNSCORED, float(UNSCORED), reason)


def score_cases(library, prior, test_bank, observers, sources, dist, config) -> list[CaseResult]:
    results = []
    candidates = set(library.models)
    for s in sources:
        X = test_bank.select(s, observers)
        for j, rep in enumerate(test_bank.replicates):
            t = X[j].astype(np.int64)
            if np.any(t == CENSORED):
                results.append(_unscored(s, rep, "censored_observer"))
                continue
            if s not in candidates:
                results.append(_unscored(s, rep, "truth_uncalibrated"))
                continue
            table = posterior(t, library, prior, config.include_logdet, config.time_mode)
            region = hpd_region(table, config.alpha)
            inside, size, rank, d = evaluate_case(s, table, region, dist)
            results.append(CaseResult(s, rep, map_estimate(table), int(inside), size, rank, d))
    return results


# -- reports -----------------------------------------------------------------------

def r0_bin(r0: float) -> int:
    return int(np.searchsorted(R0_EDGES, r0, side="right") - 1)


def population_bin(population: float) -> int:
    return int(np.searchsorted(LOG10_POP_EDGES, math.log10(population), side="right"))


def r0_bin_label(b: int) -> str:
    lo = R0_EDGES[b]
    hi = R0_EDGES[b + 1] if b + 1 < len(R0_EDGES) else math.inf
    return f"[{lo}, {hi})"


POP_BIN_LABELS = ("log10<3.5", "3.5<=log10<4.5", "log10>=4.5")


@dataclass(frozen=True)
class Aggregate:
    n_cases: int
    n_scored: int
    coverage: float
    mean_region_size: float
    top10_rate: float
    top1_rate: float
    mean_dist_km: float

    @classmethod
    def of(cls, cases) -> "Aggregate":
        cases = list(cases)
        scored = [c for c in cases if c.scored]
        n = len(scored)
        if n == 0:
            nan = math.nan
            return cls(len(cases), 0, nan, nan, nan, nan, nan)
        return cls(
            len(cases),
            n,
            sum(c.in_region for c in scored) / n,
            sum(c.region_size for c in scored) / n,
            sum(c.rank <= TOP_K for c in scored) / n,
            sum(c.rank == 1 for c in scored) / n,
            sum(c.dist_km for c in scored) / n,
        )


@dataclass
class MetricsReport:
    estimator: str
    cases: list[CaseResult]
    observers: tuple[int, ...]
    source_r0: dict[int, float]
    source_population: dict[int, int]
    failures: dict[int, tuple[int, int]] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    @property
    def overall(self) -> Aggregate:
        return Aggregate.of(self.cases)

    def top_k_rate(self, k: int) -> float:
        scored = [c for c in self.cases if c.scored]
        return sum(c.rank <= k for c in scored) / len(scored) if scored else math.nan

    def where(self, predicate) -> Aggregate:
        """Aggregate over cases whose source satisfies ``predicate(r0, population)``."""
        return Aggregate.of(
            c for c in self.cases if predicate(self.source_r0[c.source], self.source_population[c.source])
        )

    def unscored_counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.cases:
            if not c.scored:
                out[c.reason] = out.get(c.reason, 0) + 1
        return dict(sorted(out.items()))


def stratify(report: MetricsReport, r0_values, populations) -> dict[tuple[int, int], Aggregate]:
    """Aggregates per (R0 bin, population bin); empty strata are absent."""
    groups: dict[tuple[int, int], list[CaseResult]] = {}
    for c in report.cases:
        key = (r0_bin(r0_values[c.source]), population_bin(populations[c.source]))
        groups.setdefault(key, []).append(c)
    return {k: Aggregate.of(v) for k, v in sorted(groups.items())}


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    observers: tuple[int, ...]
    sources: tuple[int, ...]
    reports: dict[str, MetricsReport]


def run_experiment(
    config: ExperimentConfig,
    nodes: NodeTable,
    Q,
    params: EpidemicParams,
    jobs: int = 1,
    dist: np.ndarray | None = None,
    train_bank: ArrivalBank | None = None,
    test_bank: ArrivalBank | None = None,
    candidates=None,
) -> ExperimentResult:
    """Calibrate every candidate, then score held-out outbreaks from each test source.

    Training replicates are indices ``0..n_train-1`` of each source's stream and
    test replicates follow them, so train and test never share a realization.
    Pre-simulated banks may be passed to share simulations between runs that
    differ only in observers, prior or estimator.
    """
    dist = pairwise_distances(nodes) if dist is None else dist
    observers = place_observers(config.placement, config.n_observers, nodes, Q, config.seed, config.eligible)
    sources = pick_sources(config, nodes.N)
    candidates = tuple(range(nodes.N)) if candidates is None else tuple(sorted(candidates))
    if train_bank is None:
        train_bank = simulate_bank(nodes, Q, params, config.seed, candidates, range(config.n_train), observers, jobs)
    if test_bank is None:
        test_range = range(config.n_train, config.n_train + config.n_test)
        test_bank = simulate_bank(nodes, Q, params, config.seed, sources, test_range, observers, jobs)

    models, failures = {}, {}
    for s in candidates:
        try:
            models[s] = fit_source_model(s, train_bank.select(s, observers)[: config.n_train], config.var_floor)
        except CalibrationError as exc:
            failures[s] = (exc.n_used, exc.n_censored)
    library = CalibrationLibrary(models, observers, master_seed=config.seed,
                                 n_train=config.n_train, failures=failures)

    r0 = local_r0_all(nodes, params)
    prior = uniform_prior(nodes.N) if config.prior == "uniform" else r0_prior(nodes, params)
    src_r0 = {s: float(r0[s]) for s in sources}
    src_pop = {s: int(nodes.population[s]) for s in sources}
    reports = {
        "proposed": MetricsReport(
            "proposed", score_cases(library, prior, test_bank, observers, sources, dist, config),
            observers, src_r0, src_pop, failures,
        )
    }
    if config.baseline == "pinto":
        reports["pinto"] = run_pinto(nodes, Q, observers, train_bank, test_bank, sources,
                                     candidates, dist, config, src_r0, src_pop)
    return ExperimentResult(config, observers, sources, reports)


def run_pinto(nodes, Q, observers, train_bank, test_bank, sources, candidates, dist, config, src_r0, src_pop):
    """Score the shortest-path baseline with delays fitted on the training bank."""
    lengths, days = [], []
    for s in candidates:
        L, _ = path_covariance_structure(Q, s, observers)
        X = train_bank.select(s, observers)[: config.n_train]
        lengths.append(np.broadcast_to(L, X.shape))
        days.append(X)
    mean_delay, delay_var = fit_path_delays(np.concatenate(lengths), np.concatenate(days))
    lib = pinto_baseline_models(nodes, Q, observers, mean_delay, delay_var,
                                var_floor=config.var_floor, sources=candidates)
    pconfig = config.replace(include_logdet=True)
    cases = score_cases(lib, uniform_prior(nodes.N), test_bank, observers, sources, dist, pconfig)
    return MetricsReport("pinto", cases, observers, src_r0, src_pop, {}, dict(lib.notes))


# -- file formats --------------------------------------------------------------------

CASE_COLUMNS = ("source", "replicate", "map", "in_region", "region_size", "rank", "dist_km")


def write_cases_csv(report: MetricsReport, path) -> None:
    """Per-case rows; unscored cases carry -1 in every metric column."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CASE_COLUMNS)
        for c in report.cases:
            w.writerow([c.source, c.replicate, c.map, c.in_region, c.region_size, c.rank,
                        repr(c.dist_km) if c.scored else UNSCORED])


def read_cases_csv(path) -> list[CaseResult]:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(CaseResult(int(row["source"]), int(row["replicate"]), int(row["map"]),
                                  int(row["in_region"]), int(row["region_size"]), int(row["rank"]),
                                  float(row["dist_km"])))
    return out


SUMMARY_COLUMNS = ("estimator", "r0_bin", "pop_bin", "n_cases", "n_scored", "coverage",
                   "mean_region_size", "top10_rate", "top1_rate", "mean_dist_km")


def _agg_row(name, r0_label, pop_label, a: Aggregate):
    return [name, r0_label, pop_label, a.n_cases, a.n_scored, repr(a.coverage),
            repr(a.mean_region_size), repr(a.top10_rate), repr(a.top1_rate), repr(a.mean_dist_km)]


def write_summary_csv(reports: dict[str, MetricsReport], r0_values, populations, path) -> None:
    """Overall row plus one row per non-empty stratum for each estimator."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for name, rep in reports.items():
            w.writerow(_agg_row(name, "all", "all", rep.overall))
            for (rb, pb), agg in stratify(rep, r0_values, populations).items():
                w.writerow(_agg_row(name, r0_bin_label(rb), POP_BIN_LABELS[pb], agg))
