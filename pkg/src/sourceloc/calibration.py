"""Per-source Gaussian arrival-time models fitted to Monte-Carlo replicates.

Each candidate source gets a mean vector and a diagonal covariance over the
observers. Sample variances are shrunk towards their median with a
distribution-free, data-driven intensity.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CalibrationError, InputError
from .network import MobilityMatrix, NodeTable
from .parallel import parallel_map
from .params import EpidemicParams
from .simulator import CENSORED, replicate_seed, simulate_arrivals

SCHEMA_VERSION = "1"
VAR_FLOOR = 0.25


@dataclass(frozen=True)
class SourceModel:
    """Gaussian model of observer arrival days given a source.

    ``cov`` is only set for models with correlated observers (shortest-path
    baseline, relative time transforms); otherwise the covariance is
    ``diag(var)``.
    """

    source: int
    mu: np.ndarray
    var: np.ndarray
    n_used: int
    n_censored: int
    cov: np.ndarray | None = field(default=None, compare=False)

    @property
    def K(self) -> int:
        return len(self.mu)

    @property
    def covariance(self) -> np.ndarray:
        return self.cov if self.cov is not None else np.diag(self.var)


@dataclass
class CalibrationLibrary:
    models: dict[int, SourceModel]
    observers: tuple[int, ...]
    fingerprint: str = ""
    master_seed: int = 0
    n_train: int = 0
    failures: dict[int, tuple[int, int]] = field(default_factory=dict)
    time_mode: str = "absolute"
    notes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.observers = tuple(int(o) for o in self.observers)
        K = len(self.observers)
        for s, model in self.models.items():
            if model.K != K:
                raise InputError(f"model for source {s} has K={model.K}, library has K={K}")

    @property
    def sources(self) -> list[int]:
        return sorted(self.models)

    def __len__(self):
        return len(self.models)


# -- shrinkage -----------------------------------------------------------------

def sample_variances(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased column variances and estimates of their sampling variance.

    With ``w_ik = (x_ik - mean_k)^2`` the variance is ``n/(n-1) mean_i w_ik``
    and its sampling variance is estimated by
    ``n/(n-1)^3 sum_i (w_ik - mean_i w_ik)^2``.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n < 2:
        raise ValueError("need at least 2 rows")
    w = (X - X.mean(axis=0)) ** 2
    wbar = w.mean(axis=0)
    v = n / (n - 1) * wbar
    var_v = n / (n - 1) ** 3 * ((w - wbar) ** 2).sum(axis=0)
    return v, var_v


def shrinkage_intensity(raw_vars, var_est) -> float:
    raw_vars = np.asarray(raw_vars, dtype=float)
    target = np.median(raw_vars)
    denom = float(np.sum((raw_vars - target) ** 2))
    if denom == 0.0:
        return 1.0
    return float(np.clip(np.sum(var_est) / denom, 0.0, 1.0))


def shrink_variances(raw_vars, var_est) -> np.ndarray:
    """Convex combination of each variance with the median variance."""
    raw_vars = np.asarray(raw_vars, dtype=float)
    if raw_vars.ndim != 1 or raw_vars.size < 1:
        raise ValueError("raw_vars must be a non-empty vector")
    lam = shrinkage_intensity(raw_vars, var_est)
    return lam * np.median(raw_vars) + (1.0 - lam) * raw_vars


# -- fitting -------------------------------------------------------------------

def fit_source_model(source: int, arrivals: np.ndarray, var_floor: float = VAR_FLOOR) -> SourceModel:
    """Fit from an ``(n_replicates, K)`` matrix of arrival days.

    Rows with any censored entry are dropped. Raises
    :class:`CalibrationError` if fewer than two rows remain.
    """
    arrivals = np.asarray(arrivals)
    if arrivals.ndim != 2 or arrivals.shape[1] < 1:
        raise InputError("arrivals must be a (replicates, observers) matrix with K >= 1")
    keep = ~np.any(arrivals == CENSORED, axis=1)
    X = arrivals[keep].astype(float)
    n_used, n_censored = int(keep.sum()), int((~keep).sum())
    if n_used < 2:
        raise CalibrationError(source, n_used, n_censored)
    raw, var_est = sample_variances(X)
    var = np.maximum(shrink_variances(raw, var_est), var_floor)
    return SourceModel(int(source), X.mean(axis=0), var, n_used, n_censored)


def simulate_replicates(
    source: int,
    nodes: NodeTable,
    Q,
    params: EpidemicParams,
    master_seed: int,
    replicates,
) -> np.ndarray:
    """Arrival days at every node for the given replicate indices, ``(R, N)``."""
    rows = [
        simulate_arrivals(source, nodes, Q, params, replicate_seed(master_seed, source, r))
        for r in replicates
    ]
    return np.array(rows, dtype=np.int64).reshape(len(rows), nodes.N)


def calibrate_source(
    source: int,
    nodes: NodeTable,
    Q,
    params: EpidemicParams,
    n_train: int,
    master_seed: int,
    observers,
    var_floor: float = VAR_FLOOR,
) -> SourceModel:
    """Simulate ``n_train`` replicates from ``source`` and fit its model."""
    observers = list(observers)
    if n_train < 2:
        raise InputError("n_train must be >= 2")
    if not observers:
        raise InputError("observers must be non-empty")
    days = simulate_replicates(source, nodes, Q, params, master_seed, range(n_train))
    return fit_source_model(source, days[:, observers], var_floor)


def library_fingerprint(nodes: NodeTable, Q, params: EpidemicParams) -> str:
    Qm = Q.Q if isinstance(Q, MobilityMatrix) else np.asarray(Q)
    h = hashlib.sha256()
    h.update(params.fingerprint().encode())
    for arr in (nodes.population, nodes.no_water_access, nodes.no_toilet_access):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(np.ascontiguousarray(Qm, dtype=np.float64).tobytes())
    return h.hexdigest()[:16]


def _calibrate_job(args):
    source, nodes, Q, params, n_train, master_seed, observers, var_floor = args
    try:
        return calibrate_source(source, nodes, Q, params, n_train, master_seed, observers, var_floor)
    except CalibrationError as exc:
        return exc


def build_library(
    nodes: NodeTable,
    Q,
    params: EpidemicParams,
    n_train: int,
    master_seed: int,
    observers,
    source_set=None,
    jobs: int = 1,
    var_floor: float = VAR_FLOOR,
    existing: CalibrationLibrary | None = None,
) -> CalibrationLibrary:
    """Calibrate every requested source; failures are recorded, not raised.

    Sources already present in ``existing`` (same fingerprint, seed and
    observers) are reused rather than re-simulated.
    """
    observers = tuple(int(o) for o in observers)
    sources = sorted(set(range(nodes.N) if source_set is None else (int(s) for s in source_set)))
    for s in sources:
        if not 0 <= s < nodes.N:
            raise InputError(f"source {s} is not a node id")
    fp = library_fingerprint(nodes, Q, params)
    models: dict[int, SourceModel] = {}
    failures: dict[int, tuple[int, int]] = {}
    if existing is not None and (
        existing.fingerprint == fp
        and existing.master_seed == master_seed
        and existing.observers == observers
        and existing.n_train == n_train
    ):
        models.update({s: m for s, m in existing.models.items() if s in sources})
        failures.update({s: f for s, f in existing.failures.items() if s in sources})
    todo = [s for s in sources if s not in models and s not in failures]
    jobs_args = [(s, nodes, Q, params, n_train, master_seed, observers, var_floor) for s in todo]
    for s, res in zip(todo, parallel_map(_calibrate_job, jobs_args, jobs)):
        if isinstance(res, CalibrationError):
            failures[s] = (res.n_used, res.n_censored)
        else:
            models[s] = res
    return CalibrationLibrary(
        models=dict(sorted(models.items())),
        observers=observers,
        fingerprint=fp,
        master_seed=int(master_seed),
        n_train=int(n_train),
        failures=dict(sorted(failures.items())),
    )


# -- persistence -----------------------------------------------------------------

META_FILE = "library_meta.csv"
MODELS_FILE = "models.csv"


def save_library(lib: CalibrationLibrary, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = [
        ("schema_version", SCHEMA_VERSION),
        ("observers", " ".join(str(o) for o in lib.observers)),
        ("params_fingerprint", lib.fingerprint),
        ("master_seed", str(lib.master_seed)),
        ("n_train", str(lib.n_train)),
        ("failed_sources", " ".join(f"{s}:{u}:{c}" for s, (u, c) in sorted(lib.failures.items()))),
    ]
    with (directory / META_FILE).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "value"])
        w.writerows(meta)
    with (directory / MODELS_FILE).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "observer_id", "mu_days", "var_days2", "n_used", "n_censored"])
        for s in lib.sources:
            m = lib.models[s]
            for o, mu, v in zip(lib.observers, m.mu, m.var):
                w.writerow([s, o, repr(float(mu)), repr(float(v)), m.n_used, m.n_censored])


def load_library(directory) -> CalibrationLibrary:
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise InputError(f"no {META_FILE} in {directory}")
    with meta_path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    meta = {r[0]: (r[1] if len(r) > 1 else "") for r in rows[1:] if r}
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise InputError(f"unsupported library schema {meta.get('schema_version')!r}", path=meta_path)
    observers = tuple(int(x) for x in meta["observers"].split())
    failures = {}
    for item in meta.get("failed_sources", "").split():
        s, u, c = (int(x) for x in item.split(":"))
        failures[s] = (u, c)
    per_source: dict[int, dict] = {}
    models_path = directory / MODELS_FILE
    with models_path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for row in reader:
            if not row:
                continue
            try:
                s, o = int(row[0]), int(row[1])
                mu, v = float(row[2]), float(row[3])
                n_used, n_cens = int(row[4]), int(row[5])
            except (ValueError, IndexError):
                raise InputError(f"unparseable row {row!r}", reader.line_num, models_path) from None
            rec = per_source.setdefault(s, {"mu": {}, "var": {}, "n": (n_used, n_cens)})
            rec["mu"][o] = mu
            rec["var"][o] = v
    models = {}
    for s, rec in sorted(per_source.items()):
        if set(rec["mu"]) != set(observers):
            raise InputError(f"source {s} rows do not cover the library observers", path=models_path)
        models[s] = SourceModel(
            s,
            np.array([rec["mu"][o] for o in observers]),
            np.array([rec["var"][o] for o in observers]),
            *rec["n"],
        )
    return CalibrationLibrary(
        models=models,
        observers=observers,
        fingerprint=meta.get("params_fingerprint", ""),
        master_seed=int(meta.get("master_seed", 0)),
        n_train=int(meta.get("n_train", 0)),
        failures=failures,
    )


def write_replicates_csv(per_source: dict[int, np.ndarray], observers, path) -> None:
    """Raw replicate arrival days, for auditing the diagonal-covariance assumption."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_id", "replicate", "observer_id", "day"])
        for s in sorted(per_source):
            for r, row in enumerate(per_source[s]):
                for o, d in zip(observers, row):
                    w.writerow([s, r, o, int(d)])
