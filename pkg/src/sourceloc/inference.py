"""Posterior source localization from observer first-arrival times.

Each candidate source is one component of a Gaussian mixture over arrival
vectors. The posterior over components gives a MAP point estimate and a
highest-posterior-density (HPD) set of candidate nodes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .calibration import VAR_FLOOR, CalibrationLibrary, SourceModel
from .errors import CensoredArrivalError, InputError
from .network import MobilityMatrix, NodeTable, local_r0_all
from .params import EpidemicParams
from .simulator import CENSORED, ArrivalVector

LOG_2PI = math.log(2.0 * math.pi)
TIME_MODES = ("absolute", "centered", "differenced")


# -- priors --------------------------------------------------------------------

@dataclass(frozen=True)
class PriorSpec:
    kind: str
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise InputError("prior weights must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InputError("prior weights must be finite and >= 0")
        if not np.any(w > 0):
            raise InputError("prior needs at least one positive weight")
        if abs(w.sum() - 1.0) > 1e-12:
            raise InputError(f"prior weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "weights", w)

    @classmethod
    def normalized(cls, kind: str, weights) -> "PriorSpec":
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if not total > 0:
            raise InputError("prior needs at least one positive weight")
        return cls(kind, w / total)


def uniform_prior(n: int) -> PriorSpec:
    return PriorSpec("uniform", np.full(n, 1.0 / n))


def r0_prior(nodes: NodeTable, params: EpidemicParams) -> PriorSpec:
    """Prior proportional to each node's local R0."""
    return PriorSpec.normalized("r0_proportional", local_r0_all(nodes, params))


def load_prior_csv(path, n: int) -> PriorSpec:
    """Custom prior from ``node_id,weight`` rows; unlisted nodes get 0."""
    path = Path(path)
    w = np.zeros(n)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["node_id", "weight"]:
            raise InputError("header must be node_id,weight", 1, path)
        for row in reader:
            if not row:
                continue
            try:
                i, x = int(row[0]), float(row[1])
            except (ValueError, IndexError):
                raise InputError(f"unparseable row {row!r}", reader.line_num, path) from None
            if not 0 <= i < n:
                raise InputError(f"node id {i} out of range", reader.line_num, path)
            w[i] = x
    return PriorSpec.normalized("custom", w)


# -- time references -------------------------------------------------------------

def time_transform_matrix(K: int, mode: str) -> np.ndarray:
    """Linear map applied to arrival vectors for a given time reference."""
    if mode == "absolute":
        return np.eye(K)
    if K < 2:
        raise InputError(f"time mode {mode!r} needs at least 2 observers")
    if mode == "centered":
        return np.eye(K) - np.full((K, K), 1.0 / K)
    if mode == "differenced":
        L = np.zeros((K - 1, K))
        L[:, 0] = -1.0
        L[np.arange(K - 1), np.arange(1, K)] = 1.0
        return L
    raise InputError(f"unknown time mode {mode!r}; expected one of {TIME_MODES}")


def transform_times(obj, mode: str):
    """Re-express arrival times relative to the observers themselves.

    Accepts an arrival vector (array or :class:`ArrivalVector`), a
    :class:`SourceModel` or a whole :class:`CalibrationLibrary`. Models map to
    ``mu -> L mu`` and ``cov -> L cov L^T``; ``absolute`` is the identity.
    """
    if isinstance(obj, CalibrationLibrary):
        if mode == "absolute":
            return obj
        models = {s: transform_times(m, mode) for s, m in obj.models.items()}
        lib = CalibrationLibrary(
            models={}, observers=obj.observers, fingerprint=obj.fingerprint,
            master_seed=obj.master_seed, n_train=obj.n_train, failures=dict(obj.failures),
            time_mode=mode, notes=dict(obj.notes),
        )
        lib.models = models
        return lib
    if isinstance(obj, SourceModel):
        if mode == "absolute":
            return obj
        L = time_transform_matrix(obj.K, mode)
        cov = L @ obj.covariance @ L.T
        return SourceModel(obj.source, L @ obj.mu, np.diag(cov).copy(), obj.n_used, obj.n_censored, cov)
    t = obj.days if isinstance(obj, ArrivalVector) else np.asarray(obj)
    t = np.asarray(t, dtype=float)
    # rows of a 2-D input are separate arrival vectors
    return t @ time_transform_matrix(t.shape[-1], mode).T if mode != "absolute" else t


# -- densities -------------------------------------------------------------------

def _check_uncensored(t, observers=None):
    t = np.asarray(t)
    bad = np.nonzero(t == CENSORED)[0]
    if bad.size:
        obs = [observers[i] for i in bad] if observers is not None else bad.tolist()
        raise CensoredArrivalError(obs)


def _full_logpdf(x, mu, cov, include_logdet: bool) -> float:
    # eigen-decomposition so rank-deficient covariances (relative time modes)
    # are scored on their support with a pseudo-determinant
    vals, vecs = np.linalg.eigh(cov)
    tol = max(vals.max(), 0.0) * len(vals) * 1e-12
    keep = vals > tol
    r = vecs[:, keep].T @ (np.asarray(x, float) - mu)
    score = -0.5 * float(np.sum(r**2 / vals[keep]))
    if include_logdet:
        score -= 0.5 * (keep.sum() * LOG_2PI + float(np.sum(np.log(vals[keep]))))
    return score


def log_component_density(t, model: SourceModel, include_logdet: bool = True) -> float:
    """Gaussian log-density of arrival vector ``t`` under one source model.

    Without ``include_logdet`` only the quadratic form ``-1/2 (t-mu)' C^-1 (t-mu)``
    is returned, i.e. the plain discriminant score.
    """
    if isinstance(t, ArrivalVector):
        _check_uncensored(t.days, t.observers)
        t = t.days
    t = np.asarray(t, dtype=float)
    if t.shape != model.mu.shape:
        raise InputError(f"arrival vector has {t.shape[0]} entries, model has {model.K}")
    if model.cov is not None:
        return _full_logpdf(t, model.mu, model.cov, include_logdet)
    _check_uncensored(t)
    z = (t - model.mu) ** 2 / model.var
    score = -0.5 * float(z.sum())
    if include_logdet:
        score -= 0.5 * float(np.sum(np.log(2.0 * math.pi * model.var)))
    return score


# -- posterior -------------------------------------------------------------------

@dataclass(frozen=True)
class PosteriorTable:
    """Posterior over candidate sources, rows sorted by node id."""

    node_ids: np.ndarray
    prior: np.ndarray
    loglik: np.ndarray
    posterior: np.ndarray
    rank: np.ndarray
    include_logdet: bool = True

    def __len__(self):
        return len(self.node_ids)

    def order(self) -> np.ndarray:
        """Row indices by descending posterior; ties by larger prior, then smaller id."""
        return np.lexsort((self.node_ids, -self.prior, -self.posterior))

    def rank_of(self, node: int) -> int:
        idx = np.nonzero(self.node_ids == node)[0]
        if idx.size == 0:
            raise KeyError(node)
        return int(self.rank[idx[0]])

    def posterior_of(self, node: int) -> float:
        idx = np.nonzero(self.node_ids == node)[0]
        return float(self.posterior[idx[0]]) if idx.size else 0.0


def posterior_from_scores(node_ids, prior, loglik, include_logdet: bool = True) -> PosteriorTable:
    """Normalize ``prior * exp(loglik)`` in log space."""
    node_ids = np.asarray(node_ids, dtype=np.int64)
    prior = np.asarray(prior, dtype=float)
    loglik = np.asarray(loglik, dtype=float)
    with np.errstate(divide="ignore"):
        logp = np.where(prior > 0, np.log(prior) + loglik, -np.inf)
    if not np.any(np.isfinite(logp)):
        raise InputError("every candidate has zero prior weight")
    logp -= logp[np.isfinite(logp)].max()
    w = np.exp(logp)
    post = w / w.sum()
    order = np.lexsort((node_ids, -prior, -post))
    rank = np.empty(len(node_ids), dtype=np.int64)
    rank[order] = np.arange(1, len(node_ids) + 1)
    return PosteriorTable(node_ids, prior, loglik, post, rank, include_logdet)


def _align(t, library: CalibrationLibrary) -> np.ndarray:
    if isinstance(t, ArrivalVector):
        # extra observers in the arrival file are ignored; missing ones are an error
        missing = sorted(set(library.observers) - set(t.observers))
        if missing:
            raise InputError(f"arrivals lack library observers {missing}")
        pos = {o: i for i, o in enumerate(t.observers)}
        days = t.days[[pos[o] for o in library.observers]]
        _check_uncensored(days, library.observers)
        return days.astype(float)
    t = np.asarray(t, dtype=float)
    if t.shape != (len(library.observers),):
        raise InputError(f"arrival vector has shape {t.shape}, library has K={len(library.observers)}")
    _check_uncensored(t, library.observers)
    return t


def posterior(
    t,
    library: CalibrationLibrary,
    prior: PriorSpec,
    include_logdet: bool = True,
    time_mode: str = "absolute",
) -> PosteriorTable:
    """Posterior over the library's sources given absolute arrival days ``t``.

    ``time_mode`` re-expresses both ``t`` and the models relative to the
    observers before scoring (for data without a known outbreak start date).
    """
    days = _align(t, library)
    sources = library.sources
    if not sources:
        raise InputError("library has no source models")
    if max(sources) >= len(prior.weights):
        raise InputError("prior does not cover all library sources")
    if library.time_mode != "absolute":
        raise InputError("pass an absolute-time library and select time_mode here")
    pri = prior.weights[sources]
    models = [library.models[s] for s in sources]
    if time_mode == "absolute" and all(m.cov is None for m in models):
        mu = np.stack([m.mu for m in models])
        var = np.stack([m.var for m in models])
        ll = -0.5 * ((days - mu) ** 2 / var).sum(axis=1)
        if include_logdet:
            ll -= 0.5 * np.log(2.0 * math.pi * var).sum(axis=1)
    else:
        x = transform_times(days, time_mode)
        ll = np.array([
            log_component_density(x, transform_times(m, time_mode), include_logdet) for m in models
        ])
    return posterior_from_scores(sources, pri, ll, include_logdet)


def map_estimate(table: PosteriorTable) -> int:
    """Most probable source (ties: larger prior, then smaller id)."""
    if len(table) == 0:
        raise InputError("empty posterior table")
    return int(table.node_ids[table.order()[0]])


# -- HPD region -------------------------------------------------------------------

MASS_TOL = 1e-12


@dataclass(frozen=True)
class HPDRegion:
    members: tuple[int, ...]
    tau_alpha: float
    mass: float
    alpha: float

    def __contains__(self, node) -> bool:
        return int(node) in self.members

    def __len__(self):
        return len(self.members)


def hpd_region(table: PosteriorTable, alpha: float) -> HPDRegion:
    """Smallest posterior-threshold set holding at least ``1 - alpha`` mass.

    Members are exactly the candidates with posterior ``> tau_alpha``; nodes
    tied with the last member needed are all included.
    """
    if not 0 < alpha < 1:
        raise InputError(f"alpha must be in (0, 1), got {alpha!r}")
    p = table.posterior
    order = np.argsort(-p, kind="stable")
    sp = p[order]
    csum = np.cumsum(sp)
    target = 1.0 - alpha - MASS_TOL
    positive = int(np.count_nonzero(sp > 0))
    hit = np.nonzero(csum >= target)[0]
    n = int(hit[0]) + 1 if hit.size else positive
    n = min(max(n, 1), positive)
    boundary = sp[n - 1]
    while n < len(sp) and sp[n] == boundary:
        n += 1
    tau = float(sp[n]) if n < len(sp) else 0.0
    members = tuple(sorted(int(x) for x in table.node_ids[order[:n]]))
    return HPDRegion(members, tau, float(sp[:n].sum()), float(alpha))


# -- shortest-path baseline ---------------------------------------------------------

def spread_lengths(Q) -> np.ndarray:
    """Edge lengths for spread from ``u`` to ``v``: ``1 / Q[v, u]``.

    Infection reaches ``v`` when its residents visit ``u``, so the relevant
    mobility weight is the one out of ``v``.
    """
    Qm = Q.Q if isinstance(Q, MobilityMatrix) else np.asarray(Q, dtype=float)
    W = Qm.T
    L = np.zeros_like(W)
    mask = W > 0
    L[mask] = 1.0 / W[mask]
    np.fill_diagonal(L, 0.0)
    return L


def shortest_path_tree(Q, source: int) -> tuple[np.ndarray, np.ndarray]:
    """Distances and predecessors of the shortest-path tree rooted at ``source``."""
    dist, pred = shortest_path(spread_lengths(Q), method="D", directed=True,
                               indices=[source], return_predecessors=True)
    return dist[0], pred[0]


def _path(pred, source, target) -> list[int]:
    path = [target]
    while path[-1] != source:
        prev = pred[path[-1]]
        if prev < 0:
            raise InputError(f"observer {target} unreachable from {source}")
        path.append(int(prev))
    return path[::-1]


def path_covariance_structure(Q, source: int, observers) -> tuple[np.ndarray, np.ndarray]:
    """Path lengths from ``source`` and shared-prefix lengths between observer paths."""
    dist, pred = shortest_path_tree(Q, source)
    observers = list(observers)
    paths = [_path(pred, source, o) for o in observers]
    K = len(observers)
    lengths = np.array([dist[o] for o in observers])
    shared = np.zeros((K, K))
    for a in range(K):
        for b in range(a, K):
            pa, pb = paths[a], paths[b]
            j = 0
            while j < min(len(pa), len(pb)) and pa[j] == pb[j]:
                j += 1
            shared[a, b] = shared[b, a] = dist[pa[j - 1]]
    return lengths, shared


def fit_path_delays(lengths, days, offset: float = 1.0) -> tuple[float, float]:
    """Per-unit-length delay mean and variance from observed arrivals.

    Least squares through ``offset`` for the mean; residual variance is taken
    proportional to path length. Censored days are ignored.
    """
    L = np.asarray(lengths, dtype=float).ravel()
    d = np.asarray(days, dtype=float).ravel()
    ok = (d != CENSORED) & np.isfinite(L)
    L, y = L[ok], d[ok] - offset
    if not np.any(L > 0):
        raise InputError("no positive path lengths with observed arrivals")
    a = float(np.sum(L * y) / np.sum(L * L))
    resid = y - a * L
    v = float(np.sum(resid**2) / np.sum(L))
    return a, max(v, 1e-12)


def pinto_baseline_models(
    nodes: NodeTable,
    Q,
    observers,
    mean_delay: float,
    delay_var: float,
    offset: float = 1.0,
    var_floor: float = VAR_FLOOR,
    sources=None,
) -> CalibrationLibrary:
    """Deterministic shortest-path Gaussian models for every candidate source.

    Mean arrival is ``offset + mean_delay * path length``; covariance between
    two observers is ``delay_var`` times the length their tree paths share.
    ``var_floor`` is added to the diagonal so observers at the source stay
    scorable.
    """
    if not (mean_delay > 0 and delay_var > 0):
        raise InputError("mean_delay and delay_var must be > 0")
    observers = tuple(int(o) for o in observers)
    models = {}
    for s in range(nodes.N) if sources is None else sorted(sources):
        lengths, shared = path_covariance_structure(Q, s, observers)
        if not np.all(np.isfinite(lengths)):
            raise InputError(f"observer unreachable from source {s}")
        cov = delay_var * shared + var_floor * np.eye(len(observers))
        models[s] = SourceModel(s, offset + mean_delay * lengths, np.diag(cov).copy(), 0, 0, cov)
    return CalibrationLibrary(
        models=models,
        observers=observers,
        fingerprint="pinto",
        notes={
            "baseline": "pinto",
            "mean_delay": repr(float(mean_delay)),
            "delay_var": repr(float(delay_var)),
            "offset": repr(float(offset)),
        },
    )


# -- file formats ------------------------------------------------------------------

def write_posterior_csv(table: PosteriorTable, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "prior", "loglik", "posterior", "rank"])
        for i in range(len(table)):
            w.writerow([int(table.node_ids[i]), repr(float(table.prior[i])),
                        repr(float(table.loglik[i])), repr(float(table.posterior[i])),
                        int(table.rank[i])])


def write_hpd_csv(region: HPDRegion, table: PosteriorTable, path) -> None:
    """Region members with their posterior, then a summary line."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "posterior"])
        for s in sorted(region.members, key=lambda s: (table.rank_of(s))):
            w.writerow([s, repr(table.posterior_of(s))])
        w.writerow([])
        w.writerow(["alpha", "tau_alpha", "mass", "size"])
        w.writerow([repr(region.alpha), repr(region.tau_alpha), repr(region.mass), len(region)])
