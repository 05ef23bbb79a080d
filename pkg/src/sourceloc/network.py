"""Human-mobility network: node tables, distances, gravity mobility and
network statistics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import shortest_path

from .errors import InputError
from .params import EpidemicParams

EARTH_RADIUS_KM = 6371.0

NODE_COLUMNS = ("id", "name", "lat", "lon", "population", "no_water_access", "no_toilet_access")


@dataclass(frozen=True)
class Node:
    id: int
    name: str
    lat: float
    lon: float
    population: int
    no_water_access: float
    no_toilet_access: float

    def __post_init__(self):
        if self.population < 1:
            raise InputError("population must be ≥ 1")
        for attr in ("no_water_access", "no_toilet_access"):
            v = getattr(self, attr)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"{attr} must be in [0, 1], got {v!r}")
        if not -90.0 <= self.lat <= 90.0:
            raise InputError(f"lat must be in [-90, 90], got {self.lat!r}")
        if not -180.0 <= self.lon <= 180.0:
            raise InputError(f"lon must be in [-180, 180], got {self.lon!r}")


@dataclass(frozen=True)
class NodeTable:
    """Ordered communities; ``nodes[i].id == i``."""

    nodes: tuple[Node, ...]
    population: np.ndarray = field(init=False, repr=False, compare=False)
    lat: np.ndarray = field(init=False, repr=False, compare=False)
    lon: np.ndarray = field(init=False, repr=False, compare=False)
    no_water_access: np.ndarray = field(init=False, repr=False, compare=False)
    no_toilet_access: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        nodes = tuple(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        if len(nodes) < 2:
            raise InputError(f"a node table needs at least 2 nodes, got {len(nodes)}")
        ids = [n.id for n in nodes]
        if ids != list(range(len(nodes))):
            raise InputError("node ids must be exactly 0..N-1 in row order")
        for attr, dtype in (
            ("population", np.int64),
            ("lat", float),
            ("lon", float),
            ("no_water_access", float),
            ("no_toilet_access", float),
        ):
            arr = np.array([getattr(n, attr) for n in nodes], dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, attr, arr)

    @property
    def N(self) -> int:
        return len(self.nodes)

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, i) -> Node:
        return self.nodes[i]

    def __iter__(self):
        return iter(self.nodes)

    @classmethod
    def from_arrays(cls, lat, lon, population, no_water_access, no_toilet_access, names=None):
        n = len(lat)
        names = names if names is not None else [f"node{i}" for i in range(n)]
        return cls(
            tuple(
                Node(i, names[i], float(lat[i]), float(lon[i]), int(population[i]),
                     float(no_water_access[i]), float(no_toilet_access[i]))
                for i in range(n)
            )
        )


@dataclass(frozen=True)
class MobilityMatrix:
    """Row-stochastic gravity matrix with zero diagonal."""

    Q: np.ndarray
    D: float

    @property
    def N(self) -> int:
        return self.Q.shape[0]


def load_nodes(path) -> NodeTable:
    """Read a nodes CSV. Row order defines ids, which must be 0..N-1."""
    path = Path(path)
    nodes = []
    seen = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError("empty file", 1, path) from None
        if tuple(h.strip() for h in header) != NODE_COLUMNS:
            raise InputError(f"header must be {','.join(NODE_COLUMNS)}", 1, path)
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(NODE_COLUMNS):
                raise InputError(f"expected {len(NODE_COLUMNS)} fields, got {len(row)}", lineno, path)
            try:
                node_id = int(row[0])
                lat, lon = float(row[2]), float(row[3])
                pop_f = float(row[4])
                water, toilet = float(row[5]), float(row[6])
            except ValueError as exc:
                raise InputError(f"unparseable row: {exc}", lineno, path) from None
            if pop_f != int(pop_f):
                raise InputError(f"population must be an integer, got {row[4]!r}", lineno, path)
            if node_id in seen:
                raise InputError(f"duplicate id {node_id} (first on line {seen[node_id]})", lineno, path)
            if node_id != len(nodes):
                raise InputError(f"id {node_id} out of sequence; expected {len(nodes)}", lineno, path)
            seen[node_id] = lineno
            try:
                nodes.append(Node(node_id, row[1], lat, lon, int(pop_f), water, toilet))
            except InputError as exc:
                raise InputError(str(exc), lineno, path) from None
    try:
        return NodeTable(tuple(nodes))
    except InputError as exc:
        raise InputError(str(exc), path=path) from None


def save_nodes(nodes: NodeTable, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NODE_COLUMNS)
        for n in nodes:
            w.writerow([n.id, n.name, repr(n.lat), repr(n.lon), n.population,
                        repr(n.no_water_access), repr(n.no_toilet_access)])


def load_distance_csv(path, n: int) -> np.ndarray:
    """Read ``i,j,km`` rows into a symmetric N x N matrix.

    Each listed pair is mirrored; a pair given twice with different values is
    an error. Every off-diagonal pair must be covered.
    """
    path = Path(path)
    d = np.full((n, n), np.nan)
    np.fill_diagonal(d, 0.0)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["i", "j", "km"]:
            raise InputError("header must be i,j,km", 1, path)
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            try:
                i, j, km = int(row[0]), int(row[1]), float(row[2])
            except (ValueError, IndexError):
                raise InputError(f"unparseable row {row!r}", lineno, path) from None
            if not (0 <= i < n and 0 <= j < n):
                raise InputError(f"node index out of range: {i},{j}", lineno, path)
            if km < 0 or not math.isfinite(km):
                raise InputError(f"distance must be finite and >= 0, got {km!r}", lineno, path)
            if i == j:
                if km != 0:
                    raise InputError("self-distance must be 0", lineno, path)
                continue
            if not np.isnan(d[i, j]) and d[i, j] != km:
                raise InputError(f"conflicting distance for pair {i},{j}", lineno, path)
            d[i, j] = d[j, i] = km
    if np.isnan(d).any():
        i, j = np.argwhere(np.isnan(d))[0]
        raise InputError(f"missing distance for pair {i},{j}", path=path)
    return d


def pairwise_distances(nodes: NodeTable) -> np.ndarray:
    """Great-circle (haversine) distances in km; exactly symmetric."""
    phi = np.radians(nodes.lat)
    lam = np.radians(nodes.lon)
    dphi = phi[None, :] - phi[:, None]
    dlam = lam[None, :] - lam[:, None]
    a = np.sin(dphi / 2) ** 2 + np.cos(phi[:, None]) * np.cos(phi[None, :]) * np.sin(dlam / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    d = np.triu(d, 1)
    return d + d.T


def gravity_matrix(nodes: NodeTable, dist: np.ndarray, D: float) -> MobilityMatrix:
    """Gravity mobility with exponential distance deterrence.

    ``Q[i, j] = H_j exp(-d_ij / D) / sum_{k != i} H_k exp(-d_ik / D)``,
    computed in log space so large ``d / D`` does not underflow whole rows.
    """
    if not D > 0:
        raise InputError(f"D must be > 0, got {D!r}")
    n = len(nodes.population)
    if n < 2:
        raise InputError("gravity matrix needs N >= 2")
    dist = np.asarray(dist, dtype=float)
    if dist.shape != (n, n):
        raise InputError(f"distance matrix shape {dist.shape} does not match N={n}")
    logw = np.log(nodes.population.astype(float))[None, :] - dist / D
    np.fill_diagonal(logw, -np.inf)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    Q = w / w.sum(axis=1, keepdims=True)
    Q.setflags(write=False)
    return MobilityMatrix(Q, float(D))


def exposure_rates(nodes: NodeTable, params: EpidemicParams) -> np.ndarray:
    """Per-node exposure rate, beta_max scaled by the no-water-access share."""
    return params.beta_max * nodes.no_water_access


def contamination_rates(nodes: NodeTable, params: EpidemicParams) -> np.ndarray:
    """Per-node contamination rate, theta_max scaled by the no-toilet share."""
    return params.theta_max * nodes.no_toilet_access


def local_r0(node: Node, params: EpidemicParams) -> float:
    """Local basic reproduction number of an isolated community."""
    denom = params.mu_B * (params.gamma + params.alpha + params.mu)
    if denom <= 0:
        raise InputError("R0 undefined: mu_B * (gamma + alpha + mu) is zero")
    beta = params.beta_max * node.no_water_access
    theta = params.theta_max * node.no_toilet_access
    return theta * beta * params.sigma / denom


def local_r0_all(nodes: NodeTable, params: EpidemicParams) -> np.ndarray:
    return np.array([local_r0(n, params) for n in nodes])


def node_strength(Q, mode: str = "in") -> np.ndarray:
    """Weighted degree of each node: ``in`` = column sums, ``out`` = row sums."""
    Q = Q.Q if isinstance(Q, MobilityMatrix) else np.asarray(Q)
    if mode == "in":
        return Q.sum(axis=0)
    if mode == "out":
        return Q.sum(axis=1)
    raise ValueError(f"mode must be 'in' or 'out', got {mode!r}")


def rank_by_strength(Q, mode: str = "in", candidates=None) -> list[int]:
    """Node ids by descending strength; ties go to the smaller id."""
    s = node_strength(Q, mode)
    ids = range(len(s)) if candidates is None else candidates
    return sorted(ids, key=lambda i: (-s[i], i))


# -- small-world statistics ---------------------------------------------------

CLUSTERING_METHOD = "fagiolo-onnela directed weighted (geometric mean of max-normalized weights)"


@dataclass(frozen=True)
class SmallWorldReport:
    avg_shortest_path: float
    weighted_clustering: float
    path_min: float
    path_max: float
    clustering_min: float
    clustering_max: float
    n_permutations: int
    seed: int
    clustering_method: str = CLUSTERING_METHOD
    path_length: str = "1/weight"

    def to_text(self) -> str:
        rows = [
            ("avg_shortest_path", self.avg_shortest_path),
            ("weighted_clustering", self.weighted_clustering),
            ("ensemble_path_min", self.path_min),
            ("ensemble_path_max", self.path_max),
            ("ensemble_clustering_min", self.clustering_min),
            ("ensemble_clustering_max", self.clustering_max),
            ("n_permutations", self.n_permutations),
            ("seed", self.seed),
            ("clustering_method", self.clustering_method),
            ("path_length", self.path_length),
        ]
        return "".join(f"{k} = {repr(v) if isinstance(v, float) else v}\n" for k, v in rows)


def average_shortest_path(W: np.ndarray) -> float:
    """Mean directed shortest-path length over ordered pairs, edge length 1/w.

    Zero weights are missing edges; returns ``inf`` if some pair is unreachable.
    """
    W = np.asarray(W, dtype=float)
    n = W.shape[0]
    lengths = np.zeros_like(W)
    mask = W > 0
    lengths[mask] = 1.0 / W[mask]
    np.fill_diagonal(lengths, 0.0)
    sp = shortest_path(lengths, method="D", directed=True)
    off = sp[~np.eye(n, dtype=bool)]
    return float(off.mean()) if np.all(np.isfinite(off)) else math.inf


def weighted_clustering(W: np.ndarray) -> float:
    """Average directed weighted clustering coefficient.

    Triangle intensities are geometric means of weights normalized by the
    largest weight, summed over all directed triangle patterns.
    """
    W = np.array(W, dtype=float)
    np.fill_diagonal(W, 0.0)
    wmax = W.max()
    if wmax <= 0:
        return 0.0
    A = np.cbrt(W / wmax)
    S = A + A.T
    triangles = np.einsum("ij,jk,ki->i", S, S, S)
    adj = W > 0
    d_tot = adj.sum(axis=0) + adj.sum(axis=1)
    d_bi = (adj & adj.T).sum(axis=1)
    denom = 2.0 * (d_tot * (d_tot - 1) - 2 * d_bi)
    c = np.divide(triangles, denom, out=np.zeros_like(triangles), where=(triangles > 0) & (denom > 0))
    return float(c.mean())


def permute_weights(W: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Shuffle the off-diagonal weights among the off-diagonal positions."""
    W = np.asarray(W, dtype=float)
    off = ~np.eye(W.shape[0], dtype=bool)
    out = np.zeros_like(W)
    out[off] = rng.permutation(W[off])
    return out


def small_world_stats(Q, n_perm: int = 100, seed: int = 0) -> SmallWorldReport:
    """Path length and clustering of ``Q`` against a weight-permuted ensemble."""
    if n_perm < 1:
        raise ValueError("n_perm must be >= 1")
    W = Q.Q if isinstance(Q, MobilityMatrix) else np.asarray(Q)
    paths, clus = [], []
    for child in np.random.SeedSequence(seed).spawn(n_perm):
        Wp = permute_weights(W, np.random.default_rng(child))
        paths.append(average_shortest_path(Wp))
        clus.append(weighted_clustering(Wp))
    return SmallWorldReport(
        avg_shortest_path=average_shortest_path(W),
        weighted_clustering=weighted_clustering(W),
        path_min=float(min(paths)),
        path_max=float(max(paths)),
        clustering_min=float(min(clus)),
        clustering_max=float(max(clus)),
        n_permutations=int(n_perm),
        seed=int(seed),
    )


# -- synthetic networks --------------------------------------------------------

def synthetic_nodes(
    n: int,
    seed: int = 0,
    extent_km: float = 300.0,
    log10_population: tuple[float, float] = (2.7, 4.7),
    access: tuple[float, float] = (0.2, 1.0),
    center: tuple[float, float] = (-29.0, 30.5),
) -> NodeTable:
    """Random community table for desk-scale experiments.

    Nodes are scattered uniformly in a square of side ``extent_km`` around
    ``center`` (lat, lon); populations are log-uniform and the two access
    deficits are independently uniform on ``access``.
    """
    rng = np.random.default_rng(seed)
    x = rng.uniform(-extent_km / 2, extent_km / 2, n)
    y = rng.uniform(-extent_km / 2, extent_km / 2, n)
    lat = center[0] + np.degrees(y / EARTH_RADIUS_KM)
    lon = center[1] + np.degrees(x / (EARTH_RADIUS_KM * math.cos(math.radians(center[0]))))
    pop = np.rint(10 ** rng.uniform(*log10_population, n)).astype(np.int64)
    water = rng.uniform(*access, n)
    toilet = rng.uniform(*access, n)
    return NodeTable.from_arrays(lat, lon, pop, water, toilet)
