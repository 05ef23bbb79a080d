"""Stochastic spatially explicit SIRB model of waterborne transmission.

State per node: integer susceptible, infected (symptomatic) and recovered
counts plus a dimensionless bacterial concentration ``B`` (concentration over
the half-saturation constant), so the dose-response is ``B / (1 + B)`` and
the contamination input per window is ``theta_i * I_i / H_i``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._kernel import run_sirb
from .errors import InputError
from .network import MobilityMatrix, NodeTable, contamination_rates, exposure_rates
from .params import EpidemicParams

CENSORED = -1

EVENT_NAMES = (
    "birth",
    "susceptible_death",
    "symptomatic_infection",
    "infected_death",
    "cholera_death",
    "recovery",
    "asymptomatic_infection",
    "recovered_death",
    "immunity_loss",
)

# (dS, dI, dR) for each event, in EVENT_NAMES order
EVENT_TRANSITIONS = np.array(
    [
        (1, 0, 0),
        (-1, 0, 0),
        (-1, 1, 0),
        (0, -1, 0),
        (0, -1, 0),
        (0, -1, 1),
        (-1, 0, 1),
        (0, 0, -1),
        (1, 0, -1),
    ],
    dtype=np.int64,
)


@dataclass
class EpidemicState:
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    B: np.ndarray
    t: float = 0.0

    def copy(self) -> "EpidemicState":
        return EpidemicState(self.S.copy(), self.I.copy(), self.R.copy(), self.B.copy(), self.t)


@dataclass(frozen=True)
class Trajectory:
    """Grid samples of one realization; arrays have shape ``(T, N)``."""

    t: np.ndarray
    S: np.ndarray
    I: np.ndarray
    R: np.ndarray
    B: np.ndarray
    cum_cases: np.ndarray
    cum_infections: np.ndarray
    source: int
    seed: object
    population: np.ndarray

    def attack_rate(self, node: int) -> float:
        """Share of the node's population infected after ``t = 0``."""
        new = self.cum_infections[-1, node] - self.cum_infections[0, node]
        return float(new / self.population[node])


@dataclass(frozen=True)
class ArrivalVector:
    """First-arrival day per observer; ``CENSORED`` (-1) if never reached."""

    observers: tuple[int, ...]
    days: np.ndarray
    horizon: int

    @property
    def censored(self) -> np.ndarray:
        return self.days == CENSORED

    @property
    def any_censored(self) -> bool:
        return bool(np.any(self.days == CENSORED))

    def __len__(self):
        return len(self.observers)


def init_state(source: int, nodes: NodeTable, params: EpidemicParams) -> EpidemicState:
    """Seed the source with symptomatic cases and matching asymptomatic recovered."""
    if not 0 <= source < nodes.N:
        raise InputError(f"source {source} is not a node id")
    H = nodes.population.astype(np.int64)
    S = H.copy()
    I = np.zeros_like(H)
    R = np.zeros_like(H)
    i0 = max(1, int(round(params.seed_fraction * H[source])))
    r0 = int(round((1.0 - params.sigma) / params.sigma * i0))
    s0 = int(H[source]) - i0 - r0
    if s0 < 0:
        raise InputError(
            f"seeding source {source} needs {i0 + r0} people but H={H[source]}; "
            "lower seed_fraction or raise sigma"
        )
    S[source], I[source], R[source] = s0, i0, r0
    return EpidemicState(S, I, R, np.zeros(nodes.N), 0.0)


def dose_response(B) -> np.ndarray:
    B = np.asarray(B, dtype=float)
    return B / (1.0 + B)


def force_of_infection(state: EpidemicState, Q, beta, m: float) -> np.ndarray:
    """Per-susceptible infection rate mixing local and visited-node exposure."""
    Qm = Q.Q if isinstance(Q, MobilityMatrix) else np.asarray(Q)
    g = dose_response(state.B)
    return np.asarray(beta) * ((1.0 - m) * g + m * (Qm @ g))


def event_rates(state: EpidemicState, nodes: NodeTable, params: EpidemicParams, F) -> np.ndarray:
    """Rates of the nine per-node events, shape ``(N, 9)`` in ``EVENT_NAMES`` order."""
    H = nodes.population.astype(float)
    S, I, R = (np.asarray(x, dtype=float) for x in (state.S, state.I, state.R))
    F = np.asarray(F, dtype=float)
    p = params
    return np.column_stack(
        [
            p.mu * H,
            p.mu * S,
            p.sigma * F * S,
            p.mu * I,
            p.alpha * I,
            p.gamma * I,
            (1.0 - p.sigma) * F * S,
            p.mu * R,
            p.rho * R,
        ]
    )


def update_bacteria(state: EpidemicState, nodes: NodeTable, theta, mu_B: float, dt: float) -> np.ndarray:
    """Exact solution of the linear bacterial ODE over ``dt`` with ``I`` held fixed."""
    if not dt > 0:
        raise InputError(f"dt must be > 0, got {dt!r}")
    H = nodes.population.astype(float)
    decay = math.exp(-mu_B * dt)
    fixed_point = np.asarray(theta) * np.asarray(state.I, dtype=float) / (H * mu_B)
    return np.asarray(state.B) * decay + fixed_point * (1.0 - decay)


def replicate_seed(master_seed: int, source: int, replicate: int) -> np.random.SeedSequence:
    """Independent stream for one (source, replicate) pair."""
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(source), int(replicate)))


def _generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def _run(source, nodes, Q, params, seed, record):
    state = init_state(source, nodes, params)
    Qm = Q.Q if isinstance(Q, MobilityMatrix) else np.asarray(Q, dtype=float)
    n = nodes.N
    if Qm.shape != (n, n):
        raise InputError(f"mobility matrix shape {Qm.shape} does not match N={n}")
    steps = params.n_steps
    H = nodes.population.astype(np.float64)
    shape = (steps + 1, n) if record else (1, 1)
    outs = [np.zeros(shape, dtype=np.int64) for _ in range(3)]
    outs += [np.zeros(shape, dtype=np.float64) for _ in range(3)]
    arrival = np.empty(n, dtype=np.int64)
    run_sirb(
        _generator(seed),
        H,
        state.S,
        state.I,
        state.R,
        state.B,
        np.ascontiguousarray(exposure_rates(nodes, params), dtype=np.float64),
        np.ascontiguousarray(contamination_rates(nodes, params), dtype=np.float64),
        np.ascontiguousarray(Qm, dtype=np.float64),
        float(params.m),
        float(params.mu),
        float(params.gamma),
        float(params.alpha),
        float(params.sigma),
        float(params.mu_B),
        float(params.rho),
        float(params.dt),
        steps,
        params.arrival_threshold * H,
        record,
        *outs,
        arrival,
    )
    return outs, arrival


def simulate(source: int, nodes: NodeTable, Q, params: EpidemicParams, seed) -> Trajectory:
    """One realization sampled on the ``dt`` grid up to the horizon.

    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``; the same
    seed always reproduces the same trajectory bit for bit.
    """
    (S, I, R, B, C, X), _ = _run(source, nodes, Q, params, seed, True)
    t = np.arange(params.n_steps + 1) * params.dt
    return Trajectory(t, S, I, R, B, C, X, int(source), seed, nodes.population.copy())


def _step_to_day(step: np.ndarray, dt: float) -> np.ndarray:
    # crossing at grid time k*dt belongs to day ceil(k*dt); day 1 is the seeding day
    day = np.ceil(step * dt - 1e-9).astype(np.int64)
    day = np.maximum(day, 1)
    return np.where(step < 0, CENSORED, day)


def simulate_arrivals(source: int, nodes: NodeTable, Q, params: EpidemicParams, seed) -> np.ndarray:
    """First-arrival day at every node (``CENSORED`` if never), no trajectory kept.

    Consumes the random stream exactly as :func:`simulate` does, so the result
    equals ``first_arrival_times(simulate(...), all nodes, threshold)``.
    """
    _, step = _run(source, nodes, Q, params, seed, False)
    return _step_to_day(step, params.dt)


def first_arrival_times(traj: Trajectory, observers, threshold: float) -> ArrivalVector:
    """Day each observer's prevalence first strictly exceeds ``threshold * H``."""
    if not 0 < threshold < 1:
        raise InputError(f"threshold must be in (0, 1), got {threshold!r}")
    observers = tuple(int(o) for o in observers)
    dt = float(traj.t[1] - traj.t[0]) if len(traj.t) > 1 else 1.0
    steps = []
    for o in observers:
        hit = np.nonzero(traj.I[:, o] > threshold * traj.population[o])[0]
        steps.append(hit[0] if hit.size else -1)
    days = _step_to_day(np.array(steps, dtype=np.int64), dt)
    horizon = int(round(traj.t[-1]))
    return ArrivalVector(observers, days, horizon)


def arrival_vector(days_all: np.ndarray, observers, horizon: int) -> ArrivalVector:
    observers = tuple(int(o) for o in observers)
    return ArrivalVector(observers, np.asarray(days_all)[list(observers)].astype(np.int64), horizon)


# -- file formats ----------------------------------------------------------------

def write_trajectory_csv(traj: Trajectory, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "node", "S", "I", "R", "B", "cum_cases"])
        T, N = traj.S.shape
        for k in range(T):
            tk = repr(round(float(traj.t[k]), 10))
            for i in range(N):
                w.writerow([tk, i, int(traj.S[k, i]), int(traj.I[k, i]), int(traj.R[k, i]),
                            repr(float(traj.B[k, i])), int(traj.cum_cases[k, i])])


def write_arrivals_csv(arrivals: ArrivalVector, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["observer_id", "day"])
        for o, d in zip(arrivals.observers, arrivals.days):
            w.writerow([o, int(d)])


def read_arrivals_csv(path, horizon: int = 100) -> ArrivalVector:
    path = Path(path)
    obs, days = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["observer_id", "day"]:
            raise InputError("header must be observer_id,day", 1, path)
        for row in reader:
            if not row:
                continue
            try:
                o, d = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise InputError(f"unparseable row {row!r}", reader.line_num, path) from None
            if d != CENSORED and d < 1:
                raise InputError(f"day must be >= 1 or -1 (censored), got {d}", reader.line_num, path)
            if o in obs:
                raise InputError(f"duplicate observer {o}", reader.line_num, path)
            obs.append(o)
            days.append(d)
    if not obs:
        raise InputError("no arrival rows", path=path)
    return ArrivalVector(tuple(obs), np.array(days, dtype=np.int64), horizon)
