"""Compiled inner loop of the hybrid SIRB simulator.

Human events are simulated exactly (Gillespie direct method) inside each
``dt`` window with the force of infection frozen at its window-start value.
Nodes only interact through the bacterial concentrations, so with ``F``
frozen the nodes evolve independently inside a window and are stepped one
after another. Bacteria are then advanced analytically with the infected
count held at its window-start value.
"""

import math

import numba
import numpy as np


@numba.njit(cache=True)
def run_sirb(
    rng,
    H,
    S,
    I,
    R,
    B,
    beta,
    theta,
    Q,
    m,
    mu,
    gamma,
    alpha,
    sigma,
    mu_B,
    rho,
    dt,
    n_steps,
    thr,
    record,
    out_S,
    out_I,
    out_R,
    out_B,
    out_C,
    out_X,
    arrival_step,
):
    """Advance state arrays in place over ``n_steps`` windows.

    ``arrival_step[i]`` receives the first grid index at which ``I[i] > thr[i]``
    (``-1`` if never). With ``record`` set, the ``out_*`` arrays of shape
    ``(n_steps + 1, N)`` receive S, I, R, B, cumulative symptomatic cases and
    cumulative infections at every grid point.
    """
    N = H.shape[0]
    cum_cases = I.astype(np.float64)
    cum_inf = I.astype(np.float64) + R.astype(np.float64)
    decay = math.exp(-mu_B * dt)
    g = np.empty(N)
    F = np.empty(N)
    I0 = np.empty(N, dtype=np.int64)
    for i in range(N):
        arrival_step[i] = -1

    for k in range(n_steps + 1):
        for i in range(N):
            if arrival_step[i] < 0 and I[i] > thr[i]:
                arrival_step[i] = k
        if record:
            for i in range(N):
                out_S[k, i] = S[i]
                out_I[k, i] = I[i]
                out_R[k, i] = R[i]
                out_B[k, i] = B[i]
                out_C[k, i] = cum_cases[i]
                out_X[k, i] = cum_inf[i]
        if k == n_steps:
            break

        for i in range(N):
            g[i] = B[i] / (1.0 + B[i])
        for i in range(N):
            remote = 0.0
            if m > 0.0:
                for j in range(N):
                    remote += Q[i, j] * g[j]
            F[i] = beta[i] * ((1.0 - m) * g[i] + m * remote)
            I0[i] = I[i]

        for i in range(N):
            Fi = F[i]
            birth = mu * H[i]
            s = S[i]
            inf = I[i]
            rec = R[i]
            t = 0.0
            while True:
                r_sdeath = mu * s
                r_sympt = sigma * Fi * s
                r_ideath = mu * inf
                r_cdeath = alpha * inf
                r_recov = gamma * inf
                r_asympt = (1.0 - sigma) * Fi * s
                r_rdeath = mu * rec
                r_wane = rho * rec
                # cumulative sums in a fixed order; u < c9 == total means a
                # zero-rate channel can never be selected
                c1 = birth
                c2 = c1 + r_sdeath
                c3 = c2 + r_sympt
                c4 = c3 + r_ideath
                c5 = c4 + r_cdeath
                c6 = c5 + r_recov
                c7 = c6 + r_asympt
                c8 = c7 + r_rdeath
                total = c8 + r_wane
                if total <= 0.0:
                    break
                t += -math.log(1.0 - rng.random()) / total
                if t >= dt:
                    break
                u = rng.random() * total
                if u < c1:
                    s += 1
                elif u < c2:
                    s -= 1
                elif u < c3:
                    s -= 1
                    inf += 1
                    cum_cases[i] += 1.0
                    cum_inf[i] += 1.0
                elif u < c4:
                    inf -= 1
                elif u < c5:
                    inf -= 1
                elif u < c6:
                    inf -= 1
                    rec += 1
                elif u < c7:
                    s -= 1
                    rec += 1
                    cum_inf[i] += 1.0
                elif u < c8:
                    rec -= 1
                elif r_wane > 0.0:
                    rec -= 1
                    s += 1
            S[i] = s
            I[i] = inf
            R[i] = rec

        for i in range(N):
            B[i] = B[i] * decay + theta[i] * I0[i] / (H[i] * mu_B) * (1.0 - decay)
