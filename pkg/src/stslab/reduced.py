"""Two-scalar description of gradient descent along the aligned manifold.

With W = C * blockdiag(0, I - 11^T/T) and V = alpha * [I | 0] (one-hot PE),
population gradient descent stays on that manifold and reduces to a discrete
recursion on (C, alpha). For random encodings only two-sided bounds on the
in-subset attention are available, so that side is bounds-only.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import exp, log

import numpy as np

TRAJECTORY_COLUMNS = ("t", "C", "alpha", "s_plus", "loss_closed_form")


@dataclass(frozen=True)
class ReducedState:
    C: float = 0.0
    alpha: float = 0.0
    t: int = 0


def s_plus_onehot(C: float, T: int, q: int) -> float:
    """Attention on each in-subset position: 1 / (q + (T - q) e^{-C})."""
    if C > 700:  # e^{-C} underflows to 0 anyway
        return 1.0 / q
    return 1.0 / (q + (T - q) * exp(-C))


def alpha_star(s_plus: float, T: int, q: int) -> float:
    """Stationary value scale for fixed s_plus."""
    if not (0 < s_plus <= 1.0 / q + 1e-15):
        raise ValueError(f"s_plus must lie in (0, 1/q], got {s_plus}")
    return (T - q) * s_plus / (T * q * s_plus ** 2 - 2 * q * s_plus + 1)


def loss_closed_form(alpha: float, s_plus: float, T: int, q: int, d: int) -> float:
    """Population loss on the aligned manifold."""
    return d / (2 * (T - q)) * ((T - q) * q * (alpha * s_plus - 1.0 / q) ** 2
                                + alpha ** 2 * (1 - q * s_plus) ** 2)


def increments(C: float, alpha: float, T: int, q: int, d: int) -> tuple[float, float]:
    """(dC, dalpha) per unit learning rate: minus the population gradient
    projected on the two manifold directions."""
    s = s_plus_onehot(C, T, q)
    da = s * (1 - alpha * (T * q * s ** 2 - 2 * q * s + 1) / ((T - q) * s))
    dC = alpha * d / (T - 1) * s * (1 - q * s) * (1 + q * alpha / (T - q) * (1 - T * s))
    return dC, da


def step_onehot(state: ReducedState, eta: float, T: int, q: int, d: int) -> ReducedState:
    dC, da = increments(state.C, state.alpha, T, q, d)
    return ReducedState(state.C + eta * dC, state.alpha + eta * da, state.t + 1)


def simulate_onehot(T: int, q: int, d: int, eta: float, steps: int,
                    init: ReducedState = ReducedState(), check_monotone: bool = True):
    """Run the recursion; returns an array with columns t, C, alpha, s_plus, loss.

    With ``check_monotone`` an AssertionError is raised if C ever decreases
    (it cannot from zero initialisation with a theorem-compliant step size).
    """
    out = np.empty((steps + 1, 5))
    st = init
    for k in range(steps + 1):
        s = s_plus_onehot(st.C, T, q)
        out[k] = (st.t, st.C, st.alpha, s, loss_closed_form(st.alpha, s, T, q, d))
        if k == steps:
            break
        nxt = step_onehot(st, eta, T, q, d)
        if check_monotone and nxt.C < st.C - 1e-15:
            raise AssertionError(f"C decreased at t={st.t}: {st.C} -> {nxt.C}")
        st = nxt
    return out


def s_plus_bounds_stochastic(C: float, T: int, q: int, delta: float) -> tuple[float, float]:
    """Bounds on in-subset attention for W = C * I on the position block,
    valid whenever every out-of-subset |<e_j, e_y>| <= delta / (1 - 2 delta)."""
    if not (0 < delta < 1.0 / 3):
        raise ValueError(f"delta must lie in (0, 1/3), got {delta}")
    lo = 1.0 / (q + (T - q) * exp(-(1 - 3 * delta) * C / (1 - 2 * delta)))
    hi = 1.0 / (q + (T - q) * exp(-(1 - delta) * C / (1 - 2 * delta)))
    return lo, hi


@dataclass(frozen=True)
class ConvergenceReport:
    t_bound_onehot: float
    t_bound_stochastic: float
    delta_used: float
    note: str = "advisory: big-O expressions evaluated with unit constants, log factors dropped"


def convergence_report(T: int, q: int, d: int, eta: float, eps: float,
                       delta: float = 0.1) -> ConvergenceReport:
    """Order-of-magnitude step counts from the convergence theorems.

    These are NOT rigorous: hidden constants and log factors are set to 1.
    Only their scaling in (T, d, eta, eps) is meaningful.
    """
    if eta <= 0 or eps <= 0:
        raise ValueError("eta and eps must be positive")
    onehot = T ** 2 * d / (eta * eps)
    warmup = T ** ((2 - 2 * delta) / (1 - 3 * delta)) / eta
    return ConvergenceReport(onehot, warmup + onehot, delta)


def stage_one_threshold(T: int, q: int) -> float:
    """C at which s_plus reaches 1/(2q): log((T - q)/q)."""
    return log((T - q) / q)
