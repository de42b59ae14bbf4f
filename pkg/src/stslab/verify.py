"""Property suites behind ``sts verify``, reported as TAP lines.

Each check returns (ok, detail). Suites are small enough that ``all`` runs
in well under a minute on one core.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import fcn as fcn_mod
from . import model
from .encoding import (ONE_HOT, RADEMACHER, EXACT, PosEncoding, check_rip_exact, one_hot_pe,
                       rademacher_matrix, rip_constant, sample_rip_pe, subset_encoding,
                       subset_encoding_batch, verify_dual_certificate)
from .numerics import RngStream, softmax_col
from .reduced import (alpha_star, s_plus_bounds_stochastic, s_plus_onehot, simulate_onehot,
                      ReducedState, step_onehot)
from .task import TaskConfig, sample_batch

SUITES = ("encoding", "gradients", "reduced", "bounds")


# --- finite differences ------------------------------------------------------------

def numeric_gradient(f, arrays, h: float = 1e-5):
    """Five-point central differences of ``f(list_of_arrays)``.

    The arrays are copied to long double and perturbed there, so ``f``
    should evaluate in long double too; that keeps round-off near 1e-19
    and makes the differences an oracle well below 1e-6 relative error.
    """
    work = [np.array(A, dtype=np.longdouble) for A in arrays]
    h = np.longdouble(h)
    out = []
    for A in work:
        G = np.zeros(A.shape)
        for i in np.ndindex(A.shape):
            a0 = A[i]
            vals = []
            for s in (2, 1, -1, -2):
                A[i] = a0 + s * h
                vals.append(f(work))
            A[i] = a0
            G[i] = float((-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h))
        out.append(G)
    return out


def rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest coordinate-wise |a - n| / max(|a|, |n|, floor)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / den)))
    return worst


def attention_loss_ld(W, V, X, E, Ey, xq, target):
    """Reference mean loss, one sample at a time, in long double."""
    total = np.longdouble(0)
    for k in range(X.shape[0]):
        Z = np.vstack([X[k], E]).astype(np.longdouble)
        z = np.concatenate([xq[k], Ey[k]]).astype(np.longdouble)
        u = Z.T @ (W @ z)
        w = np.exp(u - u.max())
        r = target[k] - V @ (Z @ (w / w.sum()))
        total += r @ r / 2
    return total / X.shape[0]


def fcn_loss_ld(arrays, n_layers, activation, A, target):
    layers, biases = arrays[:n_layers], arrays[n_layers:] or None
    h = A.astype(np.longdouble)
    for k, W in enumerate(layers):
        h = h @ W.T + (biases[k] if biases else 0)
        if k < n_layers - 1:
            h = np.maximum(h, 0) if activation == "relu" else np.tanh(h)
    r = h - target
    return np.sum(r * r) / (2 * A.shape[0])


def attention_fd_error(rng: RngStream, T=6, q=2, d=3, d_e=None, kind=RADEMACHER, n=4,
                       grad_fn=None) -> float:
    """Analytic vs numeric gradient for one random instance."""
    grad_fn = grad_fn or model.fixed_gradients
    cfg = TaskConfig(T, q, d)
    if kind == ONE_HOT:
        pe = one_hot_pe(T)
    else:
        pe = PosEncoding(RADEMACHER, rademacher_matrix(rng, d_e or 2 * T + 4, T))
    params = model.ModelParams(rng.normal((d + pe.d_e,) * 2) * 0.7,
                               rng.normal((d, d + pe.d_e)) * 0.7)
    batch = sample_batch(rng, cfg, n)
    xq = rng.normal((n, d))
    g, _ = grad_fn(params, batch, pe, xq)
    Ey = subset_encoding_batch(pe, batch.Y)
    num = numeric_gradient(
        lambda a: attention_loss_ld(a[0], a[1], batch.X, pe.E, Ey, xq, batch.target),
        [params.W, params.V])
    return rel_error([g.dW, g.dV], num)


def fcn_fd_error(rng: RngStream, T=5, q=2, d=2, widths=(7, 6), n=5, bias=True) -> float:
    cfg = TaskConfig(T, q, d)
    p = fcn_mod.init_fcn(rng, fcn_mod.fcn_input_dim(T, q, d), widths, d, bias=bias)
    if p.biases is not None:
        p.biases = [rng.normal(b.shape) * 0.3 for b in p.biases]
    b = sample_batch(rng, cfg, n)
    A = fcn_mod.fcn_inputs(b.X, b.Y)
    g, _ = fcn_mod.fcn_gradients(p, A, b.target)
    L = len(p.layers)
    num = numeric_gradient(lambda a: fcn_loss_ld(a, L, p.activation, A, b.target),
                           p.arrays(), h=1e-5)
    return rel_error(g.arrays(), num)


# --- suite bodies -------------------------------------------------------------------

def _encoding_checks(rng):
    pe = one_hot_pe(7)
    Y = np.array([[0, 3], [2, 6], [1, 5]])
    ok = np.array_equal(subset_encoding_batch(pe, Y), (np.eye(7)[Y].sum(axis=1)))
    yield "one-hot subset encoding is the q-hot vector", ok, ""

    # Gram path on an orthonormal Rademacher-like matrix must match the sum path.
    H = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]]) / 2.0
    e_sum = H[:, [0, 2]].sum(axis=1)
    e_gram = subset_encoding(PosEncoding(RADEMACHER, H), (0, 2)).e_y
    yield "Gram solve equals summation when Gram = I", np.allclose(e_sum, e_gram, atol=1e-14), ""

    worst_in, worst_out, worst_norm = 0.0, 0.0, 0.0
    delta, T, q = 0.1, 12, 3
    for k in range(5):
        pe = sample_rip_pe(rng.child(k), 4000, T, q, delta, mode=EXACT)
        for y in rng.gen.choice(T, size=(10, q), replace=True):
            if len(set(y)) < q:
                continue
            rep = verify_dual_certificate(pe, subset_encoding(pe, y))
            worst_in = max(worst_in, rep.max_in_err)
            worst_out = max(worst_out, rep.max_out)
            worst_norm = max(worst_norm, rep.norm)
    yield ("dual certificate in-set 1 +- 1e-9", worst_in <= 1e-9, f"max err {worst_in:.2e}")
    yield ("dual certificate out-of-set <= delta/(1-2delta)",
           worst_out <= delta / (1 - 2 * delta), f"max {worst_out:.4f}")
    yield ("dual certificate norm <= sqrt(q)/(1-2delta)",
           worst_norm <= np.sqrt(q) / (1 - 2 * delta), f"max {worst_norm:.4f}")

    E = rademacher_matrix(rng, 40, 10)
    dhat = rip_constant(E, 2)
    yield ("exact RIP check agrees with the measured constant",
           check_rip_exact(E, 2, dhat + 1e-9) and not check_rip_exact(E, 2, dhat - 1e-6),
           f"delta_hat {dhat:.4f}")


def _gradient_checks(rng, grad_fn=None):
    att = max(attention_fd_error(rng.child(k), kind=RADEMACHER if k % 2 else ONE_HOT,
                                 grad_fn=grad_fn) for k in range(10))
    yield "attention gradients match finite differences", att <= 1e-6, f"max rel {att:.2e}"
    f = max(fcn_fd_error(rng.child(100 + k)) for k in range(10))
    yield "FCN gradients match finite differences", f <= 1e-6, f"max rel {f:.2e}"

    T, q, d = 6, 2, 3
    pe = one_hot_pe(T)
    p = model.ModelParams.zeros(d, T)
    p.V[:] = rng.normal(p.V.shape) * 0.5
    p.W[d:, d:] = rng.normal((T, T))
    g = model.population_gradients(p, pe, q)
    # Rows d: of W are the only W entries the closed form can be perturbed in.
    W0 = p.W.copy()

    def pop_loss(a):
        W0[d:] = a[0]
        return model.population_loss(model.ModelParams(W0, a[1].astype(float)), pe, q)

    num = numeric_gradient(pop_loss, [p.W[d:], p.V], h=1e-4)
    err = rel_error([g.dW[d:], g.dV], num)
    yield "population gradient matches finite differences", err <= 1e-6, f"max rel {err:.2e}"


def _reduced_checks(rng):
    T, q, d, eta = 20, 2, 4, 0.05
    traj = simulate_onehot(T, q, d, eta, 2000)
    pe = one_hot_pe(T)
    p = model.ModelParams.zeros(d, T)
    worst = 0.0
    for k in range(2000):
        g = model.population_gradients(p, pe, q)
        p.W -= eta * g.dW
        p.V -= eta * g.dV
        C, a, _ = model.extract_scalars(p, ONE_HOT)
        worst = max(worst, abs(C - traj[k + 1, 1]), abs(a - traj[k + 1, 2]))
    yield "full population GD stays on the (C, alpha) recursion", worst <= 1e-10, \
        f"max dev {worst:.2e}"
    st = step_onehot(ReducedState(), 0.3, T, q, d)
    yield "first step from zero gives (0, eta/T)", st.C == 0.0 and abs(st.alpha - 0.3 / T) < 1e-15, ""
    s = np.linspace(1 / T, 1 / q, 200)[1:-1]
    yield "alpha_star >= 1 inside (1/T, 1/q)", bool(np.all([alpha_star(v, T, q) >= 1 for v in s])), ""
    mono = bool(np.all(np.diff(traj[:, 1]) >= 0))
    yield "C is non-decreasing along the trajectory", mono, ""


def _bounds_checks(rng):
    T, q, delta = 16, 2, 0.3
    bad = 0
    trials = 0
    for k in range(10):
        pe = sample_rip_pe(rng.child(k), 400, T, q, delta, mode=EXACT)
        Y = np.sort(np.array([rng.gen.choice(T, q, replace=False) for _ in range(30)]), axis=1)
        Ey = subset_encoding_batch(pe, Y)
        for C in (1.0, 5.0, 10.0):
            S = softmax_col(C * (Ey @ pe.E))
            lo, hi = s_plus_bounds_stochastic(C, T, q, delta)
            sp = np.take_along_axis(S, Y, axis=1)
            bad += int(np.sum((sp < lo - 1e-12) | (sp > hi + 1e-12)))
            trials += sp.size
    yield "in-subset attention inside the two-sided bound", bad == 0, f"{bad}/{trials} outside"

    T, q, d, eps = 50, 3, 3, 0.1
    params = model.construct_expressivity(d, 80, model.expressivity_alpha(eps, T))
    worst = 0.0
    for k in range(10):
        E = sample_rip_pe(rng.child(50 + k), 80, T, q, 0.1, threshold=0.6).E
        b = sample_batch(rng.child(60 + k), TaskConfig(T, q, d), 100)
        p = model.batch_pass(params, b, PosEncoding(RADEMACHER, E))
        worst = max(worst, float(np.linalg.norm(b.target - p.out, axis=1).max()))
    yield "attention construction reaches sup error <= eps", worst <= eps, f"max {worst:.2e}"

    T, q, d, m = 8, 2, 2, 13
    worst_gap, worst_err = 0.0, np.inf
    for k in range(10):
        p = fcn_mod.init_fcn(rng.child(200 + k), fcn_mod.fcn_input_dim(T, q, d), (m, m), d)
        pair = fcn_mod.adversarial_pair(p, T, q, d)
        out_a, out_b = fcn_mod.fcn_forward(p, pair.input_a), fcn_mod.fcn_forward(p, pair.input_b)
        worst_gap = max(worst_gap, float(np.abs(out_a - out_b).max()))
        worst_err = min(worst_err, max(fcn_mod.pair_errors(p, pair, T, q, d)))
    yield "adversarial pair gives identical FCN outputs", worst_gap <= 1e-9, f"gap {worst_gap:.1e}"
    yield "adversarial pair error norm >= 1/(2q)", worst_err >= 1 / (2 * q) - 1e-8, \
        f"min {worst_err:.4f}"
    yield "lower bound value at T=8, q=2", abs(fcn_mod.lower_bound_value(8, 2) - 6 / 112) < 1e-15, ""
    yield "one-hot attention closed form", abs(
        softmax_col(3.0 * np.eye(10)[[1, 4]].sum(axis=0))[1] - s_plus_onehot(3.0, 10, 2)) < 1e-12, ""


# --- runner -----------------------------------------------------------------------------

@dataclass
class SuiteResult:
    lines: list
    failed: int
    seconds: float


def run(suites, seed: int = 0, grad_fn=None, emit=print) -> SuiteResult:
    """Run the named suites; ``emit`` receives each TAP line as it is produced."""
    names = SUITES if "all" in suites else tuple(suites)
    for s in names:
        if s not in SUITES:
            raise ValueError(f"unknown suite {s!r}")
    bodies = {"encoding": _encoding_checks, "gradients": lambda r: _gradient_checks(r, grad_fn),
              "reduced": _reduced_checks, "bounds": _bounds_checks}
    t0 = time.time()
    lines, failed, n = [], 0, 0
    for i, s in enumerate(names):
        rng = RngStream(seed, "eval", (900 + i,))
        for desc, ok, detail in bodies[s](rng):
            n += 1
            failed += 0 if ok else 1
            line = f"{'ok' if ok else 'not ok'} {n} - {s}: {desc}" + (f" # {detail}" if detail else "")
            lines.append(line)
            emit(line)
    emit(f"1..{n}")
    return SuiteResult(lines, failed, time.time() - t0)
