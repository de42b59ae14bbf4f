"""Fully-connected baseline on the flattened input [x_1, ..., x_T, y].

The subset y is appended as raw 1-based indices (or as a T-long q-hot
vector with ``qhot=True``). Layers are W_L act(... act(W_1 x)), biases off
by default. Two width lower bounds are checked here: an average-case
Monte-Carlo check and an explicit adversarial pair that any first layer
narrower than (T - q + 1) d cannot tell apart.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotApplicableError, ShapeError
from .numerics import RngStream, null_space_vector
from .task import Batch, TaskConfig, sample_batch, sts_target

_ACT = {
    "relu": (lambda h: np.maximum(h, 0.0), lambda h: (h > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda h: 1.0 - np.tanh(h) ** 2),
    "identity": (lambda h: h, lambda h: np.ones_like(h)),
}


@dataclass
class FcnParams:
    layers: list
    activation: str = "relu"
    biases: list | None = None
    qhot: bool = False

    def __post_init__(self):
        if self.activation not in _ACT:
            raise ValueError(f"unknown activation {self.activation!r}")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.shape[1] != a.shape[0]:
                raise ShapeError(f"layer shapes do not compose: {a.shape} then {b.shape}")
        if self.biases is not None and len(self.biases) != len(self.layers):
            raise ShapeError("need one bias vector per layer")

    @property
    def width(self) -> int:
        return self.layers[0].shape[0]

    @property
    def in_dim(self) -> int:
        return self.layers[0].shape[1]

    def arrays(self) -> list:
        return list(self.layers) + (list(self.biases) if self.biases is not None else [])

    def copy(self) -> "FcnParams":
        return FcnParams([w.copy() for w in self.layers], self.activation,
                         None if self.biases is None else [b.copy() for b in self.biases],
                         self.qhot)


def init_fcn(rng: RngStream, in_dim: int, widths, out_dim: int, activation: str = "relu",
             bias: bool = False, qhot: bool = False) -> FcnParams:
    """He-scaled Gaussian init; the output layer uses variance 1/fan_in."""
    dims = [in_dim, *widths, out_dim]
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        gain = 1.0 if k == len(dims) - 2 else 2.0
        layers.append(rng.normal((fan_out, fan_in)) * np.sqrt(gain / fan_in))
    biases = [np.zeros(w.shape[0]) for w in layers] if bias else None
    return FcnParams(layers, activation, biases, qhot)


def fcn_input_dim(T: int, q: int, d: int, qhot: bool = False) -> int:
    return d * T + (T if qhot else q)


def fcn_input(X, y, qhot: bool = False) -> np.ndarray:
    """Flatten one (d, T) token matrix and its 0-based subset y."""
    X = np.asarray(X, dtype=np.float64)
    return fcn_inputs(X[None], np.asarray([y]), qhot)[0]


def fcn_inputs(X, Y, qhot: bool = False) -> np.ndarray:
    """Batched inputs: tokens in order x_1..x_T, then y (1-based) or q-hot."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y)
    n, d, T = X.shape
    xs = np.transpose(X, (0, 2, 1)).reshape(n, d * T)
    if qhot:
        tail = np.zeros((n, T))
        np.put_along_axis(tail, Y, 1.0, axis=1)
    else:
        tail = Y.astype(np.float64) + 1.0
    return np.concatenate([xs, tail], axis=1)


def split_input(inp, T: int, q: int, d: int, qhot: bool = False):
    """Inverse of :func:`fcn_input`: returns (X, y) with 0-based y."""
    inp = np.asarray(inp, dtype=np.float64)
    X = inp[:d * T].reshape(T, d).T
    tail = inp[d * T:]
    y = np.flatnonzero(tail > 0.5) if qhot else np.rint(tail).astype(np.int64) - 1
    return X, tuple(int(i) for i in y)


def _forward_cache(params: FcnParams, A):
    act, _ = _ACT[params.activation]
    pre, post = [], [A]
    h = A
    for k, W in enumerate(params.layers):
        z = h @ W.T
        if params.biases is not None:
            z = z + params.biases[k]
        pre.append(z)
        h = z if k == len(params.layers) - 1 else act(z)
        post.append(h)
    return pre, post


def fcn_forward(params: FcnParams, inp) -> np.ndarray:
    """Evaluate on one flat input or a (n, in_dim) stack."""
    A = np.asarray(inp, dtype=np.float64)
    if A.shape[-1] != params.in_dim:
        raise ShapeError(f"input length {A.shape[-1]} != first-layer fan-in {params.in_dim}")
    single = A.ndim == 1
    out = _forward_cache(params, np.atleast_2d(A))[1][-1]
    return out[0] if single else out


@dataclass
class FcnGrads:
    layers: list
    biases: list | None = None

    def arrays(self) -> list:
        return list(self.layers) + (list(self.biases) if self.biases is not None else [])


def fcn_gradients(params: FcnParams, inputs, targets):
    """Gradient of mean 0.5 * ||target - f(x)||^2; returns (grads, loss)."""
    A = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    Yt = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    n = A.shape[0]
    _, dact = _ACT[params.activation]
    pre, post = _forward_cache(params, A)
    r = post[-1] - Yt
    loss = 0.5 * float(np.sum(r * r)) / n
    delta = r / n
    gW = [None] * len(params.layers)
    gb = [None] * len(params.layers) if params.biases is not None else None
    for k in range(len(params.layers) - 1, -1, -1):
        gW[k] = delta.T @ post[k]
        if gb is not None:
            gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ params.layers[k]) * dact(pre[k - 1])
    return FcnGrads(gW, gb), loss


def lower_bound_value(T: int, q: int) -> float:
    """Average-case squared-error floor (T - q) / (T q (T - 1)) for narrow FCNs."""
    if not (1 <= q < T):
        raise ValueError(f"need 1 <= q < T, got q={q}, T={T}")
    return (T - q) / (T * q * (T - 1))


@dataclass(frozen=True)
class AdversarialPair:
    input_a: np.ndarray
    input_b: np.ndarray
    y: tuple[int, ...]       # 0-based
    xi: np.ndarray           # (T - q + 1, d) token block placed on tokens q..T


def adversarial_pair(params: FcnParams, T: int, q: int, d: int) -> AdversarialPair:
    """Two inputs with equal first-layer pre-activations but targets 1/q apart.

    Tokens q..T (1-based) carry +xi or -xi with xi in the kernel of the
    matching W_1 columns, scaled so its largest token has norm 1/2. The
    subset is (1, ..., q-1, j*) where j* holds that largest token.
    """
    k = T - q + 1
    if params.width > k * d - 1:
        raise NotApplicableError(
            f"first-layer width {params.width} exceeds (T-q+1)d-1 = {k * d - 1}")
    lo = (q - 1) * d
    u = null_space_vector(params.layers[0][:, lo:T * d]).reshape(k, d)
    norms = np.linalg.norm(u, axis=1)
    xi = u / (2.0 * norms.max())
    j_star = q - 1 + int(np.argmax(norms))   # 0-based; first maximiser wins
    y = tuple(range(q - 1)) + (j_star,)
    X = np.zeros((d, T))
    X[:, q - 1:] = xi.T
    a = fcn_input(X, y, params.qhot)
    b = fcn_input(-X, y, params.qhot)
    return AdversarialPair(a, b, y, xi)


def pair_errors(params: FcnParams, pair: AdversarialPair, T: int, q: int, d: int):
    """Unsquared errors ||f(x) - STS_q(x)|| for both inputs of the pair."""
    out = []
    for inp in (pair.input_a, pair.input_b):
        X, y = split_input(inp, T, q, d, params.qhot)
        out.append(float(np.linalg.norm(fcn_forward(params, inp) - sts_target(X, list(y)))))
    return tuple(out)


@dataclass(frozen=True)
class FcnReport:
    T: int
    q: int
    d: int
    width: int
    mc_loss: float
    std_err: float
    bound: float
    applicable: bool
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("T", "q", "d", "width", "mc_loss", "std_err", "bound", "applicable")}
        out.update(self.extra)
        return out


def mc_squared_error(params: FcnParams, cfg: TaskConfig, n_eval: int, rng: RngStream,
                     chunk: int = 100_000):
    """Mean and standard error of the un-halved ||f - STS_q||^2."""
    if n_eval < 1:
        raise ValueError("n_eval must be positive")
    total, total2, done, k = 0.0, 0.0, 0, 0
    while done < n_eval:
        m = min(chunk, n_eval - done)
        b = sample_batch(rng.child(k), cfg, m)
        err = fcn_forward(params, fcn_inputs(b.X, b.Y, params.qhot)) - b.target
        e2 = np.sum(err * err, axis=1)
        total += float(e2.sum())
        total2 += float(np.sum(e2 * e2))
        done += m
        k += 1
    mean = total / n_eval
    var = max(total2 / n_eval - mean * mean, 0.0)
    se = np.sqrt(var / max(n_eval - 1, 1)) if n_eval > 1 else 0.0
    return mean, float(se)


def fcn_report(params: FcnParams, cfg: TaskConfig, n_eval: int, rng: RngStream) -> FcnReport:
    mean, se = mc_squared_error(params, cfg, n_eval, rng)
    return FcnReport(cfg.T, cfg.q, cfg.d, params.width, mean, se,
                     lower_bound_value(cfg.T, cfg.q), params.width <= cfg.T * cfg.d - 1)


def verify_average_bound(params: FcnParams, cfg: TaskConfig, n_eval: int,
                         rng: RngStream) -> FcnReport:
    """Like :func:`fcn_report` but refuses widths the bound does not cover."""
    if params.width > cfg.T * cfg.d - 1:
        raise NotApplicableError(
            f"first-layer width {params.width} exceeds Td-1 = {cfg.T * cfg.d - 1}")
    return fcn_report(params, cfg, n_eval, rng)


def train_fcn(params: FcnParams, cfg: TaskConfig, steps: int, batch: int, optimizer,
              rng: RngStream, log_every: int = 0):
    """Online training on fresh batches; returns (params, [(step, loss), ...]).

    ``optimizer`` is any object with ``step(arrays, grads, t)`` from the
    trainer module; arrays are updated in place.
    """
    p = params.copy()
    hist = []
    for t in range(steps):
        b = sample_batch(rng.child(t), cfg, batch)
        g, loss = fcn_gradients(p, fcn_inputs(b.X, b.Y, p.qhot), b.target)
        if log_every and t % log_every == 0:
            hist.append((t, loss))
        optimizer.step(p.arrays(), g.arrays(), t)
    return p, hist


def batch_inputs(b: Batch, qhot: bool = False) -> np.ndarray:
    return fcn_inputs(b.X, b.Y, qhot)
