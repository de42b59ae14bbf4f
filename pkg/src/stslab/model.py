"""The reparameterised one-layer attention model f = V Z softmax(Z^T W z_query).

Everything is computed on batches: ``X`` is (n, d, T), ``E`` is either one
shared (d_e, T) encoding or a per-sample stack (n, d_e, T), and the query
encodings ``Ey`` are (n, d_e). Single-sample functions are thin wrappers.

Gradients are the closed forms

    dW = -Z (diag(S) - S S^T) Z^T V^T r z_query^T,   dV = -r (Z S)^T,

with residual r = target - V Z S; they are checked against finite
differences in the test-suite.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import ceil, log

import numpy as np

from .encoding import ONE_HOT, PosEncoding, RipSampler, subset_encoding_batch
from .errors import ShapeError
from .numerics import RngStream, frobenius_cosine, softmax_col, solve_gram_batch
from .task import AssembledInput, Batch, Sample


@dataclass
class ModelParams:
    W: np.ndarray
    V: np.ndarray

    @property
    def d(self) -> int:
        return self.V.shape[0]

    @property
    def d_e(self) -> int:
        return self.V.shape[1] - self.V.shape[0]

    @classmethod
    def zeros(cls, d: int, d_e: int) -> "ModelParams":
        D = d + d_e
        return cls(np.zeros((D, D)), np.zeros((d, D)))

    def copy(self) -> "ModelParams":
        return ModelParams(self.W.copy(), self.V.copy())

    def check(self):
        D = self.V.shape[1]
        if self.W.shape != (D, D) or self.V.shape[0] >= D:
            raise ShapeError(f"inconsistent parameter shapes W{self.W.shape}, V{self.V.shape}")


@dataclass
class Gradients:
    dW: np.ndarray
    dV: np.ndarray

    def __add__(self, other):
        return Gradients(self.dW + other.dW, self.dV + other.dV)

    def scale(self, c: float) -> "Gradients":
        return Gradients(self.dW * c, self.dV * c)


@dataclass(frozen=True)
class GroundTruth:
    W_star: np.ndarray
    V_star: np.ndarray
    pe_kind: str


def ground_truth(d: int, d_e: int, pe_kind: str) -> GroundTruth:
    D = d + d_e
    W = np.zeros((D, D))
    if pe_kind == ONE_HOT:
        W[d:, d:] = np.eye(d_e) - np.ones((d_e, d_e)) / d_e
    else:
        W[d:, d:] = np.eye(d_e)
    V = np.zeros((d, D))
    V[:, :d] = np.eye(d)
    return GroundTruth(W, V, pe_kind)


# --- PE policies -----------------------------------------------------------

@dataclass(frozen=True)
class FixedPE:
    pe: PosEncoding


@dataclass(frozen=True)
class ResamplePerStep:
    """One fresh encoding per gradient step, shared across the batch."""
    sampler: RipSampler


@dataclass(frozen=True)
class Nested:
    """Estimator of the stochastic-architecture gradient.

    The model output E_E[V Z S] inside the residual is averaged over
    ``n_inner`` draws; the outer expectation uses ``n_outer`` further draws.
    """
    sampler: RipSampler
    n_outer: int = 4
    n_inner: int = 4


# --- batched core ------------------------------------------------------------

def _pos_T(E, a):
    """E^T a for each row of a; E shared (d_e, T) or stacked (n, d_e, T)."""
    if E.ndim == 2:
        return a @ E
    return np.einsum("nkt,nk->nt", E, a)


def _pos_mix(E, s):
    """E s for each row of s."""
    if E.ndim == 2:
        return s @ E.T
    return np.einsum("nkt,nt->nk", E, s)


def query_encodings(E, Y, kind: str) -> np.ndarray:
    """e_y per sample for a shared or stacked encoding."""
    if E.ndim == 2:
        return subset_encoding_batch(PosEncoding(kind, E), Y)
    if kind == ONE_HOT:
        return subset_encoding_batch(PosEncoding(kind, E[0]), Y)
    Ey = np.take_along_axis(E, Y[:, None, :], axis=2)  # n x d_e x q
    G = np.einsum("nki,nkj->nij", Ey, Ey)
    coef = solve_gram_batch(G, np.ones(Y.shape))
    return np.einsum("nki,ni->nk", Ey, coef)


@dataclass
class _Pass:
    S: np.ndarray
    ZS: np.ndarray
    out: np.ndarray
    z: np.ndarray


def _forward(params: ModelParams, X, E, Ey, xq) -> _Pass:
    d = X.shape[1]
    z = np.concatenate([xq, Ey], axis=1)
    Wz = z @ params.W.T
    u = np.einsum("ndt,nd->nt", X, Wz[:, :d]) + _pos_T(E, Wz[:, d:])
    S = softmax_col(u)
    ZS = np.concatenate([np.einsum("ndt,nt->nd", X, S), _pos_mix(E, S)], axis=1)
    return _Pass(S, ZS, ZS @ params.V.T, z)


def _grad_terms(params: ModelParams, X, E, p: _Pass, r):
    """Per-sample g = Z J Z^T V^T r, the W-gradient factor before z^T."""
    d = X.shape[1]
    a = r @ params.V
    w = np.einsum("ndt,nd->nt", X, a[:, :d]) + _pos_T(E, a[:, d:])
    Jw = p.S * (w - np.sum(p.S * w, axis=1, keepdims=True))
    return np.concatenate([np.einsum("ndt,nt->nd", X, Jw), _pos_mix(E, Jw)], axis=1)


def _zeros_query(batch: Batch, x_query):
    if x_query is None:
        return np.zeros(batch.X.shape[:2])
    xq = np.asarray(x_query, dtype=np.float64)
    return np.broadcast_to(xq, batch.X.shape[:2]) if xq.ndim == 1 else xq


def batch_pass(params: ModelParams, batch: Batch, pe: PosEncoding, x_query=None,
               E=None) -> _Pass:
    E = pe.E if E is None else E
    Ey = query_encodings(E, batch.Y, pe.kind)
    return _forward(params, batch.X, E, Ey, _zeros_query(batch, x_query))


def batch_losses(params: ModelParams, batch: Batch, pe: PosEncoding, x_query=None,
                 E=None) -> np.ndarray:
    p = batch_pass(params, batch, pe, x_query, E)
    return 0.5 * np.sum((batch.target - p.out) ** 2, axis=1)


def fixed_gradients(params: ModelParams, batch: Batch, pe: PosEncoding, x_query=None,
                    E=None):
    """Mean gradient and per-sample losses under a fixed (or stacked) encoding."""
    E = pe.E if E is None else E
    Ey = query_encodings(E, batch.Y, pe.kind)
    xq = _zeros_query(batch, x_query)
    p = _forward(params, batch.X, E, Ey, xq)
    r = batch.target - p.out
    n = len(batch)
    g = _grad_terms(params, batch.X, E, p, r)
    grads = Gradients(-(g.T @ p.z) / n, -(r.T @ p.ZS) / n)
    return grads, 0.5 * np.sum(r * r, axis=1)


def nested_gradients(params: ModelParams, batch: Batch, policy: Nested, rng: RngStream,
                     x_query=None):
    xq = _zeros_query(batch, x_query)
    n = len(batch)
    kind = policy.sampler.kind

    mean_out = np.zeros_like(batch.target)
    for _ in range(policy.n_inner):
        E = policy.sampler.draw(rng).E
        p = _forward(params, batch.X, E, query_encodings(E, batch.Y, kind), xq)
        mean_out += p.out / policy.n_inner
    r = batch.target - mean_out

    dW = np.zeros_like(params.W)
    dV = np.zeros_like(params.V)
    for _ in range(policy.n_outer):
        E = policy.sampler.draw(rng).E
        p = _forward(params, batch.X, E, query_encodings(E, batch.Y, kind), xq)
        g = _grad_terms(params, batch.X, E, p, r)
        dW -= g.T @ p.z
        dV -= r.T @ p.ZS
    scale = 1.0 / (n * policy.n_outer)
    return Gradients(dW * scale, dV * scale), 0.5 * np.sum(r * r, axis=1)


def batch_gradients(params: ModelParams, batch: Batch, pe_policy, rng: RngStream | None = None,
                    x_query=None):
    """Mean gradient over the batch under a PE policy; returns (grads, losses)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if isinstance(pe_policy, FixedPE):
        return fixed_gradients(params, batch, pe_policy.pe, x_query)
    if isinstance(pe_policy, ResamplePerStep):
        pe = pe_policy.sampler.draw(rng)
        return fixed_gradients(params, batch, pe, x_query)
    if isinstance(pe_policy, Nested):
        return nested_gradients(params, batch, pe_policy, rng, x_query)
    raise TypeError(f"unknown PE policy {pe_policy!r}")


# --- single-sample API -------------------------------------------------------

def _one(s: Sample) -> Batch:
    return Batch(s.X[None], np.array([s.y]), s.target[None])


def attention(params: ModelParams, inp: AssembledInput) -> np.ndarray:
    if inp.Z.shape[0] != params.W.shape[0] or inp.z_query.shape[0] != params.W.shape[0]:
        raise ShapeError(f"input height {inp.Z.shape[0]} does not match W {params.W.shape}")
    return softmax_col(inp.Z.T @ (params.W @ inp.z_query))


def forward(params: ModelParams, inp: AssembledInput) -> np.ndarray:
    if params.V.shape[1] != inp.Z.shape[0]:
        raise ShapeError(f"V {params.V.shape} does not match input height {inp.Z.shape[0]}")
    return params.V @ (inp.Z @ attention(params, inp))


def sample_loss(params: ModelParams, sample: Sample, pe: PosEncoding, x_query=None) -> float:
    xq = None if x_query is None else np.asarray(x_query)[None]
    return float(batch_losses(params, _one(sample), pe, xq)[0])


def sample_gradients(params: ModelParams, sample: Sample, pe: PosEncoding,
                     x_query=None) -> Gradients:
    xq = None if x_query is None else np.asarray(x_query)[None]
    return fixed_gradients(params, _one(sample), pe, xq)[0]


# --- exact population quantities -----------------------------------------------

def all_subsets(T: int, q: int) -> np.ndarray:
    return np.array(list(combinations(range(T), q)), dtype=np.int64)


def _population_setup(params: ModelParams, pe: PosEncoding, q: int):
    d = params.d
    if np.any(params.W[:d, d:] != 0.0):
        raise ValueError("exact population formulas need the token-row/position-column "
                         "block of W to be zero (attention must not depend on X)")
    Y = all_subsets(pe.T, q)
    Ey = subset_encoding_batch(pe, Y)
    S = softmax_col((Ey @ params.W[d:, d:].T) @ pe.E)
    A = np.zeros_like(S)
    np.put_along_axis(A, Y, 1.0 / q, axis=1)
    return Ey, S, A


def population_loss(params: ModelParams, pe: PosEncoding, q: int) -> float:
    """Exact population loss for x_query = 0 and X-independent attention.

    Enumerates every q-subset and integrates X analytically:
    E||X a - M X s - c||^2 = d|a|^2 - 2 tr(M) a.s + tr(M^T M)|s|^2 + |c|^2.
    """
    d = params.d
    _, S, A = _population_setup(params, pe, q)
    M, Vp = params.V[:, :d], params.V[:, d:]
    c = (S @ pe.E.T) @ Vp.T
    per_y = (d * np.sum(A * A, axis=1) - 2 * np.trace(M) * np.sum(A * S, axis=1)
             + np.sum(M * M) * np.sum(S * S, axis=1) + np.sum(c * c, axis=1))
    return float(0.5 * per_y.mean())


def population_gradients(params: ModelParams, pe: PosEncoding, q: int) -> Gradients:
    """Exact population gradient under the same assumptions as population_loss.

    Only Gaussian second moments survive: E[X^T A X] = tr(A) I_T,
    E[X P X b] = P^T b, and odd moments vanish.
    """
    d = params.d
    E = pe.E
    Ey, S, A = _population_setup(params, pe, q)
    M, Vp = params.V[:, :d], params.V[:, d:]
    ES = S @ E.T                     # m x d_e
    c = ES @ Vp.T                    # m x d
    trM, trMM = np.trace(M), np.sum(M * M)
    aS = np.sum(A * S, axis=1)
    SS = np.sum(S * S, axis=1)
    m = S.shape[0]

    dV = np.zeros_like(params.V)
    dV[:, :d] = -aS.mean() * np.eye(d) + SS.mean() * M
    dV[:, d:] = (c.T @ ES) / m

    def J(v):
        return S * (v - np.sum(S * v, axis=1, keepdims=True))

    w_mean = trM * A - trMM * S - c @ Vp @ E          # E_X[Z^T V^T r], m x T
    g_pos = J(w_mean) @ E.T
    trJ = 1.0 - SS
    g_tok = J(A) @ E.T @ Vp.T - J(S) @ E.T @ Vp.T @ M - trJ[:, None] * (c @ M)
    dW = np.zeros_like(params.W)
    dW[:d, d:] = -(g_tok.T @ Ey) / m
    dW[d:, d:] = -(g_pos.T @ Ey) / m
    return Gradients(dW, dV)


# --- constructions and diagnostics ----------------------------------------------

def expressivity_alpha(eps: float, T: int) -> int:
    """ceil(2 ln(2T) / eps), the attention scale of the approximation construction."""
    return int(ceil(2.0 * log(2 * T) / eps))


def construct_expressivity(d: int, d_e: int, alpha_scale: float) -> ModelParams:
    if alpha_scale < 0:
        raise ValueError("alpha_scale must be non-negative")
    gt = ground_truth(d, d_e, "rademacher")
    return ModelParams(alpha_scale * gt.W_star, gt.V_star.copy())


def cosine_diagnostics(params: ModelParams, gt: GroundTruth) -> tuple[float, float]:
    return frobenius_cosine(params.W, gt.W_star), frobenius_cosine(params.V, gt.V_star)


def extract_scalars(params: ModelParams, pe_kind: str) -> tuple[float, float, float]:
    """(C_hat, alpha_hat, offblock_ratio) from full parameter matrices."""
    d = params.d
    Wpp = params.W[d:, d:]
    n = Wpp.shape[0]
    diag = np.trace(Wpp) / n
    if pe_kind == ONE_HOT and n > 1:
        off = (Wpp.sum() - np.trace(Wpp)) / (n * n - n)
        C = diag - off
    else:
        C = diag
    alpha = np.trace(params.V[:, :d]) / d
    designated = np.sqrt(np.sum(Wpp ** 2) + np.sum(params.V[:, :d] ** 2))
    mask = np.ones(params.W.shape, dtype=bool)
    mask[d:, d:] = False
    other = np.sqrt(np.sum(params.W[mask] ** 2) + np.sum(params.V[:, d:] ** 2))
    ratio = 0.0 if designated < 1e-300 and other < 1e-300 else \
        (np.inf if designated < 1e-300 else other / designated)
    return float(C), float(alpha), float(ratio)


def s_plus_measured(S, Y) -> float:
    """Mean attention mass per in-subset position."""
    return float(np.take_along_axis(S, Y, axis=1).mean())
