"""Dense float64 helpers and labelled random streams.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; nothing here
wraps them. Random streams are PCG64 generators seeded through
``numpy.random.SeedSequence`` with a spawn key built from the stream label
(and optional integer sub-keys), so a (seed, label, keys) triple always
reproduces the same draws and different labels never share state.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import IllConditionedGramError, NumericalInputError, ShapeError

LABELS = ("data", "pe", "init", "eval")
_LABEL_KEY = {name: i for i, name in enumerate(LABELS)}

DEFAULT_MAX_COND = 1e8


class RngStream:
    """A named, reproducible random stream.

    ``RngStream(seed, "data").child(step)`` gives an independent sub-stream
    per step, which keeps batch draws independent of how many batches were
    drawn before.
    """

    def __init__(self, seed: int, label: str, keys: tuple[int, ...] = ()):
        if label not in _LABEL_KEY:
            raise ValueError(f"unknown stream label {label!r}; expected one of {LABELS}")
        self.seed = int(seed)
        self.label = label
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence(self.seed, spawn_key=(_LABEL_KEY[label],) + self.keys)
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.label, self.keys + keys)

    def normal(self, shape) -> np.ndarray:
        return self.gen.standard_normal(shape)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, label={self.label!r}, keys={self.keys})"


def softmax_col(v) -> np.ndarray:
    """Softmax along the last axis, with max subtraction.

    Accepts a vector or a stack of vectors (one softmax per row).
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] < 1:
        raise NumericalInputError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise NumericalInputError("softmax input contains NaN or Inf")
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def gaussian_matrix(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ShapeError(f"gaussian_matrix needs positive shape, got {rows}x{cols}")
    return rng.normal((rows, cols))


def solve_gram(G, b, max_cond: float = DEFAULT_MAX_COND) -> np.ndarray:
    """Solve ``G x = b`` for a small symmetric positive-definite ``G``.

    Cholesky factorisation plus one step of iterative refinement. The
    condition number is computed exactly from the eigenvalues (q is tiny).
    """
    G = np.asarray(G, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1] or b.shape != (G.shape[0],):
        raise ShapeError(f"solve_gram shape mismatch: G {G.shape}, b {b.shape}")
    if not (np.all(np.isfinite(G)) and np.all(np.isfinite(b))):
        raise NumericalInputError("solve_gram input contains NaN or Inf")
    scale = max(1.0, float(np.abs(G).max()))
    if np.abs(G - G.T).max() > 1e-12 * scale:
        raise NumericalInputError("Gram matrix is not symmetric")
    eig = np.linalg.eigvalsh(G)
    if eig[0] <= 0 or eig[-1] / eig[0] > max_cond:
        raise IllConditionedGramError(
            f"Gram condition estimate {eig[-1] / max(eig[0], 1e-300):.3g} exceeds {max_cond:.3g}")
    factor = scipy.linalg.cho_factor(G, lower=True)
    x = scipy.linalg.cho_solve(factor, b)
    x += scipy.linalg.cho_solve(factor, b - G @ x)
    return x


def solve_gram_batch(G, b, max_cond: float = DEFAULT_MAX_COND) -> np.ndarray:
    """Stacked version of :func:`solve_gram` for ``G`` of shape (n, q, q)."""
    G = np.asarray(G, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    eig = np.linalg.eigvalsh(G)
    lo, hi = eig[:, 0], eig[:, -1]
    bad = (lo <= 0) | (hi > max_cond * np.maximum(lo, 1e-300))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise IllConditionedGramError(
            f"Gram matrix {i} has condition estimate {hi[i] / max(lo[i], 1e-300):.3g}")
    L = np.linalg.cholesky(G)

    def chol_solve(rhs):
        w = np.linalg.solve(L, rhs[..., None])
        return np.linalg.solve(np.swapaxes(L, -1, -2), w)[..., 0]

    x = chol_solve(b)
    x += chol_solve(b - np.einsum("nij,nj->ni", G, x))
    return x


def null_space_vector(A) -> np.ndarray:
    """Unit vector ``u`` with ``A u = 0`` for a wide matrix ``A`` (m < n).

    The kernel basis comes from the SVD. Among the basis vectors, the one
    with the largest |first nonzero coordinate| is returned, signed so that
    coordinate is positive.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    m, n = A.shape
    if m >= n:
        raise ShapeError(f"null_space_vector needs m < n, got {m}x{n}")
    _, s, vt = np.linalg.svd(A, full_matrices=True)
    tol = max(m, n) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    basis = vt[rank:]
    best, best_val = None, -1.0
    for v in basis:
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        lead = v[nz[0]]
        if abs(lead) > best_val + 1e-12:
            best, best_val = (v if lead > 0 else -v), abs(lead)
    return best / np.linalg.norm(best)


def frobenius_cosine(A, B) -> float:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ShapeError(f"frobenius_cosine shape mismatch: {A.shape} vs {B.shape}")
    na, nb = np.linalg.norm(A), np.linalg.norm(B)
    if na < 1e-300 or nb < 1e-300:
        return 0.0
    return float(np.clip(np.sum(A * B) / (na * nb), -1.0, 1.0))
