"""Positional encodings and the subset (dual-certificate) encoding e_y."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import (IllConditionedGramError, InvalidSubsetEncodingError,
                     PeSamplingFailedError, ShapeError)
from .numerics import DEFAULT_MAX_COND, RngStream, solve_gram_batch

ONE_HOT = "onehot"
RADEMACHER = "rademacher"

PAIRWISE = "pairwise"
EXACT = "exact"

EXACT_MAX_T = 24
EXACT_MAX_Q = 3
DEFAULT_MAX_ATTEMPTS = 10_000


@dataclass(frozen=True)
class PosEncoding:
    kind: str
    E: np.ndarray
    delta: float = 0.0
    # Coherence threshold actually enforced by pairwise rejection sampling.
    threshold: float | None = None

    @property
    def d_e(self) -> int:
        return self.E.shape[0]

    @property
    def T(self) -> int:
        return self.E.shape[1]

    def prefix(self, T: int) -> "PosEncoding":
        """First ``T`` columns (the fixed-PE length-generalisation protocol)."""
        if T > self.T:
            raise ShapeError(f"prefix of length {T} requested from a {self.T}-column encoding")
        if self.kind == ONE_HOT:
            return one_hot_pe(T)
        return PosEncoding(self.kind, self.E[:, :T].copy(), self.delta, self.threshold)


@dataclass(frozen=True)
class SubsetEncoding:
    y: tuple[int, ...]
    e_y: np.ndarray


@dataclass(frozen=True)
class DualCertificateReport:
    max_in_err: float
    max_out: float
    norm: float


def one_hot_pe(T: int) -> PosEncoding:
    if T < 1:
        raise ShapeError("one-hot encoding needs T >= 1")
    return PosEncoding(ONE_HOT, np.eye(T), 0.0, None)


def rademacher_matrix(rng: RngStream, d_e: int, T: int) -> np.ndarray:
    signs = rng.gen.integers(0, 2, size=(d_e, T), dtype=np.int8) * 2 - 1
    return signs / np.sqrt(d_e)


def measure_coherence(E) -> float:
    """max_{i != j} |<e_i, e_j>| by exhaustive pair scan."""
    E = np.asarray(E, dtype=np.float64)
    if E.shape[1] < 2:
        raise ShapeError("coherence needs at least two columns")
    G = E.T @ E
    np.fill_diagonal(G, 0.0)
    return float(np.abs(G).max())


def _sym2_eigs(a, b, c):
    """Eigenvalues of [[a, b], [b, c]] elementwise."""
    mid = 0.5 * (a + c)
    rad = np.sqrt(0.25 * (a - c) ** 2 + b * b)
    return mid - rad, mid + rad


def _isometry_extremes(G, q):
    """(min, max) eigenvalue over all principal q x q submatrices of G."""
    T = G.shape[0]
    lo, hi = np.inf, -np.inf
    for S in _chunked_combinations(T, q):
        sub = G[S[:, :, None], S[:, None, :]]
        eig = np.linalg.eigvalsh(sub)
        lo = min(lo, float(eig[:, 0].min()))
        hi = max(hi, float(eig[:, -1].max()))
    return lo, hi


def _chunked_combinations(n, k, chunk=50_000):
    buf = []
    for c in combinations(range(n), k):
        buf.append(c)
        if len(buf) == chunk:
            yield np.array(buf)
            buf = []
    if buf:
        yield np.array(buf)


def _cross_norm_max(G, q, stop_above=np.inf):
    """max ||E_S^T E_S'||_2 over disjoint |S| = q, |S'| = min(2q, T - q).

    Operator norms of sub-blocks never exceed the norm of the block that
    contains them, so only maximal supports need enumerating. Returns early
    once a value above ``stop_above`` is found.
    """
    T = G.shape[0]
    k2 = min(2 * q, T - q)
    if k2 < 1:
        return 0.0
    worst = 0.0
    for S in combinations(range(T), q):
        rest = np.array([j for j in range(T) if j not in S])
        M = G[np.array(S)][:, rest]  # q x (T - q)
        col2 = np.sum(M * M, axis=0)
        top = np.sort(col2)[::-1][:k2]
        if np.sqrt(top.sum()) <= worst:
            continue  # Frobenius upper bound already below the running max
        if np.sqrt(top[0]) > stop_above:
            return float(np.sqrt(top[0]))
        for Sp in _chunked_combinations(len(rest), k2):
            blocks = M[:, Sp]  # q x n x k2
            P = np.einsum("ink,jnk->nij", blocks, blocks)
            if q == 1:
                val = P[:, 0, 0]
            elif q == 2:
                val = _sym2_eigs(P[:, 0, 0], P[:, 0, 1], P[:, 1, 1])[1]
            else:
                val = np.linalg.eigvalsh(P)[:, -1]
            worst = max(worst, float(np.sqrt(max(val.max(), 0.0))))
            if worst > stop_above:
                return worst
    return worst


def rip_constant(E, q: int) -> float:
    """Smallest delta for which E has the (q, delta) restricted isometry and
    orthogonality property, computed by exhaustive support enumeration."""
    E = np.asarray(E, dtype=np.float64)
    G = E.T @ E
    lo, hi = _isometry_extremes(G, min(q, G.shape[0]))
    return max(1.0 - lo, hi - 1.0, _cross_norm_max(G, q))


def check_rip_exact(E, q: int, delta: float) -> bool:
    E = np.asarray(E, dtype=np.float64)
    T = E.shape[1]
    if T > EXACT_MAX_T or q > EXACT_MAX_Q:
        raise ValueError(f"exact RIP check limited to T <= {EXACT_MAX_T}, q <= {EXACT_MAX_Q}")
    G = E.T @ E
    off = G - np.diag(np.diag(G))
    if np.abs(off).max(initial=0.0) > delta:
        return False  # a single cross pair already violates orthogonality
    lo, hi = _isometry_extremes(G, min(q, T))
    if lo < 1.0 - delta or hi > 1.0 + delta:
        return False
    return _cross_norm_max(G, q, stop_above=delta) <= delta


def sample_rip_pe(rng: RngStream, d_e: int, T: int, q: int, delta: float,
                  mode: str = PAIRWISE, max_attempts: int = DEFAULT_MAX_ATTEMPTS,
                  threshold: float | None = None) -> PosEncoding:
    """Rejection-sample a scaled Rademacher encoding.

    ``pairwise`` accepts once every column pair has |<e_i, e_j>| <= threshold
    (``threshold`` defaults to ``delta``). ``exact`` accepts only matrices
    with the full (q, delta) restricted isometry and orthogonality property.
    """
    if d_e < 1 or T < 1:
        raise ShapeError(f"bad encoding shape {d_e}x{T}")
    if mode == EXACT and (T > EXACT_MAX_T or q > EXACT_MAX_Q):
        raise ValueError(f"exact mode limited to T <= {EXACT_MAX_T}, q <= {EXACT_MAX_Q}")
    if mode not in (PAIRWISE, EXACT):
        raise ValueError(f"unknown RIP mode {mode!r}")
    thr = delta if threshold is None else threshold
    for _ in range(max_attempts):
        E = rademacher_matrix(rng, d_e, T)
        if mode == PAIRWISE:
            ok = T < 2 or measure_coherence(E) <= thr + 1e-12
        else:
            ok = check_rip_exact(E, q, delta)
        if ok:
            return PosEncoding(RADEMACHER, E, delta, thr if mode == PAIRWISE else None)
    raise PeSamplingFailedError(
        f"no {mode} RIP encoding found in {max_attempts} attempts "
        f"(d_e={d_e}, T={T}, q={q}, delta={delta}, threshold={thr})")


@dataclass(frozen=True)
class RipSampler:
    """Frozen arguments of :func:`sample_rip_pe`, drawn once per call."""
    d_e: int
    T: int
    q: int
    delta: float
    mode: str = PAIRWISE
    threshold: float | None = None
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    kind: str = RADEMACHER

    def draw(self, rng: RngStream) -> PosEncoding:
        return sample_rip_pe(rng, self.d_e, self.T, self.q, self.delta, self.mode,
                             self.max_attempts, self.threshold)

    def with_T(self, T: int, q: int | None = None) -> "RipSampler":
        return RipSampler(self.d_e, T, self.q if q is None else q, self.delta, self.mode,
                          self.threshold, self.max_attempts)


def subset_encoding(pe: PosEncoding, y, max_cond: float = DEFAULT_MAX_COND) -> SubsetEncoding:
    y = tuple(sorted(int(i) for i in y))
    if len(set(y)) != len(y) or min(y) < 0 or max(y) >= pe.T:
        raise InvalidSubsetEncodingError(f"subset {y} is not a set of distinct indices in [0, {pe.T})")
    e_y = subset_encoding_batch(pe, np.array([y]), max_cond)[0]
    return SubsetEncoding(y, e_y)


def subset_encoding_batch(pe: PosEncoding, Y, max_cond: float = DEFAULT_MAX_COND) -> np.ndarray:
    """e_y for every row of the (n, q) index array ``Y``; returns (n, d_e)."""
    Y = np.asarray(Y)
    E = pe.E
    if pe.kind == ONE_HOT:
        out = np.zeros((Y.shape[0], pe.T))
        np.put_along_axis(out, Y, 1.0, axis=1)
        return out
    Ey = np.transpose(E[:, Y], (1, 0, 2))  # n x d_e x q
    G = np.einsum("nki,nkj->nij", Ey, Ey)
    try:
        coef = solve_gram_batch(G, np.ones(Y.shape), max_cond)
    except IllConditionedGramError as exc:
        raise InvalidSubsetEncodingError(str(exc)) from exc
    return np.einsum("nki,ni->nk", Ey, coef)


def verify_dual_certificate(pe: PosEncoding, enc: SubsetEncoding) -> DualCertificateReport:
    ip = pe.E.T @ enc.e_y
    mask = np.zeros(pe.T, dtype=bool)
    mask[list(enc.y)] = True
    max_in = float(np.abs(ip[mask] - 1.0).max())
    max_out = float(np.abs(ip[~mask]).max()) if (~mask).any() else 0.0
    return DualCertificateReport(max_in, max_out, float(np.linalg.norm(enc.e_y)))
