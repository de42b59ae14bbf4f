"""STS_q instances: sampling, targets, and transformer input assembly.

Indices are 0-based throughout the library; ``[T]`` means ``range(T)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .encoding import PosEncoding, subset_encoding_batch
from .errors import ShapeError
from .numerics import RngStream


@dataclass(frozen=True)
class TaskConfig:
    T: int
    q: int
    d: int

    def __post_init__(self):
        if not (2 <= self.q < self.T):
            raise ValueError(f"need 2 <= q < T, got q={self.q}, T={self.T}")
        if self.d < 1:
            raise ValueError(f"need d >= 1, got {self.d}")

    def warn_outside_theory(self):
        if not self.q < self.T / 4:
            warnings.warn(f"q={self.q} is outside the analysed regime q < T/4 (T={self.T})",
                          stacklevel=2)


@dataclass(frozen=True)
class Sample:
    X: np.ndarray          # d x T
    y: tuple[int, ...]     # sorted
    target: np.ndarray     # d


@dataclass(frozen=True)
class Batch:
    X: np.ndarray          # n x d x T
    Y: np.ndarray          # n x q, rows sorted
    target: np.ndarray     # n x d

    def __len__(self):
        return self.X.shape[0]

    def __getitem__(self, i) -> Sample:
        return Sample(self.X[i], tuple(int(j) for j in self.Y[i]), self.target[i])

    @classmethod
    def from_samples(cls, samples) -> "Batch":
        return cls(np.stack([s.X for s in samples]),
                   np.array([s.y for s in samples], dtype=np.int64),
                   np.stack([s.target for s in samples]))


@dataclass(frozen=True)
class AssembledInput:
    Z: np.ndarray          # (d + d_e) x T
    z_query: np.ndarray    # d + d_e


def sts_target(X, Y) -> np.ndarray:
    """(1/q) * sum of the selected columns; works on one sample or a batch."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y)
    if X.ndim == 2:
        return X[:, Y].mean(axis=1)
    picked = np.take_along_axis(X, Y[:, None, :], axis=2)
    return picked.mean(axis=2)


def sample_subsets(gen: np.random.Generator, n: int, T: int, q: int) -> np.ndarray:
    """n uniform q-subsets of range(T), each sorted.

    Partial Fisher-Yates: swap position i with a uniform index in [i, T).
    """
    perm = np.tile(np.arange(T), (n, 1))
    rows = np.arange(n)
    for i in range(q):
        j = gen.integers(i, T, size=n)
        a, b = perm[rows, i].copy(), perm[rows, j].copy()
        perm[rows, i], perm[rows, j] = b, a
    return np.sort(perm[:, :q], axis=1)


def sample_batch(rng: RngStream, cfg: TaskConfig, n: int) -> Batch:
    X = rng.normal((n, cfg.d, cfg.T))
    Y = sample_subsets(rng.gen, n, cfg.T, cfg.q)
    return Batch(X, Y, sts_target(X, Y))


def sample_instance(rng: RngStream, cfg: TaskConfig) -> Sample:
    return sample_batch(rng, cfg, 1)[0]


def q_hot(y, T: int) -> np.ndarray:
    y = list(y)
    if any(i < 0 or i >= T for i in y):
        raise IndexError(f"subset {y} out of range for T={T}")
    v = np.zeros(T)
    v[y] = 1.0
    return v


def assemble(s: Sample, pe: PosEncoding, x_query=None) -> AssembledInput:
    d, T = s.X.shape
    if pe.T != T:
        raise ShapeError(f"encoding has {pe.T} positions, sample has {T}")
    if x_query is None:
        x_query = np.zeros(d)
    e_y = subset_encoding_batch(pe, np.array([s.y]))[0]
    Z = np.vstack([s.X, pe.E])
    return AssembledInput(Z, np.concatenate([np.asarray(x_query, dtype=np.float64), e_y]))
