"""Masked thermal variance and its quadratic-form weight."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True, eq=False)
class MaskVector:
    """0/1 indicator of the voxels that must be melted."""

    mu: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu)
        if not np.all((mu == 0) | (mu == 1)):
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "mu", mu.astype(bool))

    @classmethod
    def from_ids(cls, n: int, ids) -> "MaskVector":
        mu = np.zeros(n, dtype=bool)
        mu[np.asarray(ids, dtype=int)] = True
        return cls(mu)

    @property
    def n(self) -> int:
        return len(self.mu)

    @property
    def count(self) -> int:
        return int(self.mu.sum())

    @property
    def ids(self) -> np.ndarray:
        return np.flatnonzero(self.mu)

    @property
    def off_ids(self) -> np.ndarray:
        return np.flatnonzero(~self.mu)


@dataclass(frozen=True, eq=False)
class VarianceWeight:
    """``Q = (2/N) M - (2/N^2) mu mu^T`` kept as diagonal plus rank one.

    ``0.5 T^T Q T`` is the population variance of ``T`` over the mask.
    """

    mask: MaskVector

    @property
    def diag(self) -> np.ndarray:
        return 2.0 / self.mask.count * self.mask.mu

    @property
    def rank_one_coef(self) -> float:
        return -2.0 / self.mask.count**2

    def matvec(self, T: np.ndarray) -> np.ndarray:
        mu = self.mask.mu
        return self.diag * T + self.rank_one_coef * mu * T[mu].sum()

    def quad(self, T: np.ndarray) -> float:
        """``0.5 T^T Q T`` evaluated through the structured form."""
        return 0.5 * float(np.sum(T * self.matvec(T)))

    def to_sparse(self) -> sp.csr_matrix:
        """Explicit Q; the rank-one block has N_mu^2 entries, so keep to small masks."""
        ids = self.mask.ids
        n = self.mask.n
        r, c = np.meshgrid(ids, ids, indexing="ij")
        dense = sp.coo_matrix(
            (np.full(r.size, self.rank_one_coef), (r.ravel(), c.ravel())), shape=(n, n)
        )
        return (sp.diags(self.diag) + dense).tocsr()


def build_variance_weight(mask: MaskVector) -> VarianceWeight:
    if mask.count < 1:
        raise ValueError("empty mask")
    return VarianceWeight(mask)


def brute_force_variance(T, mask: MaskVector) -> float:
    """Mean, then mean squared deviation, by plain summation over the mask."""
    T = np.asarray(T, dtype=float)
    if T.shape != mask.mu.shape:
        raise ValueError("temperature and mask sizes differ")
    vals = [t for t, keep in zip(T, mask.mu) if keep]
    mean = sum(vals) / len(vals)
    return sum((t - mean) ** 2 for t in vals) / len(vals)


def mask_variance(states: np.ndarray, mask: MaskVector) -> np.ndarray:
    """Population variance over the mask for each row of ``states``."""
    return np.var(np.atleast_2d(states)[:, mask.mu], axis=1)


def cumulative_variance(states, dt, mask: MaskVector):
    """``sum_k var(T_k) dt_k`` and its running sum (K^2 s).

    ``dt`` is a scalar or one weight per state row.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if len(states) == 0:
        raise ValueError("empty trajectory")
    w = np.broadcast_to(np.asarray(dt, dtype=float), (len(states),))
    running = np.cumsum(mask_variance(states, mask) * w)
    return float(running[-1]), running
