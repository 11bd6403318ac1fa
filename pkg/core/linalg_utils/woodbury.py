"""
Marginal covariances of the mixed model without forming n x n inverses.

V  = Z Sigma_b Z' + sigma_eps^2 I   is block diagonal by subject,
V1 = V + W (L'L)^{-1} W'           is a rank-p update handled by Woodbury:
V1^{-1} = V^{-1} - V^{-1} W (L'L + W'V^{-1}W)^{-1} W' V^{-1}
"""
import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
from typing import List, Tuple
import numpy as np
from scipy import linalg as sla
from core.errors import NotPositiveDefinite, SingularSystem
from core.linalg_utils.spd import spd_factor, spd_logdet


class BlockDiagonalCovariance:
    """V applied subject block by subject block; subjects of equal size are batched"""

    def __init__(self, z_rows: np.ndarray, subject_index: np.ndarray, sigma_eps_sq: float, Sigma_b: np.ndarray):
        z_rows = np.asarray(z_rows, dtype=float)
        subject_index = np.asarray(subject_index)
        self.n = z_rows.shape[0]
        order = np.argsort(subject_index, kind='stable')
        _, starts, counts = np.unique(subject_index[order], return_index=True, return_counts=True)

        by_size = {}
        for start, count in zip(starts, counts):
            by_size.setdefault(int(count), []).append(order[start:start + count])

        self.groups: List[Tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self.logdet = 0.0
        for size in sorted(by_size):
            idx = np.vstack(by_size[size])
            zg = z_rows[idx]
            blocks = sigma_eps_sq * np.eye(size) + zg @ Sigma_b @ np.swapaxes(zg, 1, 2)
            sign, logdets = np.linalg.slogdet(blocks)
            if np.any(sign <= 0):
                raise NotPositiveDefinite("A subject block of V is not positive definite")
            self.logdet += float(np.sum(logdets))
            self.groups.append((idx, blocks, np.linalg.inv(blocks)))

    def _apply(self, M: np.ndarray, which: int) -> np.ndarray:
        M = np.asarray(M, dtype=float)
        if M.size == 0:
            return np.zeros(M.shape)
        flat = M.reshape(self.n, -1)
        out = np.empty_like(flat)
        for group in self.groups:
            idx, mats = group[0], group[which]
            out[idx] = mats @ flat[idx]
        return out.reshape(M.shape)

    def solve(self, M: np.ndarray) -> np.ndarray:
        """V^{-1} M"""
        return self._apply(M, 2)

    def matvec(self, M: np.ndarray) -> np.ndarray:
        """V M"""
        return self._apply(M, 1)

    def dense(self) -> np.ndarray:
        return self.matvec(np.eye(self.n))


class CovarianceStructures:
    """V and V1 for one design and one set of variance components"""

    def __init__(self, v: BlockDiagonalCovariance, W: np.ndarray, gram: np.ndarray):
        self.v = v
        self.W = np.asarray(W, dtype=float)
        self.Vi_W = v.solve(self.W)
        self.WtViW = self.W.T @ self.Vi_W
        self.WtViW = (self.WtViW + self.WtViW.T) / 2
        core = gram + self.WtViW
        try:
            self.core_factor = spd_factor((core + core.T) / 2)
        except NotPositiveDefinite as e:
            raise SingularSystem(f"W'V^-1 W + L'L is singular: Null(W) and Null(L) intersect ({e})")

    def solve_v(self, M: np.ndarray) -> np.ndarray:
        return self.v.solve(M)

    def solve_v1(self, M: np.ndarray) -> np.ndarray:
        """V1^{-1} M"""
        if np.size(M) == 0:
            return np.zeros(np.shape(M))
        Vi_M = self.v.solve(M)
        return Vi_M - self.Vi_W @ sla.cho_solve(self.core_factor, self.W.T @ Vi_M)

    def push_through(self, M: np.ndarray) -> np.ndarray:
        """(L'L)^{-1} W' V1^{-1} M, computed as (L'L + W'V^{-1}W)^{-1} W' V^{-1} M"""
        return sla.cho_solve(self.core_factor, self.Vi_W.T @ M)

    def core_solve(self, M: np.ndarray) -> np.ndarray:
        if np.size(M) == 0:
            return np.zeros(np.shape(M))
        return sla.cho_solve(self.core_factor, M)

    def logdet_v1(self, gram_logdet: float) -> float:
        return self.v.logdet + spd_logdet(self.core_factor) - gram_logdet

    @property
    def V(self) -> np.ndarray:
        return self.v.dense()

    def V1(self, gram_inverse: np.ndarray) -> np.ndarray:
        return self.V + self.W @ gram_inverse @ self.W.T
