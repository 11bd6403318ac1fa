"""
Generalized SVD of a matrix pair (A, B) through the CS decomposition of the
orthonormal factor of the stacked matrix [A; B].

Columns of G are ordered by the A-side value alpha ascending:
  - the first p-n columns have alpha = 0 (null space of A),
  - the last columns with beta = 0 span the null space of B,
  - alpha**2 + beta**2 = 1 for every column.
"""
import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
from dataclasses import dataclass
import numpy as np
from scipy import linalg as sla
from core.errors import StackedRankDeficient, ShapeAssumptionViolated
from core.linalg_utils.spd import numerical_rank

NULL_TOL = 1e-10

@dataclass(frozen=True)
class GsvdFactors:
    U: np.ndarray       # n x n
    Vmat: np.ndarray    # m x m
    G: np.ndarray       # p x p
    G_inv: np.ndarray
    alpha: np.ndarray   # p, ascending
    beta: np.ndarray    # p, descending

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def m(self) -> int:
        return self.Vmat.shape[0]

    @property
    def p_tilde(self) -> int:
        return self.G.shape[0]

    @property
    def ell(self) -> int:
        return self.n + self.m - self.p_tilde

    @property
    def paired(self) -> slice:
        return slice(self.p_tilde - self.n, self.m)

    @property
    def sigma(self) -> np.ndarray:
        return self.alpha[self.paired]

    @property
    def mu(self) -> np.ndarray:
        return self.beta[self.paired]

    @property
    def null_dim(self) -> int:
        return int(np.sum(self.beta <= NULL_TOL))

    def u_for(self, k: int) -> np.ndarray:
        """Left vector paired with column k of G (k >= p-n)"""
        return self.U[:, k - (self.p_tilde - self.n)]

    def S_matrix(self) -> np.ndarray:
        s = np.zeros((self.n, self.p_tilde))
        offset = self.p_tilde - self.n
        s[np.arange(self.n), offset + np.arange(self.n)] = self.alpha[offset:]
        return s

    def M_matrix(self) -> np.ndarray:
        mm = np.zeros((self.m, self.p_tilde))
        mm[np.arange(self.m), np.arange(self.m)] = self.beta[:self.m]
        return mm

    def reconstruct(self):
        return self.U @ self.S_matrix() @ self.G_inv, self.Vmat @ self.M_matrix() @ self.G_inv


def gsvd_pair(A: np.ndarray, B: np.ndarray) -> GsvdFactors:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, p = A.shape
    m = B.shape[0]
    if B.shape[1] != p:
        raise ShapeAssumptionViolated(f"Column mismatch: A has {p}, B has {B.shape[1]}")
    if not (max(n, m) <= p <= n + m):
        raise ShapeAssumptionViolated(f"Need max(n, m) <= p <= n + m, got n={n}, m={m}, p={p}")

    stacked = np.vstack([A, B])
    if numerical_rank(stacked) < p:
        raise StackedRankDeficient("rank([A; B]) is below the column count; Null(A) and Null(B) intersect")
    Qf, R = np.linalg.qr(stacked)
    Q1, Q2 = Qf[:n], Qf[n:]

    # CS step: SVD of the top block, then orthogonalize the bottom block in the same basis
    U1, c, Z1t = np.linalg.svd(Q1, full_matrices=True)
    U = U1[:, ::-1]
    Z = Z1t.T[:, ::-1]
    alpha = np.zeros(p)
    alpha[p - n:] = np.clip(c[::-1], 0.0, 1.0)

    Vq, R2 = np.linalg.qr(Q2 @ Z[:, :m], mode='complete')
    d = np.diag(R2)
    Vmat = Vq * np.where(d < 0, -1.0, 1.0)
    beta = np.zeros(p)
    beta[:m] = np.abs(d)

    # rescale so that alpha**2 + beta**2 = 1 holds to rounding
    h = np.hypot(alpha, beta)
    h[h == 0] = 1.0
    alpha, beta = alpha / h, beta / h
    G = sla.solve_triangular(R, Z / h, lower=False)
    G_inv = (Z * h).T @ R
    return GsvdFactors(U=U, Vmat=Vmat, G=G, G_inv=G_inv, alpha=alpha, beta=beta)
