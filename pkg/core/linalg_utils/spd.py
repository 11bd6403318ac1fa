import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))
import numpy as np
from scipy import linalg as sla
from core.errors import NotPositiveDefinite

SYMMETRY_TOL = 1e-10

def _check_symmetric(amat: np.ndarray):
    if amat.ndim != 2 or amat.shape[0] != amat.shape[1]:
        raise NotPositiveDefinite(f"Expected a square matrix, got shape {amat.shape}")
    scale = max(float(np.abs(amat).max()), 1.0)
    if float(np.abs(amat - amat.T).max()) > SYMMETRY_TOL * scale:
        raise NotPositiveDefinite("Matrix is not symmetric")

def spd_factor(amat: np.ndarray):
    """Cholesky factor of a symmetric positive-definite matrix, raising NotPositiveDefinite on pivot failure"""
    amat = np.asarray(amat, dtype=float)
    _check_symmetric(amat)
    try:
        return sla.cho_factor(amat, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NotPositiveDefinite(f"Cholesky pivot failure: {e}")

def spd_logdet(factor) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(factor[0]))))

def solve_spd(amat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=float)
    amat = np.asarray(amat, dtype=float)
    if amat.shape[0] == 0:
        return np.zeros_like(rhs)
    return sla.cho_solve(spd_factor(amat), rhs)

def _rank_tol(s: np.ndarray, shape) -> float:
    return max(shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)

def numerical_rank(amat: np.ndarray) -> int:
    amat = np.atleast_2d(np.asarray(amat, dtype=float))
    if amat.size == 0:
        return 0
    s = np.linalg.svd(amat, compute_uv=False)
    return int(np.sum(s > _rank_tol(s, amat.shape)))

def pseudoinverse(amat: np.ndarray) -> np.ndarray:
    """Moore-Penrose inverse; singular values at or below max(shape)*eps*s_max count as zero"""
    amat = np.atleast_2d(np.asarray(amat, dtype=float))
    if amat.size == 0:
        return np.zeros(amat.shape[::-1])
    u, s, vt = np.linalg.svd(amat, full_matrices=False)
    keep = s > _rank_tol(s, amat.shape)
    if not keep.any():
        return np.zeros(amat.shape[::-1])
    return (vt[keep].T / s[keep]) @ u[:, keep].T

def inv_sqrt_spd(amat: np.ndarray) -> np.ndarray:
    """Symmetric inverse square root through the eigen-decomposition"""
    amat = np.asarray(amat, dtype=float)
    _check_symmetric(amat)
    w, v = np.linalg.eigh((amat + amat.T) / 2)
    if w.size and w.min() <= 0:
        raise NotPositiveDefinite(f"Smallest eigenvalue {w.min():.3e} is not positive")
    out = (v / np.sqrt(w)) @ v.T
    return (out + out.T) / 2
