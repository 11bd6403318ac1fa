import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from scipy.stats import norm
from core.errors import SingularSystem, NotPositiveDefinite, UsageError
from core.step1_dataset import DesignMatrices, TimeStructure
from core.step2_penalty import BlockPenalty
from core.linalg_utils import BlockDiagonalCovariance, CovarianceStructures, solve_spd

# the band constant quoted for 95% intervals
Z_TABLE = {0.95: 1.96}

@dataclass(frozen=True)
class VarianceComponents:
    lambdas: Tuple[float, ...]
    sigma_eps_sq: float
    Sigma_b: np.ndarray

    def __post_init__(self):
        lambdas = tuple(float(v) for v in np.atleast_1d(self.lambdas))
        Sigma_b = np.atleast_2d(np.array(self.Sigma_b, dtype=float))
        if not lambdas or min(lambdas) <= 0:
            raise UsageError(f"All lambda_d must be positive, got {lambdas}")
        if not self.sigma_eps_sq > 0:
            raise UsageError(f"sigma_eps^2 must be positive, got {self.sigma_eps_sq}")
        if Sigma_b.shape[0] != Sigma_b.shape[1] or not np.allclose(Sigma_b, Sigma_b.T, atol=1e-12):
            raise NotPositiveDefinite("Sigma_b must be a symmetric matrix")
        if np.linalg.eigvalsh(Sigma_b).min() < -1e-12 * max(1.0, np.abs(Sigma_b).max()):
            raise NotPositiveDefinite("Sigma_b must be positive semi-definite")
        object.__setattr__(self, 'lambdas', lambdas)
        object.__setattr__(self, 'Sigma_b', Sigma_b)
        object.__setattr__(self, 'sigma_eps_sq', float(self.sigma_eps_sq))

    @classmethod
    def scalar(cls, lambdas: Sequence[float], sigma_eps_sq: float, sigma_b_sq: float, r: int = 1) -> 'VarianceComponents':
        return cls(tuple(lambdas), sigma_eps_sq, sigma_b_sq * np.eye(r))

    def to_dict(self) -> dict:
        return {"lambda": list(self.lambdas), "sigma_eps_sq": self.sigma_eps_sq, "Sigma_b": self.Sigma_b.tolist()}


def covariance_structures(dm: DesignMatrices, bp: BlockPenalty, vc: VarianceComponents) -> CovarianceStructures:
    if vc.Sigma_b.shape[0] != dm.r:
        raise UsageError(f"Sigma_b is {vc.Sigma_b.shape[0]}x{vc.Sigma_b.shape[0]}, design has r={dm.r}")
    v = BlockDiagonalCovariance(dm.z_rows, dm.subject_index, vc.sigma_eps_sq, vc.Sigma_b)
    return CovarianceStructures(v, dm.W, bp.gram)

def _spd_solve(amat, rhs, what):
    try:
        return solve_spd((amat + amat.T) / 2, rhs)
    except NotPositiveDefinite as e:
        raise SingularSystem(f"{what} is singular: {e}")

def _apply_sigma_b(vc: VarianceComponents, M: np.ndarray, N: int) -> np.ndarray:
    """(I_N kron Sigma_b) M for a subject-major rN x k matrix"""
    r = vc.Sigma_b.shape[0]
    flat = M.reshape(N, r, -1)
    return np.einsum('ij,njk->nik', vc.Sigma_b, flat).reshape(M.shape)

# ------------
# point estimates
# ------------
def ridge_solve(dm: DesignMatrices, bp: BlockPenalty, vc: VarianceComponents):
    """(C'V^-1 C + blockdiag{0, L'L})^-1 C'V^-1 y with C = [X W]"""
    cs = covariance_structures(dm, bp, vc)
    C = np.hstack([dm.X, dm.W])
    Vi_C = cs.solve_v(C)
    k = dm.X.shape[1]
    lhs = C.T @ Vi_C
    lhs[k:, k:] += bp.gram
    sol = _spd_solve(lhs, Vi_C.T @ dm.y, "C'V^-1 C + blockdiag{0, L'L}")
    return sol[:k], sol[k:]

def blup(dm: DesignMatrices, bp: BlockPenalty, vc: VarianceComponents, cs: Optional[CovarianceStructures] = None):
    cs = cs or covariance_structures(dm, bp, vc)
    V1i_X = cs.solve_v1(dm.X)
    beta = _spd_solve(dm.X.T @ V1i_X, V1i_X.T @ dm.y, "X'V1^-1 X")
    resid = dm.y - dm.X @ beta
    gamma = cs.push_through(resid)
    b = _apply_sigma_b(vc, dm.Z.T @ cs.solve_v1(resid), dm.n_subjects)
    return beta, gamma, b

def objective(dm: DesignMatrices, bp: BlockPenalty, vc: VarianceComponents, beta, gamma) -> float:
    """||y - X beta - W gamma||^2_{V^-1} + sum_d lambda_d^2 ||gamma_d||^2_{L_d'L_d}"""
    v = BlockDiagonalCovariance(dm.z_rows, dm.subject_index, vc.sigma_eps_sq, vc.Sigma_b)
    resid = dm.y - dm.X @ beta - dm.W @ gamma
    return float(resid @ v.solve(resid) + gamma @ bp.gram @ gamma)

# ------------
# linear maps y -> (beta, gamma, b)
# ------------
class BlupMaps:
    """Explicit linear maps A_beta, A_gamma, A_b with beta~ = A_beta y etc."""

    def __init__(self, dm: DesignMatrices, bp: BlockPenalty, vc: VarianceComponents):
        self.dm, self.bp, self.vc = dm, bp, vc
        self.cs = covariance_structures(dm, bp, vc)
        V1i_X = self.cs.solve_v1(dm.X)
        self.A_beta = _spd_solve(dm.X.T @ V1i_X, V1i_X.T, "X'V1^-1 X")
        Wt_Vi = self.cs.Vi_W.T
        self.A_gamma = self.cs.core_solve(Wt_Vi - (Wt_Vi @ dm.X) @ self.A_beta)

    @cached_property
    def A_b(self) -> np.ndarray:
        Zt_V1i = self.cs.solve_v1(self.dm.Z).T
        A = Zt_V1i - (Zt_V1i @ self.dm.X) @ self.A_beta
        return _apply_sigma_b(self.vc, A, self.dm.n_subjects)

    @cached_property
    def A_y(self) -> np.ndarray:
        dm = self.dm
        return dm.X @ self.A_beta + dm.W @ self.A_gamma + dm.Z @ self.A_b

    def sandwich(self, A: np.ndarray, unconditional: bool = False) -> np.ndarray:
        """A V A', or A V1 A' when unconditional"""
        out = A @ self.cs.v.matvec(A.T)
        if unconditional:
            AW = A @ self.dm.W
            out = out + AW @ self.bp.gram_inverse @ AW.T
        return (out + out.T) / 2

def conditional_covariances(dm: DesignMatrices, bp: BlockPenalty, vc: VarianceComponents, unconditional: bool = False,
                            maps: Optional[BlupMaps] = None):
    maps = maps or BlupMaps(dm, bp, vc)
    return maps.sandwich(maps.A_beta, unconditional), maps.sandwich(maps.A_gamma, unconditional)

# ------------
# fit result and bands
# ------------
@dataclass(frozen=True)
class FitResult:
    beta: np.ndarray
    cov_beta: np.ndarray
    gamma: np.ndarray
    cov_gamma: np.ndarray
    blup_b: np.ndarray
    vc: VarianceComponents
    penalty: BlockPenalty
    fitted: np.ndarray
    reml_loglik: float
    aic: float
    n_params: int
    converged: bool
    n_iter: int
    grid_points: np.ndarray
    time_structure: TimeStructure
    fixed_names: Tuple[str, ...]
    boundary: Tuple[str, ...] = ()
    unconditional: bool = False
    penalty_labels: Tuple[str, ...] = field(default=())

    @property
    def neg_half_aic(self) -> float:
        return -self.aic / 2

    @property
    def p(self) -> int:
        return self.grid_points.size

    @property
    def D(self) -> int:
        return self.time_structure.D

    def gamma_component(self, d: int) -> np.ndarray:
        return self.gamma[d * self.p:(d + 1) * self.p]

    def cov_block(self, d: int, e: int) -> np.ndarray:
        p = self.p
        return self.cov_gamma[d * p:(d + 1) * p, e * p:(e + 1) * p]

    def to_dict(self) -> dict:
        D1 = self.D + 1
        return {
            "time_structure": self.time_structure.text,
            "time_structure_label": self.time_structure.label,
            "penalty": list(self.penalty_labels),
            "fixed_names": list(self.fixed_names),
            "beta": self.beta.tolist(),
            "cov_beta": self.cov_beta.tolist(),
            "s": self.grid_points.tolist(),
            "gamma": [self.gamma_component(d).tolist() for d in range(D1)],
            "cov_gamma_blocks": [[self.cov_block(d, e).tolist() for e in range(D1)] for d in range(D1)],
            "blup_b": self.blup_b.tolist(),
            "variance_components": self.vc.to_dict(),
            "reml_loglik": self.reml_loglik,
            "aic": self.aic,
            "neg_half_aic": self.neg_half_aic,
            "n_params": self.n_params,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "boundary": list(self.boundary),
            "unconditional_covariance": self.unconditional,
        }


@dataclass(frozen=True)
class BandEstimate:
    s: np.ndarray
    gamma_t: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    z: float
    t: Optional[float] = None
    component: Optional[int] = None

    def excludes_zero(self) -> np.ndarray:
        return (self.lower > 0) | (self.upper < 0)

    def covers(self, truth: np.ndarray) -> np.ndarray:
        return (self.lower <= truth) & (truth <= self.upper)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'s': self.s, 'estimate': self.gamma_t, 'se': self.se,
                             'lower': self.lower, 'upper': self.upper})

def z_value(level: float) -> float:
    if not 0 < level < 1:
        raise UsageError(f"Confidence level must be in (0, 1), got {level}")
    for known, z in Z_TABLE.items():
        if abs(level - known) < 1e-12:
            return z
    return float(norm.ppf(0.5 + level / 2))

def _band(s, est, cov, level, **kw) -> BandEstimate:
    z = z_value(level)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return BandEstimate(s=s, gamma_t=est, se=se, lower=est - z * se, upper=est + z * se, level=level, z=z, **kw)

def gamma_at_time(fit: FitResult, ts: TimeStructure, t: float, level: float = 0.95) -> BandEstimate:
    """gamma(t, .) = T gamma~ with T = [1 f_1(t) ... f_D(t)] kron I_p"""
    f = ts.evaluate([t])[0]
    if f.size != fit.D + 1:
        raise UsageError(f"Time structure has D={f.size - 1}, fit has D={fit.D}")
    T = np.kron(f, np.eye(fit.p))
    return _band(fit.grid_points, T @ fit.gamma, T @ fit.cov_gamma @ T.T, level, t=float(t))

def component_band(fit: FitResult, d: int, level: float = 0.95) -> BandEstimate:
    return _band(fit.grid_points, fit.gamma_component(d), fit.cov_block(d, d), level, component=d)

def predict(dm: DesignMatrices, fit: FitResult, unconditional: bool = False):
    """y~ = X beta~ + W gamma~ + Z b~ with Cov(y~|gamma) = A_y V A_y'"""
    y_hat = dm.X @ fit.beta + dm.W @ fit.gamma + dm.Z @ fit.blup_b
    maps = BlupMaps(dm, fit.penalty, fit.vc)
    return y_hat, maps.sandwich(maps.A_y, unconditional)

def residual_frame(dm: DesignMatrices, fit: FitResult) -> pd.DataFrame:
    """observed vs fitted diagnostics, one row per visit"""
    return pd.DataFrame({
        'subject': [s for s, _ in dm.row_index],
        't': [t for _, t in dm.row_index],
        'observed': dm.y,
        'fitted': fit.fitted,
        'residual': dm.y - fit.fitted,
    })
