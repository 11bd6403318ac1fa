"""
Filter-factor expansion of the penalized estimate in generalized singular vectors.

With W~ = V^{-1/2} W, y~ = V^{-1/2} y and L = lambda_0 L^s, the GSVD of (W~, L^s) gives
    gamma = sum_k f_k / sigma_k (u_k'y~) g_k,      f_k = sigma_k^2 / (sigma_k^2 + lambda_0^2 mu_k^2)
and closed forms for the shrinkage bias gamma - E[gamma^] and the variance.
Only valid when X = 0 or X'V^{-1}W = 0 and n <= m <= p~ <= m + n.
"""
import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dataclasses import dataclass
from typing import Optional
import numpy as np
from rich.console import Console
from core.config_utils import load_key
from core.errors import ShapeAssumptionViolated, UsageError
from core.step1_dataset import DesignMatrices, LongitudinalDataset, SampleGrid, TimeStructure, build_design
from core.step2_penalty import BlockPenalty, PenaltySpec, assemble_block
from core.step3_1_ridge_blup import VarianceComponents, ridge_solve, blup, conditional_covariances
from core.linalg_utils import BlockDiagonalCovariance, GsvdFactors, gsvd_pair, inv_sqrt_spd, solve_spd

console = Console()

ORTHOGONAL_TOL = 1e-10

@dataclass(frozen=True)
class ScaledProblem:
    W_tilde: np.ndarray
    y_tilde: np.ndarray
    L_scaled: np.ndarray
    lambda0: float
    cross_norm: float = 0.0   # relative size of X'V^-1 W

    @property
    def n(self) -> int:
        return self.W_tilde.shape[0]

    @property
    def m(self) -> int:
        return self.L_scaled.shape[0]

    @property
    def p_tilde(self) -> int:
        return self.W_tilde.shape[1]

def scale_problem(dm: DesignMatrices, bp: BlockPenalty, vc: VarianceComponents) -> ScaledProblem:
    v = BlockDiagonalCovariance(dm.z_rows, dm.subject_index, vc.sigma_eps_sq, vc.Sigma_b)
    Vis = inv_sqrt_spd(v.dense())
    W_tilde, y_tilde = Vis @ dm.W, Vis @ dm.y
    lambda0 = float(bp.lambdas[0])
    cross = 0.0
    if dm.X.shape[1]:
        X_tilde = Vis @ dm.X
        denom = np.linalg.norm(X_tilde) * np.linalg.norm(W_tilde)
        cross = float(np.linalg.norm(X_tilde.T @ W_tilde) / denom) if denom > 0 else 0.0
    return ScaledProblem(W_tilde=W_tilde, y_tilde=y_tilde, L_scaled=bp.assembled / lambda0,
                         lambda0=lambda0, cross_norm=cross)

def check_shapes(sp: ScaledProblem):
    n, m, p = sp.n, sp.m, sp.p_tilde
    if not (n <= m <= p <= m + n):
        raise ShapeAssumptionViolated(f"Need n <= m <= p~ <= m + n, got n={n}, m={m}, p~={p}")
    if sp.cross_norm > ORTHOGONAL_TOL:
        raise ShapeAssumptionViolated(f"X'V^-1 W is not zero (relative size {sp.cross_norm:.2e})")

def gsvd_of(sp: ScaledProblem) -> GsvdFactors:
    check_shapes(sp)
    return gsvd_pair(sp.W_tilde, sp.L_scaled)

def filter_factors(sp: ScaledProblem, gf: GsvdFactors) -> np.ndarray:
    """sigma_k^2 / (sigma_k^2 + lambda_0^2 mu_k^2), zero on the columns A annihilates"""
    a2, b2 = gf.alpha ** 2, (sp.lambda0 * gf.beta) ** 2
    f = np.zeros_like(gf.alpha)
    data = slice(gf.p_tilde - gf.n, gf.p_tilde)
    f[data] = a2[data] / (a2[data] + b2[data])
    return f

def peer_estimate(sp: ScaledProblem, gf: GsvdFactors) -> np.ndarray:
    check_shapes(sp)
    p, n, c = gf.p_tilde, gf.n, gf.null_dim
    coords = gf.U.T @ sp.y_tilde            # u_k'y~ for k = p-n .. p-1
    a, b = gf.alpha, sp.lambda0 * gf.beta
    gamma = np.zeros(p)
    for k in range(p - n, p - c):
        gamma += a[k] / (a[k] ** 2 + b[k] ** 2) * coords[k - (p - n)] * gf.G[:, k]
    for k in range(p - c, p):
        gamma += coords[k - (p - n)] * gf.G[:, k]
    return gamma

def bias_gsvd(sp: ScaledProblem, gf: GsvdFactors, gamma_true: np.ndarray) -> np.ndarray:
    """gamma - E[gamma^] = (W'V^-1 W + L'L)^-1 L'L gamma"""
    check_shapes(sp)
    shrink = 1.0 - filter_factors(sp, gf)
    shrink[gf.p_tilde - gf.null_dim:] = 0.0
    return gf.G @ (shrink * (gf.G_inv @ np.asarray(gamma_true, dtype=float)))

def variance_gsvd(sp: ScaledProblem, gf: GsvdFactors) -> np.ndarray:
    check_shapes(sp)
    a2, b2 = gf.alpha ** 2, (sp.lambda0 * gf.beta) ** 2
    weights = np.zeros_like(a2)
    paired = slice(gf.p_tilde - gf.n, gf.p_tilde - gf.null_dim)
    weights[paired] = a2[paired] / (a2[paired] + b2[paired]) ** 2
    weights[gf.p_tilde - gf.null_dim:] = 1.0
    out = (gf.G * weights) @ gf.G.T
    return (out + out.T) / 2

def mse_decomposition(sp: ScaledProblem, gf: GsvdFactors, gamma_true: np.ndarray):
    """(trace of variance, squared bias norm)"""
    bias = bias_gsvd(sp, gf, gamma_true)
    return float(np.trace(variance_gsvd(sp, gf))), float(bias @ bias)

def general_x_estimate(dm: DesignMatrices, bp: BlockPenalty, vc: VarianceComponents) -> np.ndarray:
    """gamma^ = -A_1 X'V^-1 y + A_2 W'V^-1 y for arbitrary X"""
    console.print("[yellow]⚠️ A_2 is the inverse of the Schur complement W'V^-1W + L'L - W'V^-1X(X'V^-1X)^-1X'V^-1W[/yellow]")
    v = BlockDiagonalCovariance(dm.z_rows, dm.subject_index, vc.sigma_eps_sq, vc.Sigma_b)
    Vi_X, Vi_W = v.solve(dm.X), v.solve(dm.W)
    XtViX, XtViW, WtViW = dm.X.T @ Vi_X, dm.X.T @ Vi_W, dm.W.T @ Vi_W
    XtViX_inv_XtViW = solve_spd((XtViX + XtViX.T) / 2, XtViW) if dm.X.shape[1] else np.zeros((0, dm.W.shape[1]))
    schur = WtViW + bp.gram - XtViW.T @ XtViX_inv_XtViW
    A2 = solve_spd((schur + schur.T) / 2, np.eye(schur.shape[0]))
    A1 = A2 @ XtViX_inv_XtViW.T
    return -A1 @ (Vi_X.T @ dm.y) + A2 @ (Vi_W.T @ dm.y)

# ------------
# cross-check
# ------------
def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(float(np.linalg.norm(b)), np.finfo(float).tiny)
    return float(np.linalg.norm(a - b) / scale)

def cross_check(dm: DesignMatrices, bp: BlockPenalty, vc: VarianceComponents) -> dict:
    beta_r, gamma_r = ridge_solve(dm, bp, vc)
    beta_b, gamma_b, _ = blup(dm, bp, vc)
    report = {
        "ridge_vs_blup_beta": _rel(beta_b, beta_r) if beta_r.size else 0.0,
        "ridge_vs_blup_gamma": _rel(gamma_b, gamma_r),
        "general_x_vs_ridge": _rel(general_x_estimate(dm, bp, vc), gamma_r),
    }
    sp = scale_problem(dm, bp, vc)
    gf = gsvd_of(sp)
    _, cov_gamma = conditional_covariances(dm, bp, vc)
    report["gsvd_vs_ridge_gamma"] = _rel(peer_estimate(sp, gf), gamma_r)
    report["gsvd_vs_conditional_covariance"] = _rel(variance_gsvd(sp, gf), cov_gamma)
    report["max_discrepancy"] = max(report.values())
    report.update({"n": sp.n, "m": sp.m, "p_tilde": sp.p_tilde, "ell": gf.ell, "null_dim": gf.null_dim})
    return report

def random_instance(seed: int, n_subjects: Optional[int] = None, visits: Optional[int] = None, p: Optional[int] = None,
                    D: Optional[int] = None, penalty: str = 'ridge'):
    """Small X = 0 problem with a random-intercept V for the cross-check"""
    cfg = load_key('gsvd_check')
    n_subjects = n_subjects or int(cfg['n_subjects'])
    visits = visits or int(cfg['visits'])
    p = p or int(cfg['p'])
    D = int(cfg['D']) if D is None else D
    if D > visits - 1:
        raise UsageError(f"D={D} needs at least {D + 1} visits per subject")
    rng = np.random.default_rng(seed)
    subjects = np.repeat([f"s{i + 1}" for i in range(n_subjects)], visits)
    times = np.tile(np.arange(visits, dtype=float), n_subjects)
    W = rng.normal(size=(subjects.size, p))
    y = rng.normal(size=subjects.size)
    ds = LongitudinalDataset.from_arrays(SampleGrid.equispaced(p), subjects, times, y, W)
    ts = TimeStructure.parse(','.join(['t'] + [f't{k}' for k in range(2, D + 1)]) if D else None)
    dm = build_design(ds, ts, quadrature='unit', include_intercept=False, center=False)
    if penalty == 'decomposition':
        spec = PenaltySpec('decomposition', Q=rng.normal(size=(p, 2)), phi_a=10.0, phi_b=1.0)
    else:
        spec = PenaltySpec(penalty)
    lambdas = rng.uniform(0.5, 2.0, D + 1)
    bp = assemble_block([spec] * (D + 1), lambdas, p)
    vc = VarianceComponents.scalar(lambdas, float(rng.uniform(0.5, 1.5)), float(rng.uniform(0.1, 0.5)))
    return dm, bp, vc
