import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple
import numpy as np
from scipy.optimize import minimize
from rich.console import Console
from core.config_utils import load_key
from core.errors import LongPeerError, UsageError, SingularBlockForMixedModel
from core.step1_dataset import DesignMatrices
from core.step2_penalty import BlockPenalty, PenaltySpec, make_penalty
from core.step3_1_ridge_blup import (VarianceComponents, FitResult, BlupMaps, covariance_structures,
                                     blup, _spd_solve)
from core.linalg_utils import spd_factor, spd_logdet

console = Console()

BOUNDARY_TOL = 1e-2
LOG_2PI = np.log(2 * np.pi)

@dataclass(frozen=True)
class RemlOptions:
    optimize: bool = True
    fixed: Optional[VarianceComponents] = None
    n_starts: int = 3
    start_seed: int = 0
    max_iter: int = 500
    ftol: float = 1e-8
    xtol: float = 1e-6
    log_bound: float = 18.0
    variance_floor: float = 1e-10
    unconditional: bool = False
    verbose: bool = False

    @classmethod
    def from_config(cls, **overrides) -> 'RemlOptions':
        reml = load_key('reml')
        opts = cls(n_starts=int(reml['n_starts']), start_seed=int(reml['start_seed']), max_iter=int(reml['max_iter']),
                   ftol=float(reml['ftol']), xtol=float(reml['xtol']), log_bound=float(reml['log_bound']),
                   variance_floor=float(reml['variance_floor']), unconditional=bool(load_key('bands.unconditional')))
        return replace(opts, **overrides)

# ------------
# restricted likelihood
# ------------
def restricted_loglik(dm: DesignMatrices, bp: BlockPenalty, vc: VarianceComponents) -> Tuple[float, np.ndarray]:
    """-1/2 [log|V1| + log|X'V1^-1 X| + r'V1^-1 r] - (n-k)/2 log(2 pi), r = y - X beta~"""
    cs = covariance_structures(dm, bp, vc)
    logdet_v1 = cs.logdet_v1(bp.gram_logdet)
    V1i_X = cs.solve_v1(dm.X)
    k = dm.X.shape[1]
    if k:
        xtx = dm.X.T @ V1i_X
        factor = spd_factor((xtx + xtx.T) / 2)
        logdet_x = spd_logdet(factor)
        beta = _spd_solve(xtx, V1i_X.T @ dm.y, "X'V1^-1 X")
    else:
        logdet_x, beta = 0.0, np.zeros(0)
    resid = dm.y - dm.X @ beta
    quad = float(resid @ cs.solve_v1(resid))
    loglik = -0.5 * (logdet_v1 + logdet_x + quad) - 0.5 * (dm.n - k) * LOG_2PI
    return loglik, beta

def n_variance_params(dm: DesignMatrices) -> int:
    return (dm.D + 1) + 1 + dm.r

def _unpack(theta: np.ndarray, D1: int, r: int) -> VarianceComponents:
    lam = np.exp(theta[:D1])
    return VarianceComponents(tuple(lam), float(np.exp(theta[D1])), np.diag(np.exp(theta[D1 + 1:D1 + 1 + r])))

def _starting_point(dm: DesignMatrices, unit: BlockPenalty) -> np.ndarray:
    var_y = float(np.var(dm.y, ddof=1)) if dm.n > 1 else 1.0
    var_y = var_y if var_y > 0 else 1.0
    D1, p = dm.D + 1, dm.p
    share = var_y / (2 * D1)
    log_lam = []
    for d, (_, pm) in enumerate(unit.blocks):
        Wd = dm.W[:, d * p:(d + 1) * p]
        trace = float(np.sum((Wd @ pm.gram_inverse) * Wd)) / dm.n
        log_lam.append(0.5 * np.log(trace / share) if trace > 0 else 0.0)
    return np.array(log_lam + [np.log(var_y / 2)] + [np.log(var_y / 4)] * dm.r)

def _bounds(x0: np.ndarray, D1: int, var_y: float, opts: RemlOptions) -> List[Tuple[float, float]]:
    floor = np.log(opts.variance_floor * var_y)
    bounds = [(x - opts.log_bound, x + opts.log_bound) for x in x0]
    for j in range(D1, x0.size):
        bounds[j] = (max(floor, x0[j] - opts.log_bound), x0[j] + opts.log_bound)
    # random-effect variances may go all the way down to the floor
    for j in range(D1 + 1, x0.size):
        bounds[j] = (floor, bounds[j][1])
    return bounds

def _param_names(dm: DesignMatrices) -> List[str]:
    return ([f"lambda_{d}" for d in range(dm.D + 1)] + ["sigma_eps_sq"] +
            [f"sigma_b_sq[{name}]" for name in dm.random_effects])

def expand_specs(dm: DesignMatrices, specs: Sequence[PenaltySpec]) -> List[PenaltySpec]:
    """One spec per component; a single spec is shared by every component"""
    specs = list(specs)
    if len(specs) == 1 and dm.D > 0:
        specs = specs * (dm.D + 1)
    if len(specs) != dm.D + 1:
        raise UsageError(f"Need {dm.D + 1} penalty specs (one per component), got {len(specs)}")
    return specs

def unit_penalty(dm: DesignMatrices, specs: Sequence[PenaltySpec]) -> BlockPenalty:
    return BlockPenalty(tuple((1.0, make_penalty(spec, dm.p)) for spec in expand_specs(dm, specs)))

# ------------
# fit
# ------------
def assemble_fit(dm: DesignMatrices, bp: BlockPenalty, vc: VarianceComponents, loglik: float, converged: bool,
                 n_iter: int, boundary=(), unconditional: bool = False, labels=()) -> FitResult:
    maps = BlupMaps(dm, bp, vc)
    beta, gamma, b = blup(dm, bp, vc, cs=maps.cs)
    cov_beta = maps.sandwich(maps.A_beta, unconditional)
    cov_gamma = maps.sandwich(maps.A_gamma, unconditional)
    q = n_variance_params(dm) + dm.X.shape[1]
    aic = -2 * loglik + 2 * q
    return FitResult(
        beta=beta, cov_beta=cov_beta, gamma=gamma, cov_gamma=cov_gamma, blup_b=b, vc=vc, penalty=bp,
        fitted=dm.X @ beta + dm.W @ gamma + dm.Z @ b, reml_loglik=float(loglik), aic=float(aic), n_params=q,
        converged=bool(converged), n_iter=int(n_iter), grid_points=dm.grid.points, time_structure=dm.time_structure,
        fixed_names=dm.fixed_names, boundary=tuple(boundary), unconditional=unconditional, penalty_labels=tuple(labels))

def reml_fit(dm: DesignMatrices, specs: Sequence[PenaltySpec], opts: Optional[RemlOptions] = None) -> FitResult:
    opts = opts or RemlOptions.from_config()
    unit = unit_penalty(dm, specs)
    labels = [spec.label for spec in expand_specs(dm, specs)]

    if not opts.optimize:
        if opts.fixed is None:
            raise UsageError("Optimization disabled but no fixed variance components given")
        bp = unit.with_lambdas(opts.fixed.lambdas)
        loglik = restricted_loglik(dm, bp, opts.fixed)[0] if bp.invertible else float('nan')
        return assemble_fit(dm, bp, opts.fixed, loglik, True, 0, unconditional=opts.unconditional, labels=labels)

    if not unit.invertible:
        raise SingularBlockForMixedModel("REML tuning needs invertible penalty blocks (ridge or decomposition)")

    D1, r = dm.D + 1, dm.r
    var_y = float(np.var(dm.y, ddof=1)) if dm.n > 1 else 1.0
    var_y = var_y if var_y > 0 else 1.0
    x0 = _starting_point(dm, unit)
    bounds = _bounds(x0, D1, var_y, opts)
    lo, hi = np.array([b[0] for b in bounds]), np.array([b[1] for b in bounds])

    def negloglik(theta):
        try:
            vc = _unpack(theta, D1, r)
            return -restricted_loglik(dm, unit.with_lambdas(vc.lambdas), vc)[0]
        except (LongPeerError, np.linalg.LinAlgError, FloatingPointError):
            return np.inf

    rng = np.random.default_rng(opts.start_seed)
    starts = [x0] + [np.clip(x0 + rng.normal(0.0, 1.0, x0.size), lo, hi) for _ in range(max(opts.n_starts, 1) - 1)]
    best, total_iter = None, 0
    for start in starts:
        f0 = negloglik(start)
        simplex = np.clip(np.vstack([start, start + np.eye(start.size)]), lo, hi)
        res = minimize(negloglik, start, method='Nelder-Mead', bounds=bounds,
                       options={'maxiter': opts.max_iter, 'xatol': opts.xtol,
                                'fatol': opts.ftol * max(1.0, abs(f0) if np.isfinite(f0) else 1.0),
                                'initial_simplex': simplex})
        total_iter += int(res.nit)
        if best is None or res.fun < best.fun:
            best = res
    if not np.isfinite(best.fun):
        raise SingularBlockForMixedModel("Restricted likelihood is not finite at any start")

    theta = np.clip(best.x, lo, hi)
    names = _param_names(dm)
    boundary = [names[j] for j in range(theta.size)
                if theta[j] - lo[j] < BOUNDARY_TOL or hi[j] - theta[j] < BOUNDARY_TOL]
    vc = _unpack(theta, D1, r)
    if boundary:
        console.print(f"[yellow]⚠️ BoundaryEstimate: {', '.join(boundary)} at the optimizer box bound[/yellow]")
    if not best.success:
        console.print(f"[yellow]⚠️ NoConvergence: REML stopped after {best.nit} iterations ({best.message})[/yellow]")
    if opts.verbose:
        console.print(f"[green]REML loglik {-best.fun:.6f}, lambda={np.round(vc.lambdas, 4)}, "
                      f"sigma_eps^2={vc.sigma_eps_sq:.4g}[/green]")
    return assemble_fit(dm, unit.with_lambdas(vc.lambdas), vc, -float(best.fun), bool(best.success), total_iter,
                        boundary=boundary, unconditional=opts.unconditional, labels=labels)
