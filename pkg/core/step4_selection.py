import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import json
import concurrent.futures
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
import jsonschema
from rich.console import Console
from rich.table import Table
from rich.progress import Progress, SpinnerColumn, TextColumn
from core.config_utils import load_key, get_phi_grid, get_max_workers
from core.errors import AllCandidatesFailed, LongPeerError, NonPositivePhi, UsageError
from core.step1_dataset import LongitudinalDataset, TimeStructure, build_design
from core.step2_penalty import PenaltySpec
from core.step3_1_ridge_blup import FitResult, component_band
from core.step3_2_reml_fit import RemlOptions, reml_fit

console = Console()

SCHEMA_FILE = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
                           'schemas', 'selection_report.schema.json')

@dataclass(frozen=True)
class CandidateResult:
    label: str
    time_structure: TimeStructure
    phi_a: Optional[float]
    covariates: Tuple[str, ...] = ()
    aic: float = float('nan')
    reml_loglik: float = float('nan')
    converged: bool = False
    lambdas: Tuple[float, ...] = ()
    sigma_eps_sq: float = float('nan')
    sigma_b_sq: Tuple[float, ...] = ()
    band_nullity: Tuple[float, ...] = ()
    all_null: Tuple[bool, ...] = ()
    error: Optional[str] = None
    fit: Optional[FitResult] = field(default=None, repr=False, compare=False)

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def neg_half_aic(self) -> float:
        return -self.aic / 2

    @property
    def D(self) -> int:
        return self.time_structure.D

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "time_structure": self.time_structure.text,
            "time_structure_label": self.time_structure.label,
            "D": self.D,
            "phi_a": self.phi_a,
            "covariates": list(self.covariates),
            "aic": None if not self.ok else self.aic,
            "neg_half_aic": None if not self.ok else self.neg_half_aic,
            "reml_loglik": None if not self.ok else self.reml_loglik,
            "converged": self.converged,
            "lambda": list(self.lambdas),
            "sigma_eps_sq": None if not self.ok else self.sigma_eps_sq,
            "sigma_b_sq": list(self.sigma_b_sq),
            "band_nullity": list(self.band_nullity),
            "all_null": list(self.all_null),
            "error": self.error,
        }


@dataclass(frozen=True)
class SelectionReport:
    candidates: Tuple[CandidateResult, ...]
    chosen: int
    drop_recommendations: Tuple[str, ...] = ()
    level: float = 0.95

    @property
    def chosen_candidate(self) -> CandidateResult:
        return self.candidates[self.chosen]

    def to_dict(self) -> dict:
        return {
            "chosen": self.chosen,
            "chosen_label": self.chosen_candidate.label,
            "level": self.level,
            "drop_recommendations": list(self.drop_recommendations),
            "candidates": [c.to_dict() for c in self.candidates],
        }

    def to_frame(self) -> pd.DataFrame:
        """Columns of the AIC comparison table"""
        return pd.DataFrame([{
            'Scalar covariates': ' + '.join(c.covariates) or 'none',
            'Time structure': c.time_structure.label,
            'phi_a': c.phi_a,
            'AIC': c.aic if c.ok else np.nan,
            '-AIC/2': c.neg_half_aic if c.ok else np.nan,
            'converged': c.converged,
            'chosen': i == self.chosen,
            'error': c.error or '',
        } for i, c in enumerate(self.candidates)])

def validate_report(report: dict):
    with open(SCHEMA_FILE, 'r', encoding='utf-8') as f:
        schema = json.load(f)
    jsonschema.validate(instance=report, schema=schema)

# ------------
# fitting candidates
# ------------
def _fit_candidate(ds: LongitudinalDataset, ts: TimeStructure, spec: PenaltySpec, label: str,
                   phi_a: Optional[float], opts: RemlOptions, level: float, quadrature: Optional[str]) -> CandidateResult:
    try:
        dm = build_design(ds, ts, quadrature)
        fit = reml_fit(dm, [spec], opts)
        nullity, all_null = [], []
        for d in range(ts.D + 1):
            excl = component_band(fit, d, level).excludes_zero()
            nullity.append(float(np.mean(excl)))
            all_null.append(not bool(excl.any()))
        return CandidateResult(
            label=label, time_structure=ts, phi_a=phi_a, covariates=ds.covariate_names, aic=fit.aic,
            reml_loglik=fit.reml_loglik, converged=fit.converged, lambdas=fit.vc.lambdas,
            sigma_eps_sq=fit.vc.sigma_eps_sq, sigma_b_sq=tuple(np.diag(fit.vc.Sigma_b)),
            band_nullity=tuple(nullity), all_null=tuple(all_null), fit=fit)
    except LongPeerError as e:
        return CandidateResult(label=label, time_structure=ts, phi_a=phi_a, covariates=ds.covariate_names,
                               error=f"{e.kind}: {e.message}")

def _run_jobs(jobs: list, max_workers: int, description: str) -> List[CandidateResult]:
    if max_workers <= 1 or len(jobs) == 1:
        return [_fit_candidate(*job) for job in jobs]
    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        transient=True,
    ) as progress:
        task = progress.add_task(f"[cyan]{description}", total=len(jobs))
        with concurrent.futures.ThreadPoolExecutor(max_workers=max_workers) as executor:
            futures = {executor.submit(_fit_candidate, *job): i for i, job in enumerate(jobs)}
            results = []
            for future in concurrent.futures.as_completed(futures):
                results.append((futures[future], future.result()))
                progress.update(task, advance=1)
    results.sort(key=lambda x: x[0])
    return [r for _, r in results]

def _choose(candidates: Sequence[CandidateResult], tie_tol: float) -> CandidateResult:
    ok = [c for c in candidates if c.ok]
    if not ok:
        raise AllCandidatesFailed("Every candidate fit failed: " + "; ".join(c.error for c in candidates))
    pool = [c for c in ok if c.converged] or ok
    best = min(c.aic for c in pool)
    tied = [c for c in pool if c.aic - best < tie_tol]
    return min(tied, key=lambda c: (c.D, c.phi_a if c.phi_a is not None else 0.0, c.aic, c.label))

def _report(candidates: List[CandidateResult], level: float, tie_tol: float, show: bool = True) -> SelectionReport:
    chosen = _choose(candidates, tie_tol)
    ordered = sorted(candidates, key=lambda c: (not c.ok, c.aic if c.ok else 0.0, c.D,
                                                c.phi_a if c.phi_a is not None else 0.0, c.label))
    drops = tuple(f"gamma{d} ({chosen.time_structure.basis[d - 1].label})"
                  for d in range(1, chosen.D + 1) if chosen.all_null[d])
    chosen_index = next(i for i, c in enumerate(ordered) if c is chosen)
    report = SelectionReport(tuple(ordered), chosen_index, drops, level)
    if show:
        _print_report(report)
    return report

def _print_report(report: SelectionReport):
    table = Table(title="📊 Candidate comparison")
    for col in ("", "Time structure", "phi_a", "AIC", "converged"):
        table.add_column(col)
    for i, c in enumerate(report.candidates):
        table.add_row("✅" if i == report.chosen else "", c.time_structure.label,
                      "-" if c.phi_a is None else f"{c.phi_a:g}",
                      f"{c.aic:.3f}" if c.ok else f"[red]{c.error}[/red]", str(c.converged))
    console.print(table)
    if report.drop_recommendations:
        console.print(f"[yellow]Band contains 0 everywhere, consider dropping: {', '.join(report.drop_recommendations)}[/yellow]")

def _defaults(opts, level, tie_tol):
    opts = replace(opts or RemlOptions.from_config(), unconditional=False)
    level = float(load_key('bands.level')) if level is None else level
    tie_tol = float(load_key('selection.tie_tol')) if tie_tol is None else tie_tol
    return opts, level, tie_tol

def _check_grid(grid: Optional[Sequence[float]]) -> List[float]:
    grid = get_phi_grid() if grid is None else [float(g) for g in grid]
    if not grid:
        raise UsageError("phi_a grid is empty")
    if min(grid) <= 0:
        raise NonPositivePhi(f"phi_a grid values must be positive, got {grid}")
    return grid

# ------------
# public operations
# ------------
def phi_grid_search(ds: LongitudinalDataset, ts: TimeStructure, Q: np.ndarray, grid: Optional[Sequence[float]] = None,
                    opts: Optional[RemlOptions] = None, level: Optional[float] = None, tie_tol: Optional[float] = None,
                    quadrature: Optional[str] = None, max_workers: Optional[int] = None, show: bool = True) -> SelectionReport:
    """One REML fit per phi_a with phi_b = 1"""
    grid = _check_grid(grid)
    opts, level, tie_tol = _defaults(opts, level, tie_tol)
    jobs = [(ds, ts, PenaltySpec('decomposition', Q=Q, phi_a=phi, phi_b=1.0), f"phi_a={phi:g}", phi, opts, level, quadrature)
            for phi in grid]
    return _report(_run_jobs(jobs, get_max_workers(max_workers), "Fitting phi_a grid..."), level, tie_tol, show)

def compare_time_structures(ds: LongitudinalDataset, candidates: Sequence[TimeStructure], penalty_spec: PenaltySpec,
                            opts: Optional[RemlOptions] = None, level: Optional[float] = None,
                            tie_tol: Optional[float] = None, quadrature: Optional[str] = None,
                            max_workers: Optional[int] = None, show: bool = True) -> SelectionReport:
    if not candidates:
        raise UsageError("Need at least one candidate time structure")
    opts, level, tie_tol = _defaults(opts, level, tie_tol)
    phi = penalty_spec.phi_a if penalty_spec.kind == 'decomposition' else None
    jobs = [(ds, ts, penalty_spec, ts.label, phi, opts, level, quadrature) for ts in candidates]
    return _report(_run_jobs(jobs, get_max_workers(max_workers), "Fitting time structures..."), level, tie_tol, show)

def joint_search(ds: LongitudinalDataset, candidates: Sequence[TimeStructure], Q: np.ndarray,
                 grid: Optional[Sequence[float]] = None, opts: Optional[RemlOptions] = None,
                 level: Optional[float] = None, tie_tol: Optional[float] = None, quadrature: Optional[str] = None,
                 max_workers: Optional[int] = None, show: bool = True) -> SelectionReport:
    """Every (time structure, phi_a) pair, for tables comparing both at once"""
    if not candidates:
        raise UsageError("Need at least one candidate time structure")
    grid = _check_grid(grid)
    opts, level, tie_tol = _defaults(opts, level, tie_tol)
    jobs = [(ds, ts, PenaltySpec('decomposition', Q=Q, phi_a=phi, phi_b=1.0), f"{ts.label} | phi_a={phi:g}",
             phi, opts, level, quadrature) for ts in candidates for phi in grid]
    return _report(_run_jobs(jobs, get_max_workers(max_workers), "Fitting candidates..."), level, tie_tol, show)
