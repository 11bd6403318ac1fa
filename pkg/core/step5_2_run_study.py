import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import concurrent.futures
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple
import numpy as np
import pandas as pd
from rich.console import Console
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn, BarColumn, TaskProgressColumn
from core.config_utils import load_key, get_max_workers, get_phi_grid
from core.errors import LongPeerError, UsageError
from core.step1_dataset import build_design
from core.step2_penalty import PenaltySpec
from core.step3_1_ridge_blup import component_band
from core.step3_2_reml_fit import RemlOptions, reml_fit
from core.step4_selection import phi_grid_search
from core.step5_1_gen_data import SimulationScenario, SimulatedReplicate, simulate_replicate

console = Console()

@dataclass(frozen=True)
class EstimatorConfig:
    penalty: str = 'decomposition'
    phi_a: float = 10.0
    phi_b: float = 1.0
    level: float = 0.95
    phi_grid: Optional[Tuple[float, ...]] = None
    reml: RemlOptions = field(default_factory=RemlOptions)

    @classmethod
    def from_scenario(cls, scenario: SimulationScenario, **overrides) -> 'EstimatorConfig':
        est = dict(scenario.estimator)
        grid = est.get('phi_grid')
        if grid is True:
            grid = get_phi_grid()
        cfg = cls(penalty=str(est.get('penalty', load_key('penalty.kind'))),
                  phi_a=float(est.get('phi_a', load_key('penalty.phi_a'))),
                  phi_b=float(est.get('phi_b', load_key('penalty.phi_b'))),
                  level=float(est.get('level', load_key('bands.level'))),
                  phi_grid=tuple(float(g) for g in grid) if grid else None,
                  reml=RemlOptions.from_config(unconditional=False))
        return replace(cfg, **overrides)

    def spec(self, Q: np.ndarray) -> PenaltySpec:
        if self.penalty == 'decomposition':
            return PenaltySpec('decomposition', Q=Q, phi_a=self.phi_a, phi_b=self.phi_b)
        return PenaltySpec(self.penalty)

@dataclass(frozen=True)
class ReplicateScore:
    replicate: int
    mse: Optional[np.ndarray] = None
    gamma_hat: Optional[np.ndarray] = None
    covered: Optional[np.ndarray] = None
    sspe: float = float('nan')
    sspe_noiseless: float = float('nan')
    sigma_eps: float = float('nan')
    realized_r2: float = float('nan')
    chosen_phi_a: Optional[float] = None
    profile: Tuple[dict, ...] = ()
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

def _pairwise_mean(stack: np.ndarray) -> np.ndarray:
    """mean over the leading (replicate) axis with numpy's pairwise summation"""
    moved = np.ascontiguousarray(np.moveaxis(stack, 0, -1))
    return moved.sum(axis=-1) / stack.shape[0]

def _score(fit, rep: SimulatedReplicate, level: float, N: int) -> dict:
    truth = rep.gammas
    gamma_hat = np.asarray(fit.gamma, dtype=float).reshape(truth.shape)
    covered = None
    if getattr(fit, 'cov_gamma', None) is not None:
        covered = np.vstack([component_band(fit, d, level).covers(truth[d]) for d in range(truth.shape[0])])
    y, fitted = rep.dataset.y, np.asarray(fit.fitted, dtype=float)
    return dict(mse=((gamma_hat - truth) ** 2).sum(axis=1), gamma_hat=gamma_hat, covered=covered,
                sspe=float(np.sum((y - fitted) ** 2) / N),
                sspe_noiseless=float(np.sum((rep.outcome.signal - fitted) ** 2) / N))

def score_replicate(scenario: SimulationScenario, replicate: int, cfg: EstimatorConfig,
                    fit_fn: Optional[Callable] = None) -> ReplicateScore:
    rep = simulate_replicate(scenario, replicate)
    base = dict(replicate=replicate, sigma_eps=rep.outcome.sigma_eps, realized_r2=rep.realized_r2)
    try:
        dm = build_design(rep.dataset, scenario.ts, scenario.quadrature, include_intercept=True, center=False)
        chosen_phi, profile = None, []
        if fit_fn is not None:
            fit = fit_fn(dm, rep)
        elif cfg.phi_grid:
            report = phi_grid_search(rep.dataset, scenario.ts, scenario.Q, cfg.phi_grid, cfg.reml, cfg.level,
                                     quadrature=scenario.quadrature, max_workers=1, show=False)
            fit, chosen_phi = report.chosen_candidate.fit, report.chosen_candidate.phi_a
            for c in report.candidates:
                if c.ok:
                    s = _score(c.fit, rep, cfg.level, scenario.N)
                    profile.append({'replicate': replicate, 'phi_a': c.phi_a, 'aic': c.aic, 'neg_half_aic': c.neg_half_aic,
                                    'sspe': s['sspe'], **{f'mse_{d}': v for d, v in enumerate(s['mse'])}})
        else:
            fit = reml_fit(dm, [cfg.spec(scenario.Q)], cfg.reml)
        return ReplicateScore(**base, **_score(fit, rep, cfg.level, scenario.N),
                              chosen_phi_a=chosen_phi, profile=tuple(profile))
    except LongPeerError as e:
        return ReplicateScore(**base, error=f"{e.kind}: {e.message}")

@dataclass(frozen=True)
class StudyMetrics:
    scenario: SimulationScenario
    replicates: int
    failures: int
    truth: np.ndarray
    per_replicate: pd.DataFrame
    mean_gamma: Optional[np.ndarray] = None
    mse: Optional[np.ndarray] = None
    trace_var: Optional[np.ndarray] = None
    sq_bias_norm: Optional[np.ndarray] = None
    sspe: float = float('nan')
    coverage: Optional[np.ndarray] = None
    coverage_undefined: bool = False
    phi_profile: Optional[pd.DataFrame] = None
    estimates: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        """MSE and SSPE table plus bookkeeping"""
        D1 = self.truth.shape[0]
        table = {}
        if self.mse is not None:
            for d in range(D1):
                table[f"MSE(gamma{d})"] = {"total": float(self.mse[d]), "variance": float(self.trace_var[d]),
                                           "bias_sq": float(self.sq_bias_norm[d])}
        table["SSPE"] = None if np.isnan(self.sspe) else float(self.sspe)
        ok = self.per_replicate[self.per_replicate['error'] == '']
        chosen = ok['chosen_phi_a'].dropna()
        return {
            "scenario": self.scenario.to_dict(),
            "seed": self.scenario.seed,
            "replicates": self.replicates,
            "failures": self.failures,
            "table": table,
            "mean_coverage": None if self.coverage is None else [float(c) for c in self.coverage.mean(axis=1)],
            "coverage_undefined": self.coverage_undefined,
            "mean_sigma_eps": float(ok['sigma_eps'].mean()) if len(ok) else None,
            "mean_realized_r2": float(ok['realized_r2'].mean()) if len(ok) else None,
            "chosen_phi_a_counts": {f"{k:g}": int(v) for k, v in chosen.value_counts().sort_index().items()},
        }

    def coverage_frame(self) -> pd.DataFrame:
        if self.coverage is None:
            return pd.DataFrame(columns=['component', 's', 'coverage'])
        s = self.scenario.grid.points
        return pd.DataFrame([{'component': f'gamma{d}', 's': s[j], 'coverage': self.coverage[d, j]}
                             for d in range(self.coverage.shape[0]) for j in range(s.size)])

    def estimates_frame(self) -> pd.DataFrame:
        """tidy plot data: truth, replicate mean and the 2.5/97.5% replicate quantiles per grid point"""
        s = self.scenario.grid.points
        series = {'truth': self.truth}
        if self.estimates is not None:
            series.update({'mean_estimate': self.mean_gamma,
                           'q025': np.quantile(self.estimates, 0.025, axis=0),
                           'q975': np.quantile(self.estimates, 0.975, axis=0)})
        return pd.DataFrame([{'component': f'gamma{d}', 'series': name, 's': s[j], 'value': values[d, j]}
                             for name, values in series.items()
                             for d in range(self.truth.shape[0]) for j in range(s.size)])

    def phi_profile_frame(self) -> Optional[pd.DataFrame]:
        if self.phi_profile is None or self.phi_profile.empty:
            return None
        return self.phi_profile.drop(columns='replicate').groupby('phi_a', as_index=False).mean()

def _aggregate(scenario: SimulationScenario, scores: List[ReplicateScore]) -> StudyMetrics:
    truth = scenario.gammas()
    rows = [{'replicate': s.replicate, 'error': s.error or '', 'sspe': s.sspe, 'sspe_noiseless': s.sspe_noiseless,
             'sigma_eps': s.sigma_eps, 'realized_r2': s.realized_r2, 'chosen_phi_a': s.chosen_phi_a,
             **{f'mse_{d}': (s.mse[d] if s.ok else np.nan) for d in range(truth.shape[0])}} for s in scores]
    per_replicate = pd.DataFrame(rows)
    ok = [s for s in scores if s.ok]
    profile = pd.DataFrame([row for s in ok for row in s.profile]) if any(s.profile for s in ok) else None
    base = dict(scenario=scenario, replicates=len(scores), failures=len(scores) - len(ok), truth=truth,
                per_replicate=per_replicate, phi_profile=profile)
    if not ok:
        return StudyMetrics(**base)

    estimates = np.stack([s.gamma_hat for s in ok])
    # taken about the truth: replicates equal to it give exact zeros
    mean_err = _pairwise_mean(estimates - truth)
    dev = (estimates - truth) - mean_err
    coverage_undefined = any(s.covered is None for s in ok)
    coverage = None if coverage_undefined else _pairwise_mean(np.stack([s.covered.astype(float) for s in ok]))
    return StudyMetrics(
        **base, mean_gamma=truth + mean_err,
        mse=_pairwise_mean(np.stack([s.mse for s in ok])),
        trace_var=_pairwise_mean((dev ** 2).sum(axis=2)),
        sq_bias_norm=(mean_err ** 2).sum(axis=1),
        sspe=float(_pairwise_mean(np.array([s.sspe for s in ok]))),
        coverage=coverage, coverage_undefined=coverage_undefined, estimates=estimates)

def run_study(scenario: SimulationScenario, replicates: int, estimator_config: Optional[EstimatorConfig] = None,
              fit_fn: Optional[Callable] = None, max_workers: Optional[int] = None) -> StudyMetrics:
    if replicates < 1:
        raise UsageError(f"replicates must be >= 1, got {replicates}")
    cfg = estimator_config or EstimatorConfig.from_scenario(scenario)
    workers = get_max_workers(max_workers)
    console.print(Panel(f"[bold green]🎲 {scenario.name}: {replicates} replicates, N={scenario.N}, "
                        f"seed={scenario.seed}[/]", border_style="blue"))

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TaskProgressColumn(),
        transient=True,
    ) as progress:
        task = progress.add_task("[cyan]Running replicates...", total=replicates)
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(score_replicate, scenario, k, cfg, fit_fn) for k in range(replicates)]
            scores = []
            for future in concurrent.futures.as_completed(futures):
                scores.append(future.result())
                progress.update(task, advance=1)
    scores.sort(key=lambda s: s.replicate)

    metrics = _aggregate(scenario, scores)
    if metrics.failures:
        console.print(f"[yellow]⚠️ {metrics.failures} of {replicates} replicates failed and are excluded[/yellow]")
    console.print("[bold green]✅ Study completed[/bold green]")
    return metrics
