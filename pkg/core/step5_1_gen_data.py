import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple
import numpy as np
import pandas as pd
from rich.console import Console
from core.config_utils import load_key
from core.errors import InvalidScenario
from core.step1_dataset import LongitudinalDataset, SampleGrid, TimeStructure, write_dataset

console = Console()

WIDTH_CODES = (2500.0, 1000.0, 250.0)
# spawn_key layout of a replicate: (replicate, stream)
STREAMS = {'predictors': 0, 'random_effects': 1, 'noise': 2}

@dataclass(frozen=True)
class BumpTable:
    """(h, amplitude, width) rows; h in index units 0-100, bump = exp(-width (u - h/100)^2)"""
    entries: Tuple[Tuple[float, float, float], ...] = ()

    def __post_init__(self):
        rows = tuple((float(h), float(a), float(w)) for h, a, w in self.entries)
        for h, _, w in rows:
            if not 0 <= h <= 100:
                raise InvalidScenario(f"Bump center {h} outside [0, 100]")
            if w not in WIDTH_CODES:
                raise InvalidScenario(f"Bump width {w} is not one of {WIDTH_CODES}")
        object.__setattr__(self, 'entries', rows)

    @property
    def amplitudes(self) -> np.ndarray:
        return np.array([a for _, a, _ in self.entries])

    def shapes(self, u: np.ndarray) -> np.ndarray:
        """J x p unit-amplitude bumps"""
        u = np.asarray(u, dtype=float)
        if not self.entries:
            return np.zeros((0, u.size))
        h = np.array([e[0] for e in self.entries])[:, None] / 100.0
        width = np.array([e[2] for e in self.entries])[:, None]
        return np.exp(-width * (u[None, :] - h) ** 2)

    def evaluate(self, u: np.ndarray, amplitudes: Optional[np.ndarray] = None) -> np.ndarray:
        amps = self.amplitudes if amplitudes is None else np.asarray(amplitudes, dtype=float)
        return amps @ self.shapes(u) if self.entries else np.zeros(np.asarray(u).size)

    def without_center(self, h: float) -> 'BumpTable':
        return BumpTable(tuple(e for e in self.entries if e[0] != float(h)))

    def to_list(self) -> list:
        return [list(e) for e in self.entries]

def gen_gamma(table: BumpTable, grid: SampleGrid) -> np.ndarray:
    return table.evaluate(grid.points)

# ------------
# scenario
# ------------
@dataclass(frozen=True)
class SimulationScenario:
    name: str = 'default'
    N: int = 100
    visit_times: Tuple[float, ...] = (0.0, 1.0, 2.0, 3.0)
    p: int = 100
    beta0: float = 0.06
    sigma_b: float = 0.05
    sigma_eps: Optional[float] = 0.02
    target_r2: Optional[float] = None
    predictor_noise_sd: float = 0.01
    xi_upper: float = 0.1
    seed: int = 7
    predictor_bumps: BumpTable = field(default_factory=BumpTable)
    gamma_bumps: Tuple[BumpTable, ...] = (BumpTable(),)
    q_bumps: BumpTable = field(default_factory=BumpTable)
    time_structure: str = 'none'
    quadrature: str = 'unit'
    estimator: Dict = field(default_factory=dict)

    def __post_init__(self):
        if (self.sigma_eps is None) == (self.target_r2 is None):
            raise InvalidScenario("Set exactly one of sigma_eps and target_r2")
        if self.target_r2 is not None and not 0 < self.target_r2 < 1:
            raise InvalidScenario(f"target_r2 must be in (0, 1), got {self.target_r2}")
        if self.N < 1 or not self.visit_times:
            raise InvalidScenario("Need N >= 1 subjects and at least one visit time")
        if len(self.gamma_bumps) != self.ts.D + 1:
            raise InvalidScenario(f"Time structure '{self.time_structure}' needs {self.ts.D + 1} gamma tables, "
                                  f"got {len(self.gamma_bumps)}")
        object.__setattr__(self, 'visit_times', tuple(float(t) for t in self.visit_times))

    @property
    def ts(self) -> TimeStructure:
        return TimeStructure.parse(self.time_structure)

    @property
    def grid(self) -> SampleGrid:
        return SampleGrid.equispaced(self.p)

    @property
    def Q(self) -> np.ndarray:
        """p x J preferred-space basis"""
        return self.q_bumps.shapes(self.grid.points).T

    def gammas(self) -> np.ndarray:
        return np.vstack([gen_gamma(table, self.grid) for table in self.gamma_bumps])

    @classmethod
    def from_dict(cls, data: dict) -> 'SimulationScenario':
        """Keys missing from `data` fall back to the simulation section of config.yaml"""
        cfg = load_key('simulation')
        merged = {k: cfg[k] for k in cfg}
        merged.update(data)
        if 'target_r2' in data and 'sigma_eps' not in data:
            merged['sigma_eps'] = None
        try:
            D = TimeStructure.parse(str(merged.get('time_structure', 'none'))).D
            # extra gamma tables beyond the time structure are ignored
            merged['gamma_bumps'] = list(merged['gamma_bumps'])[:D + 1]
            return cls(
                name=str(merged.get('name', 'default')), N=int(merged['N']),
                visit_times=tuple(merged['visit_times']), p=int(merged['p']),
                beta0=float(merged['beta0']), sigma_b=float(merged['sigma_b']),
                sigma_eps=None if merged.get('sigma_eps') is None else float(merged['sigma_eps']),
                target_r2=None if merged.get('target_r2') is None else float(merged['target_r2']),
                predictor_noise_sd=float(merged['predictor_noise_sd']), xi_upper=float(merged['xi_upper']),
                seed=int(merged['seed']),
                predictor_bumps=BumpTable(tuple(map(tuple, merged['predictor_bumps']))),
                gamma_bumps=tuple(BumpTable(tuple(map(tuple, t))) for t in merged['gamma_bumps']),
                q_bumps=BumpTable(tuple(map(tuple, merged['q_bumps']))),
                time_structure=str(merged.get('time_structure', 'none')),
                quadrature=str(merged.get('quadrature', 'unit')),
                estimator=dict(merged.get('estimator', {})))
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidScenario(f"Malformed scenario: {e}")

    @classmethod
    def from_config(cls, **overrides) -> 'SimulationScenario':
        return cls.from_dict(overrides)

    @classmethod
    def from_json(cls, path: str) -> 'SimulationScenario':
        if not os.path.exists(path):
            raise InvalidScenario(f"Scenario file not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return {
            "name": self.name, "N": self.N, "visit_times": list(self.visit_times), "p": self.p,
            "beta0": self.beta0, "sigma_b": self.sigma_b, "sigma_eps": self.sigma_eps, "target_r2": self.target_r2,
            "predictor_noise_sd": self.predictor_noise_sd, "xi_upper": self.xi_upper, "seed": self.seed,
            "predictor_bumps": self.predictor_bumps.to_list(),
            "gamma_bumps": [t.to_list() for t in self.gamma_bumps],
            "q_bumps": self.q_bumps.to_list(), "time_structure": self.time_structure,
            "quadrature": self.quadrature, "estimator": dict(self.estimator),
        }

# ------------
# generators
# ------------
def replicate_streams(seed: int, replicate: int) -> Dict[str, np.random.Generator]:
    """Counter-based Philox streams; replicate k is reproducible on its own"""
    return {name: np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(replicate, j))))
            for name, j in STREAMS.items()}

def gen_predictor(scenario: SimulationScenario, rng: np.random.Generator) -> np.ndarray:
    table = scenario.predictor_bumps
    xi = rng.uniform(0.0, scenario.xi_upper, len(table.entries))
    noise = rng.normal(0.0, 1.0, scenario.p) * scenario.predictor_noise_sd
    return table.evaluate(scenario.grid.points, table.amplitudes + xi) + noise

def predictor_mean(scenario: SimulationScenario) -> np.ndarray:
    table = scenario.predictor_bumps
    return table.evaluate(scenario.grid.points, table.amplitudes + scenario.xi_upper / 2)

def per_visit_variance(values: np.ndarray, times: np.ndarray) -> float:
    """average over visit times of the per-visit sample variance"""
    return float(np.mean([np.var(values[times == t], ddof=1) for t in np.unique(times)]))

@dataclass(frozen=True)
class OutcomeDraw:
    y: np.ndarray
    signal: np.ndarray       # y without the measurement error
    b: np.ndarray
    sigma_eps: float
    s_y_sq: float

def gen_outcomes(scenario: SimulationScenario, curves: np.ndarray, gammas: np.ndarray, times: np.ndarray,
                 subject_index: np.ndarray, rng_b: np.random.Generator, rng_eps: np.random.Generator) -> OutcomeDraw:
    """y_it = beta0 + delta w_it' gamma(t) + b_i + eps_it"""
    delta = 1.0 if scenario.quadrature == 'unit' else 1.0 / scenario.p
    F = scenario.ts.evaluate(times)
    gamma_t = F @ gammas
    b = rng_b.normal(0.0, 1.0, scenario.N) * scenario.sigma_b
    signal = scenario.beta0 + delta * np.sum(curves * gamma_t, axis=1) + b[subject_index]
    s_y_sq = per_visit_variance(signal, times) if scenario.N > 1 else 0.0
    if scenario.target_r2 is not None:
        sigma_eps = float(np.sqrt(s_y_sq * (1 - scenario.target_r2) / scenario.target_r2))
    else:
        sigma_eps = scenario.sigma_eps
    eps = rng_eps.normal(0.0, 1.0, signal.size) * sigma_eps
    return OutcomeDraw(y=signal + eps, signal=signal, b=b, sigma_eps=sigma_eps, s_y_sq=s_y_sq)

@dataclass(frozen=True)
class SimulatedReplicate:
    replicate: int
    dataset: LongitudinalDataset
    gammas: np.ndarray
    outcome: OutcomeDraw

    @property
    def realized_r2(self) -> float:
        obs = per_visit_variance(self.outcome.y, self.dataset.times)
        return self.outcome.s_y_sq / obs if obs > 0 else float('nan')

def simulate_replicate(scenario: SimulationScenario, replicate: int) -> SimulatedReplicate:
    streams = replicate_streams(scenario.seed, replicate)
    width = len(str(scenario.N))
    subjects = [f"s{i + 1:0{width}d}" for i in range(scenario.N)]
    n_visits = len(scenario.visit_times)
    subject_index = np.repeat(np.arange(scenario.N), n_visits)
    times = np.tile(np.array(scenario.visit_times), scenario.N)
    curves = np.vstack([gen_predictor(scenario, streams['predictors']) for _ in range(subject_index.size)])
    gammas = scenario.gammas()
    outcome = gen_outcomes(scenario, curves, gammas, times, subject_index, streams['random_effects'], streams['noise'])
    ds = LongitudinalDataset.from_arrays(scenario.grid, [subjects[i] for i in subject_index], times, outcome.y, curves)
    return SimulatedReplicate(replicate, ds, gammas, outcome)

def export_replicate(scenario: SimulationScenario, replicate: int, out_dir: str) -> Dict[str, str]:
    """outcomes.csv, curves.csv, grid.json and q_basis.csv of one replicate"""
    os.makedirs(out_dir, exist_ok=True)
    paths = {name: os.path.join(out_dir, name) for name in ('outcomes.csv', 'curves.csv', 'grid.json', 'q_basis.csv')}
    rep = simulate_replicate(scenario, replicate)
    write_dataset(rep.dataset, paths['outcomes.csv'], paths['curves.csv'], paths['grid.json'])
    pd.DataFrame(scenario.Q).to_csv(paths['q_basis.csv'], header=False, index=False, float_format='%.17g')
    console.print(f"[bold green]✅ Replicate {replicate} exported to {out_dir}[/bold green]")
    return paths
