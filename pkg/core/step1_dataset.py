import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union
import numpy as np
import pandas as pd
from rich.console import Console
from core.config_utils import load_key
from core.errors import (MissingCurve, GridMismatch, NonFiniteValue, DuplicateRecord, InvalidTimeBasis,
                         RankDeficientTimeBasis, UsageError, MalformedFile)
from core.linalg_utils import numerical_rank

console = Console()

ZERO_TOL = 1e-12
INTERCEPT = 'intercept'

def _frozen_array(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    if arr.ndim != ndim:
        arr = arr.reshape((-1,) if ndim == 1 else (arr.shape[0], -1))
    arr.setflags(write=False)
    return arr

# ------------
# sampling grid
# ------------
@dataclass(frozen=True)
class SampleGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = _frozen_array(self.points, 1)
        if pts.size < 2:
            raise GridMismatch(f"Grid needs p >= 2 points, got {pts.size}")
        if not np.all(np.isfinite(pts)) or pts.min() < 0 or pts.max() > 1:
            raise GridMismatch("Grid points must lie in [0, 1]")
        if np.any(np.diff(pts) <= 0):
            raise GridMismatch("Grid points must be strictly increasing")
        object.__setattr__(self, 'points', pts)

    @property
    def p(self) -> int:
        return self.points.size

    @classmethod
    def equispaced(cls, p: int) -> 'SampleGrid':
        return cls(np.arange(p, dtype=float) / (p - 1))

    @classmethod
    def from_spec(cls, spec: Union[dict, str, os.PathLike]) -> 'SampleGrid':
        """`{"p": int, "points": [...]}` or `{"p": int, "equispaced": true}`, inline or as a JSON path"""
        if not isinstance(spec, dict):
            if not os.path.exists(spec):
                raise MalformedFile(f"Grid file not found: {spec}")
            with open(spec, 'r', encoding='utf-8') as f:
                spec = json.load(f)
        p = int(spec['p'])
        if spec.get('points') is not None:
            grid = cls(spec['points'])
            if grid.p != p:
                raise GridMismatch(f"Grid spec says p={p} but lists {grid.p} points")
            return grid
        if spec.get('equispaced'):
            return cls.equispaced(p)
        raise MalformedFile("Grid spec needs either `points` or `equispaced: true`")

    def to_spec(self) -> dict:
        return {"p": self.p, "points": [float(v) for v in self.points]}

# ------------
# time structure
# ------------
@dataclass(frozen=True)
class TimeFunction:
    kind: str                     # power | expm1 | log1p | table
    power: int = 1
    table: Tuple[Tuple[float, float], ...] = ()
    source: str = ''

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == 'power':
            return t ** self.power
        if self.kind == 'expm1':
            return np.expm1(t)
        if self.kind == 'log1p':
            return np.log1p(t)
        if self.kind == 'table':
            ts, vs = np.array(self.table).T
            return np.interp(t, ts, vs, left=np.nan, right=np.nan)
        raise InvalidTimeBasis(f"Unknown time function kind: {self.kind}")

    @property
    def token(self) -> str:
        if self.kind == 'power':
            return 't' if self.power == 1 else f't{self.power}'
        if self.kind == 'table':
            return f'table:{self.source}'
        return self.kind

    @property
    def label(self) -> str:
        return {'power': 't' if self.power == 1 else f't^{self.power}',
                'expm1': '(exp(t)-1)', 'log1p': 'log(t+1)',
                'table': f'f[{os.path.basename(self.source) or "table"}](t)'}[self.kind]

    @classmethod
    def parse(cls, token: str) -> 'TimeFunction':
        token = token.strip()
        if token in ('expm1', 'log1p'):
            return cls(kind=token)
        if token.startswith('table:'):
            path = token[len('table:'):]
            if not os.path.exists(path):
                raise InvalidTimeBasis(f"Time table not found: {path}")
            df = pd.read_csv(path, header=None, comment='#')
            pairs = tuple(sorted((float(a), float(b)) for a, b in df.iloc[:, :2].to_numpy()))
            return cls(kind='table', table=pairs, source=path)
        power = token.replace('^', '')[1:] if token.startswith('t') else None
        if power is not None and (power == '' or power.isdigit()):
            k = int(power or 1)
            if k >= 1:
                return cls(kind='power', power=k)
        raise InvalidTimeBasis(f"Cannot parse time basis token '{token}' (use t, t2, expm1, log1p, table:<csv>)")


@dataclass(frozen=True)
class TimeStructure:
    basis: Tuple[TimeFunction, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'basis', tuple(self.basis))
        for f in self.basis:
            value = f(np.array([0.0]))[0]
            if not np.isfinite(value) or abs(value) > ZERO_TOL:
                raise InvalidTimeBasis(f"Time function {f.label} is {value} at t=0, must vanish")

    @property
    def D(self) -> int:
        return len(self.basis)

    @classmethod
    def parse(cls, text: Optional[str]) -> 'TimeStructure':
        """`t`, `t,t2`, `expm1`, `log1p`, `table:<csv>`; empty or `none` gives the time-invariant model"""
        if text is None or text.strip().lower() in ('', 'none', '0'):
            return cls(())
        return cls(tuple(TimeFunction.parse(tok) for tok in text.split(',')))

    def evaluate(self, times) -> np.ndarray:
        """[1, f_1(t), ..., f_D(t)] for every t"""
        times = np.atleast_1d(np.asarray(times, dtype=float))
        cols = [np.ones_like(times)] + [f(times) for f in self.basis]
        return np.column_stack(cols)

    def check_independence(self, times):
        F = self.evaluate(np.unique(np.asarray(times, dtype=float)))
        if not np.all(np.isfinite(F)):
            raise NonFiniteValue("Time basis is not finite at every observed time")
        if numerical_rank(F) < self.D + 1:
            raise RankDeficientTimeBasis(
                f"[1, f_1(t), ..., f_D(t)] has rank {numerical_rank(F)} < {self.D + 1} on the observed times")

    @property
    def text(self) -> str:
        return ','.join(f.token for f in self.basis) or 'none'

    @property
    def label(self) -> str:
        return ' + '.join(['gamma0'] + [f"{f.label}*gamma{d + 1}" for d, f in enumerate(self.basis)])

# ------------
# records
# ------------
@dataclass(frozen=True)
class FunctionalRecord:
    subject_id: str
    t: float
    y: float
    x: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'subject_id', str(self.subject_id))
        object.__setattr__(self, 'x', _frozen_array(self.x, 1))
        object.__setattr__(self, 'w', _frozen_array(self.w, 1))
        if not (np.isfinite(self.t) and np.isfinite(self.y)):
            raise NonFiniteValue(f"Non-finite t or y for subject {self.subject_id}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.w))):
            raise NonFiniteValue(f"Non-finite covariate or curve value for subject {self.subject_id} at t={self.t}")


@dataclass(frozen=True)
class LongitudinalDataset:
    grid: SampleGrid
    records: Tuple[FunctionalRecord, ...]
    covariate_names: Tuple[str, ...] = ()
    random_effects: Tuple[str, ...] = (INTERCEPT,)

    def __post_init__(self):
        K, p = len(self.covariate_names), self.grid.p
        if not self.records:
            raise MalformedFile("Dataset has no records")
        seen = set()
        for rec in self.records:
            if rec.w.size != p:
                raise GridMismatch(f"Curve of subject {rec.subject_id} at t={rec.t} has {rec.w.size} samples, grid has p={p}")
            if rec.x.size != K:
                raise MalformedFile(f"Record of subject {rec.subject_id} has {rec.x.size} covariates, expected {K}")
            key = (rec.subject_id, rec.t)
            if key in seen:
                raise DuplicateRecord(f"Duplicate visit (subject={rec.subject_id}, t={rec.t})")
            seen.add(key)
        unknown = [c for c in self.random_effects if c != INTERCEPT and c not in self.covariate_names]
        if unknown or not self.random_effects:
            raise UsageError(f"Random effects must be a nonempty subset of intercept + covariates, got {list(self.random_effects)}")

        # group by subject in order of first appearance, keep visit order within a subject
        first_seen: Dict[str, int] = {}
        for rec in self.records:
            first_seen.setdefault(rec.subject_id, len(first_seen))
        grouped = sorted(enumerate(self.records), key=lambda ir: (first_seen[ir[1].subject_id], ir[0]))
        object.__setattr__(self, 'records', tuple(rec for _, rec in grouped))
        object.__setattr__(self, 'covariate_names', tuple(self.covariate_names))
        object.__setattr__(self, 'random_effects', tuple(self.random_effects))

    @cached_property
    def subjects(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(rec.subject_id for rec in self.records))

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_total(self) -> int:
        return len(self.records)

    @cached_property
    def subject_index(self) -> np.ndarray:
        pos = {s: i for i, s in enumerate(self.subjects)}
        return np.array([pos[rec.subject_id] for rec in self.records])

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([rec.t for rec in self.records])

    @cached_property
    def y(self) -> np.ndarray:
        return np.array([rec.y for rec in self.records])

    @cached_property
    def x_raw(self) -> np.ndarray:
        return np.vstack([rec.x for rec in self.records]) if self.covariate_names else np.zeros((self.n_total, 0))

    @cached_property
    def w_raw(self) -> np.ndarray:
        return np.vstack([rec.w for rec in self.records])

    @classmethod
    def from_arrays(cls, grid: SampleGrid, subject_ids: Sequence, times, y, W, X=None,
                    covariate_names: Sequence[str] = (), random_effects: Sequence[str] = (INTERCEPT,)) -> 'LongitudinalDataset':
        W = np.asarray(W, dtype=float)
        X = np.zeros((W.shape[0], 0)) if X is None else np.asarray(X, dtype=float).reshape(W.shape[0], -1)
        records = tuple(FunctionalRecord(str(s), float(t), float(v), x, w)
                        for s, t, v, x, w in zip(subject_ids, times, y, X, W))
        return cls(grid, records, tuple(covariate_names), tuple(random_effects))

    def with_covariates(self, names: Sequence[str]) -> 'LongitudinalDataset':
        """Keep only the listed scalar covariates"""
        missing = [n for n in names if n not in self.covariate_names]
        if missing:
            raise UsageError(f"Unknown covariates: {missing}")
        cols = [self.covariate_names.index(n) for n in names]
        re = tuple(r for r in self.random_effects if r == INTERCEPT or r in names) or (INTERCEPT,)
        return LongitudinalDataset.from_arrays(self.grid, [r.subject_id for r in self.records], self.times, self.y,
                                               self.w_raw, self.x_raw[:, cols], tuple(names), re)

# ------------
# file io
# ------------
def _read_string_table(path: str, what: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise MalformedFile(f"{what} file not found: {path}")
    try:
        return pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.ParserError as e:
        raise GridMismatch(f"{what} file has rows with more fields than its header: {e}")

def _to_float(df: pd.DataFrame, columns: List[str], what: str) -> np.ndarray:
    try:
        values = df[columns].astype(float).to_numpy()
    except ValueError as e:
        raise MalformedFile(f"{what} file has a non-numeric entry: {e}")
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue(f"{what} file has NaN or infinite values")
    return values

def load_dataset(outcomes_path: str, curves_path: str, grid_spec, random_effects: Optional[Sequence[str]] = None) -> LongitudinalDataset:
    grid = SampleGrid.from_spec(grid_spec)
    outcomes = _read_string_table(outcomes_path, 'Outcomes')
    curves = _read_string_table(curves_path, 'Curves')

    for name, df, needed in (('Outcomes', outcomes, ['subject', 't', 'y']), ('Curves', curves, ['subject', 't'])):
        absent = [c for c in needed if c not in df.columns]
        if absent:
            raise MalformedFile(f"{name} file is missing columns {absent}")

    w_cols = [c for c in curves.columns if c not in ('subject', 't')]
    if len(w_cols) != grid.p:
        raise GridMismatch(f"Curves file has {len(w_cols)} sample columns, grid has p={grid.p}")
    present = curves[w_cols].notna() & (curves[w_cols] != '')
    short_rows = ~present.all(axis=1)
    if short_rows.any():
        row = int(np.flatnonzero(short_rows.to_numpy())[0])
        n_samples = int(present.iloc[row].sum())
        raise GridMismatch(f"Curves row {row + 1} has {n_samples} samples, grid has p={grid.p}")

    covariate_names = [c for c in outcomes.columns if c not in ('subject', 't', 'y')]
    o_vals = _to_float(outcomes, ['t', 'y'] + covariate_names, 'Outcomes')
    c_t = _to_float(curves, ['t'], 'Curves')[:, 0]
    c_w = _to_float(curves, w_cols, 'Curves')

    curve_rows: Dict[Tuple[str, float], int] = {}
    for i, (s, t) in enumerate(zip(curves['subject'], c_t)):
        key = (str(s), float(t))
        if key in curve_rows:
            raise DuplicateRecord(f"Duplicate curve row (subject={s}, t={t})")
        curve_rows[key] = i

    records, used = [], set()
    for i, s in enumerate(outcomes['subject']):
        t, y = float(o_vals[i, 0]), float(o_vals[i, 1])
        key = (str(s), t)
        if key not in curve_rows:
            raise MissingCurve(f"No curve for outcome row (subject={s}, t={t})")
        if key in used:
            raise DuplicateRecord(f"Duplicate outcome row (subject={s}, t={t})")
        used.add(key)
        records.append(FunctionalRecord(str(s), t, y, o_vals[i, 2:], c_w[curve_rows[key]]))

    unused = len(curve_rows) - len(used)
    if unused:
        console.print(f"[yellow]⚠️ {unused} curve rows have no outcome row and were ignored[/yellow]")
    if random_effects is None:
        random_effects = list(load_key('dataset.random_effects'))
    ds = LongitudinalDataset(grid, tuple(records), tuple(covariate_names), tuple(random_effects))
    console.print(f"[bold green]✅ Loaded {ds.n_total} visits from {ds.n_subjects} subjects on a p={grid.p} grid[/bold green]")
    return ds

def write_dataset(ds: LongitudinalDataset, outcomes_path: str, curves_path: str, grid_path: Optional[str] = None):
    """Write the three input files; %.17g keeps every float bit-exact on reload"""
    for path in (outcomes_path, curves_path, grid_path):
        if path and os.path.dirname(path):
            os.makedirs(os.path.dirname(path), exist_ok=True)
    subjects = [rec.subject_id for rec in ds.records]
    outcomes = pd.DataFrame({'subject': subjects, 't': ds.times, 'y': ds.y})
    for j, name in enumerate(ds.covariate_names):
        outcomes[name] = ds.x_raw[:, j]
    curves = pd.DataFrame(ds.w_raw, columns=[f'w_{j + 1}' for j in range(ds.grid.p)])
    curves.insert(0, 't', ds.times)
    curves.insert(0, 'subject', subjects)
    outcomes.to_csv(outcomes_path, index=False, float_format='%.17g')
    curves.to_csv(curves_path, index=False, float_format='%.17g')
    if grid_path:
        with open(grid_path, 'w', encoding='utf-8') as f:
            json.dump(ds.grid.to_spec(), f, indent=2)

# ------------
# design matrices
# ------------
@dataclass(frozen=True)
class DesignMatrices:
    X: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    y: np.ndarray
    z_rows: np.ndarray
    subject_index: np.ndarray
    row_index: Tuple[Tuple[str, float], ...]
    quadrature_weight: float
    time_structure: TimeStructure
    grid: SampleGrid
    fixed_names: Tuple[str, ...]
    random_effects: Tuple[str, ...]
    subjects: Tuple[str, ...] = field(default=())

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def p(self) -> int:
        return self.grid.p

    @property
    def D(self) -> int:
        return self.time_structure.D

    @property
    def r(self) -> int:
        return self.z_rows.shape[1]

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

def build_design(ds: LongitudinalDataset, ts: TimeStructure, quadrature: Optional[str] = None,
                 include_intercept: Optional[bool] = None, center: Optional[bool] = None) -> DesignMatrices:
    quadrature = quadrature or load_key('dataset.quadrature')
    include_intercept = load_key('dataset.include_intercept') if include_intercept is None else include_intercept
    center = load_key('dataset.center_predictors') if center is None else center
    if quadrature not in ('unit', 'riemann'):
        raise UsageError(f"Unknown quadrature '{quadrature}' (use unit or riemann)")

    ts.check_independence(ds.times)
    n, p = ds.n_total, ds.grid.p
    delta = 1.0 if quadrature == 'unit' else 1.0 / p

    w = ds.w_raw - ds.w_raw.mean(axis=0) if center else ds.w_raw
    w = delta * w
    F = ts.evaluate(ds.times)
    W = (F[:, :, None] * w[:, None, :]).reshape(n, (ts.D + 1) * p)

    if include_intercept:
        X = np.column_stack([np.ones(n), ds.x_raw])
        fixed_names = (INTERCEPT,) + ds.covariate_names
    else:
        X = ds.x_raw.copy()
        fixed_names = ds.covariate_names

    z_cols = [np.ones(n) if name == INTERCEPT else ds.x_raw[:, ds.covariate_names.index(name)]
              for name in ds.random_effects]
    z_rows = np.column_stack(z_cols)
    r, N = z_rows.shape[1], ds.n_subjects
    Z = np.zeros((n, r * N))
    for j in range(r):
        Z[np.arange(n), ds.subject_index * r + j] = z_rows[:, j]

    for arr in (X, W, Z, z_rows):
        arr.setflags(write=False)
    return DesignMatrices(
        X=X, W=W, Z=Z, y=ds.y, z_rows=z_rows, subject_index=ds.subject_index,
        row_index=tuple((rec.subject_id, rec.t) for rec in ds.records),
        quadrature_weight=delta, time_structure=ts, grid=ds.grid,
        fixed_names=tuple(fixed_names), random_effects=ds.random_effects, subjects=ds.subjects)

if __name__ == "__main__":
    grid = SampleGrid.equispaced(2)
    ds = LongitudinalDataset.from_arrays(grid, ['a', 'a'], [0, 1], [0.0, 1.0], [[1, 2], [3, 4]])
    print(build_design(ds, TimeStructure.parse('t'), 'unit').W)
