import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import argparse
from typing import Callable, Dict, Optional, Tuple
import numpy as np
from rich.console import Console
from rich.panel import Panel
from core.config_utils import load_key
from core.errors import LongPeerError, OutputDirInUse, UsageError
from core.output_utils import atomic_output_dir, write_error
from core.step1_dataset import LongitudinalDataset, load_dataset
from core.step2_penalty import PenaltySpec, load_q_basis
from core.step3_1_ridge_blup import VarianceComponents

console = Console()

SEED_ENV = 'LONGPEER_SEED'

def resolve_seed(flag: Optional[int], default: int) -> int:
    """--seed, then $LONGPEER_SEED, then `default` (config or scenario seed)"""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ''):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got '{env}'")
    return int(default)

def _csv_list(text: Optional[str]):
    return [item.strip() for item in text.split(',') if item.strip()] if text else []

# ------------
# shared flags
# ------------
def add_common_args(parser: argparse.ArgumentParser, threads: bool = False):
    parser.add_argument('--out', help="output directory (default: output.dir in config.yaml)")
    parser.add_argument('--seed', type=int, help=f"seed; falls back to ${SEED_ENV}, then config.yaml")
    if threads:
        parser.add_argument('--threads', type=int, help="cap on concurrent fits (default: every core)")

def add_dataset_args(parser: argparse.ArgumentParser, required: bool = True):
    parser.add_argument('--outcomes', required=required, help="CSV with subject,t,y[,covariates...]")
    parser.add_argument('--curves', required=required, help="CSV with subject,t,w_1..w_p")
    parser.add_argument('--grid', required=required, help="grid JSON ({p, points} or {p, equispaced: true})")
    parser.add_argument('--covariates', help="comma list of scalar covariates to keep (default: all)")
    parser.add_argument('--random-effects', help="comma list, e.g. intercept or intercept,age")
    parser.add_argument('--quadrature', choices=['unit', 'riemann'])
    parser.add_argument('--center', action='store_true', default=None, help="center the curves")
    parser.add_argument('--no-intercept', action='store_true', help="drop the fixed intercept")

def add_penalty_args(parser: argparse.ArgumentParser):
    parser.add_argument('--penalty', choices=['decomposition', 'ridge', 'second_difference'])
    parser.add_argument('--q-basis', help="CSV with p rows, one preferred-space basis curve per column")
    parser.add_argument('--phi-a', type=float)
    parser.add_argument('--phi-b', type=float)

def add_fixed_vc_args(parser: argparse.ArgumentParser):
    parser.add_argument('--lambdas', help="comma list of lambda_d; skips REML together with the two flags below")
    parser.add_argument('--sigma-eps-sq', type=float)
    parser.add_argument('--sigma-b-sq', help="comma list, one per random effect")

# ------------
# flag -> object
# ------------
def load_inputs(args) -> Tuple[LongitudinalDataset, Dict[str, str]]:
    random_effects = _csv_list(args.random_effects) or None
    ds = load_dataset(args.outcomes, args.curves, args.grid, random_effects)
    if args.covariates is not None:
        ds = ds.with_covariates(_csv_list(args.covariates))
    return ds, {'outcomes': args.outcomes, 'curves': args.curves, 'grid': args.grid,
                'q_basis': getattr(args, 'q_basis', None)}

def penalty_spec(args, p: int) -> PenaltySpec:
    kind = args.penalty or load_key('penalty.kind')
    if kind != 'decomposition':
        return PenaltySpec(kind)
    Q = load_q_basis(args.q_basis, p)
    phi_a = load_key('penalty.phi_a') if args.phi_a is None else args.phi_a
    phi_b = load_key('penalty.phi_b') if args.phi_b is None else args.phi_b
    return PenaltySpec('decomposition', Q=Q, phi_a=float(phi_a), phi_b=float(phi_b))

def fixed_components(args, r: int) -> Optional[VarianceComponents]:
    given = [args.lambdas is not None, args.sigma_eps_sq is not None, args.sigma_b_sq is not None]
    if not any(given):
        return None
    if not all(given):
        raise UsageError("--lambdas, --sigma-eps-sq and --sigma-b-sq must be given together")
    try:
        lambdas = [float(v) for v in _csv_list(args.lambdas)]
        sigma_b = [float(v) for v in _csv_list(args.sigma_b_sq)]
    except ValueError as e:
        raise UsageError(f"Fixed variance components must be numbers: {e}")
    if len(sigma_b) == 1 and r > 1:
        sigma_b = sigma_b * r
    if len(sigma_b) != r:
        raise UsageError(f"--sigma-b-sq needs {r} values, got {len(sigma_b)}")
    return VarianceComponents(tuple(lambdas), args.sigma_eps_sq, np.diag(sigma_b))

# ------------
# runner
# ------------
def run_command(name: str, fn: Callable, args) -> int:
    """Run `fn(args, tmp_dir)`; outputs land in --out atomically, errors become error.json + exit code"""
    out_dir = args.out or load_key('output.dir')
    try:
        with atomic_output_dir(out_dir) as tmp:
            fn(args, tmp)
    except LongPeerError as e:
        console.print(Panel(f"[bold red]{e.kind}[/bold red]\n{e.message}", title=f"❌ {name} failed",
                            border_style="red"))
        # a folder we refused to write stays untouched
        if not isinstance(e, OutputDirInUse):
            write_error(out_dir, e)
        return e.exit_code
    console.print(Panel(f"[bold green]✅ {name} finished, results in {out_dir}[/bold green]", border_style="green"))
    return 0
