import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dataclasses import replace
from rich.console import Console
from rich.table import Table
from core.config_utils import load_key
from core.errors import ToleranceExceeded
from core.gsvd_oracle import cross_check, random_instance
from core.output_utils import build_manifest, write_json
from core.step1_dataset import TimeStructure, build_design
from core.step3_2_reml_fit import RemlOptions, reml_fit
from cli_components.imports_and_utils import (add_common_args, add_dataset_args, add_penalty_args, add_fixed_vc_args,
                                              fixed_components, load_inputs, penalty_spec, resolve_seed)

console = Console()

def add_gsvd_check_args(parser):
    add_dataset_args(parser, required=False)
    add_penalty_args(parser)
    add_fixed_vc_args(parser)
    add_common_args(parser)
    parser.add_argument('--time-basis', help="time structure of a dataset instance")
    parser.add_argument('--tol', type=float, help="accepted max relative discrepancy (default: gsvd_check.tol)")
    parser.add_argument('--subjects', type=int, help="random instance: number of subjects")
    parser.add_argument('--visits', type=int, help="random instance: visits per subject")
    parser.add_argument('--p', type=int, help="random instance: grid size")
    parser.add_argument('--D', type=int, help="random instance: number of time functions")

def _dataset_instance(args, seed: int):
    """X = 0 design from files; variance components fixed by flags or estimated by REML"""
    ds, inputs = load_inputs(args)
    dm = build_design(ds, TimeStructure.parse(args.time_basis), args.quadrature, include_intercept=False, center=args.center)
    spec = penalty_spec(args, dm.p)
    fixed = fixed_components(args, dm.r)
    opts = RemlOptions.from_config(start_seed=seed, unconditional=False)
    if fixed is not None:
        opts = replace(opts, optimize=False, fixed=fixed)
    fit = reml_fit(dm, [spec], opts)
    return dm, fit.penalty, fit.vc, inputs

def _print_report(report: dict, tol: float):
    table = Table(title="🔍 Estimator vs GSVD expansion")
    table.add_column("check")
    table.add_column("relative discrepancy")
    for key, value in report.items():
        if key not in ('n', 'm', 'p_tilde', 'ell', 'null_dim', 'max_discrepancy'):
            table.add_row(key, f"{value:.3e}", style="green" if value <= tol else "red")
    console.print(table)
    console.print(f"n={report['n']}, m={report['m']}, p~={report['p_tilde']}, ell={report['ell']}, "
                  f"null_dim={report['null_dim']}")

def cmd_gsvd_check(args, out_dir: str):
    tol = float(load_key('gsvd_check.tol')) if args.tol is None else args.tol
    if args.outcomes:
        seed = resolve_seed(args.seed, load_key('reml.start_seed'))
        dm, bp, vc, inputs = _dataset_instance(args, seed)
    else:
        seed = resolve_seed(args.seed, load_key('simulation.seed'))
        dm, bp, vc = random_instance(seed, args.subjects, args.visits, args.p, args.D, args.penalty or 'ridge')
        inputs = {}
    report = cross_check(dm, bp, vc)
    _print_report(report, tol)
    if report['max_discrepancy'] > tol:
        raise ToleranceExceeded(f"Max relative discrepancy {report['max_discrepancy']:.3e} exceeds {tol:.1e}")
    write_json(os.path.join(out_dir, 'gsvd_check.json'), {**report, "tol": tol, "passed": True})
    write_json(os.path.join(out_dir, 'manifest.json'),
               build_manifest('gsvd-check', inputs, seed, {"outputs": ['gsvd_check.json']}))
