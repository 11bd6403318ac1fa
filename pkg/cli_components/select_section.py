import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from rich.console import Console
from core.config_utils import load_key
from core.errors import UsageError
from core.output_utils import build_manifest, write_csv, write_json, to_jsonable
from core.step1_dataset import TimeStructure
from core.step2_penalty import load_q_basis
from core.step3_2_reml_fit import RemlOptions
from core.step4_selection import compare_time_structures, joint_search, phi_grid_search, validate_report
from cli_components.imports_and_utils import (add_common_args, add_dataset_args, add_penalty_args,
                                              load_inputs, penalty_spec, resolve_seed)

console = Console()

MODES = ('phi', 'time', 'joint')

def add_select_args(parser):
    add_dataset_args(parser)
    add_penalty_args(parser)
    add_common_args(parser, threads=True)
    parser.add_argument('--mode', choices=MODES, default='phi',
                        help="phi: phi_a grid, time: time structures, joint: every (time structure, phi_a) pair")
    parser.add_argument('--time-basis', action='append', dest='time_bases', metavar='BASIS',
                        help="candidate time structure; repeat for several (use 'none' for gamma0 only)")
    parser.add_argument('--phi-grid', help="comma list of phi_a values (default: selection.phi_grid_exponents)")
    parser.add_argument('--level', type=float, help="band level for band nullity (default: bands.level)")

def _grid(text):
    if not text:
        return None
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise UsageError(f"--phi-grid must be numbers: {e}")

def cmd_select(args, out_dir: str):
    ds, inputs = load_inputs(args)
    candidates = [TimeStructure.parse(text) for text in (args.time_bases or ['none'])]
    seed = resolve_seed(args.seed, load_key('reml.start_seed'))
    opts = RemlOptions.from_config(start_seed=seed)
    common = dict(opts=opts, level=args.level, quadrature=args.quadrature, max_workers=args.threads)

    if args.mode == 'time':
        report = compare_time_structures(ds, candidates, penalty_spec(args, ds.grid.p), **common)
    else:
        Q = load_q_basis(args.q_basis, ds.grid.p)
        if args.mode == 'phi':
            if len(candidates) > 1:
                raise UsageError("--mode phi takes a single --time-basis; use --mode joint for several")
            report = phi_grid_search(ds, candidates[0], Q, _grid(args.phi_grid), **common)
        else:
            report = joint_search(ds, candidates, Q, _grid(args.phi_grid), **common)

    data = to_jsonable(report.to_dict())
    validate_report(data)
    write_json(os.path.join(out_dir, 'selection.json'), data)
    write_csv(os.path.join(out_dir, 'selection.csv'), report.to_frame())
    write_json(os.path.join(out_dir, 'manifest.json'),
               build_manifest('select', inputs, seed, {"mode": args.mode, "outputs": ['selection.json', 'selection.csv']}))
    console.print(f"[bold green]✅ Chosen: {report.chosen_candidate.label}[/bold green]")
