import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dataclasses import replace
from rich.console import Console
from rich.table import Table
from core.config_utils import load_key, get_phi_grid
from core.output_utils import build_manifest, write_csv, write_json
from core.step5_1_gen_data import SimulationScenario, export_replicate
from core.step5_2_run_study import EstimatorConfig, StudyMetrics, run_study
from cli_components.imports_and_utils import add_common_args, resolve_seed

console = Console()

def add_simulate_args(parser):
    add_common_args(parser, threads=True)
    parser.add_argument('--scenario', help="scenario JSON (default: the simulation section of config.yaml)")
    parser.add_argument('--replicates', type=int, help="number of replicates (default: study.replicates)")
    parser.add_argument('--phi-grid', action='store_true', help="choose phi_a per replicate by AIC over the config grid")
    parser.add_argument('--export-replicate', type=int, metavar='K',
                        help="also write replicate K as outcomes/curves/grid/q_basis files")

def _print_table(metrics: StudyMetrics):
    block = metrics.to_dict()['table']
    table = Table(title="📊 Estimation and prediction errors")
    for col in ("", "total", "variance", "squared bias"):
        table.add_column(col)
    for name, row in block.items():
        if isinstance(row, dict):
            table.add_row(name, f"{row['total']:.4f}", f"{row['variance']:.4f}", f"{row['bias_sq']:.4f}")
    if block.get('SSPE') is not None:
        table.add_row("SSPE", f"{block['SSPE']:.4f}", "", "")
    console.print(table)

def cmd_simulate(args, out_dir: str):
    scenario = SimulationScenario.from_json(args.scenario) if args.scenario else SimulationScenario.from_config()
    seed = resolve_seed(args.seed, scenario.seed)
    scenario = replace(scenario, seed=seed)
    console.print(f"[cyan]🎲 seed = {seed}[/cyan]")
    replicates = int(load_key('study.replicates')) if args.replicates is None else args.replicates

    cfg = EstimatorConfig.from_scenario(scenario)
    if args.phi_grid:
        cfg = replace(cfg, phi_grid=tuple(get_phi_grid()))
    metrics = run_study(scenario, replicates, cfg, max_workers=args.threads)
    _print_table(metrics)

    outputs = ['metrics.json', 'per_replicate.csv', 'coverage.csv', 'estimates.csv']
    write_json(os.path.join(out_dir, 'metrics.json'), metrics.to_dict())
    write_csv(os.path.join(out_dir, 'per_replicate.csv'), metrics.per_replicate)
    write_csv(os.path.join(out_dir, 'coverage.csv'), metrics.coverage_frame())
    write_csv(os.path.join(out_dir, 'estimates.csv'), metrics.estimates_frame())
    profile = metrics.phi_profile_frame()
    if profile is not None:
        write_csv(os.path.join(out_dir, 'phi_profile.csv'), profile)
        write_csv(os.path.join(out_dir, 'phi_profile_replicates.csv'), metrics.phi_profile)
        outputs += ['phi_profile.csv', 'phi_profile_replicates.csv']
    if args.export_replicate is not None:
        export_replicate(scenario, args.export_replicate, os.path.join(out_dir, f"replicate_{args.export_replicate}"))
        outputs.append(f"replicate_{args.export_replicate}/")
    write_json(os.path.join(out_dir, 'manifest.json'),
               build_manifest('simulate', {'scenario': args.scenario}, seed,
                              {"replicates": replicates, "outputs": outputs}))
