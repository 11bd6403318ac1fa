import os, sys
import argparse
sys.path.append(os.path.dirname(os.path.abspath(__file__)))
from core.config_utils import load_key
from cli_components.fit_section import add_fit_args, cmd_fit, cmd_predict
from cli_components.simulate_section import add_simulate_args, cmd_simulate
from cli_components.select_section import add_select_args, cmd_select
from cli_components.gsvd_check_section import add_gsvd_check_args, cmd_gsvd_check
from cli_components.imports_and_utils import run_command

COMMANDS = {
    'fit': (add_fit_args, cmd_fit, "fit the penalized longitudinal model, write fit.json, bands and residuals"),
    'predict': (add_fit_args, cmd_predict, "fit, then write predicted outcomes with standard errors"),
    'simulate': (add_simulate_args, cmd_simulate, "run a seeded simulation study"),
    'select': (add_select_args, cmd_select, "compare phi_a values and time structures by AIC"),
    'gsvd-check': (add_gsvd_check_args, cmd_gsvd_check, "cross-check the estimator against the GSVD expansion"),
}

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='longpeer', description=f"LongPEER v{load_key('version')}")
    sub = parser.add_subparsers(dest='command', required=True)
    for name, (add_args, _, help_text) in COMMANDS.items():
        add_args(sub.add_parser(name, help=help_text))
    return parser

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _, fn, _ = COMMANDS[args.command]
    return run_command(args.command, fn, args)

if __name__ == "__main__":
    sys.exit(main())
