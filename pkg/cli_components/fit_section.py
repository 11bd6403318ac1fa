import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from dataclasses import replace
from typing import List
import numpy as np
import pandas as pd
from rich.console import Console
from core.config_utils import load_key
from core.output_utils import build_manifest, write_csv, write_json
from core.step1_dataset import TimeStructure, build_design
from core.step3_1_ridge_blup import component_band, gamma_at_time, predict, residual_frame
from core.step3_2_reml_fit import RemlOptions, reml_fit
from cli_components.imports_and_utils import (add_common_args, add_dataset_args, add_penalty_args,
                                              add_fixed_vc_args, fixed_components, load_inputs,
                                              penalty_spec, resolve_seed)

console = Console()

def add_fit_args(parser):
    add_dataset_args(parser)
    add_penalty_args(parser)
    add_fixed_vc_args(parser)
    add_common_args(parser)
    parser.add_argument('--time-basis', help="e.g. t, t,t2, expm1, log1p, table:<csv> (default: none)")
    parser.add_argument('--level', type=float, help="band confidence level (default: bands.level)")
    parser.add_argument('--band-times', help="comma list of t for bands_t*.csv (default: every observed time)")
    parser.add_argument('--unconditional', action='store_true', default=None,
                        help="use V1 instead of V in the band covariance")

def _band_times(args, observed: np.ndarray) -> List[float]:
    if args.band_times:
        return [float(v) for v in args.band_times.split(',') if v.strip()]
    return [float(t) for t in np.unique(observed)]

def fit_pipeline(args):
    """load -> design -> penalty -> REML (or fixed components) -> FitResult"""
    ds, inputs = load_inputs(args)
    ts = TimeStructure.parse(args.time_basis)
    dm = build_design(ds, ts, args.quadrature, include_intercept=False if args.no_intercept else None,
                      center=args.center)
    spec = penalty_spec(args, dm.p)
    seed = resolve_seed(args.seed, load_key('reml.start_seed'))
    unconditional = load_key('bands.unconditional') if args.unconditional is None else args.unconditional
    opts = RemlOptions.from_config(start_seed=seed, unconditional=bool(unconditional))
    fixed = fixed_components(args, dm.r)
    if fixed is not None:
        opts = replace(opts, optimize=False, fixed=fixed)
    console.print(f"[cyan]🔧 Fitting {ts.label} with {spec.label} penalty...[/cyan]")
    fit = reml_fit(dm, [spec], opts)
    return ds, ts, dm, fit, inputs, seed

def _gamma_plot_frame(fit, level: float) -> pd.DataFrame:
    """tidy plot data: one row per grid point per series per component"""
    frames = []
    for d in range(fit.D + 1):
        band = component_band(fit, d, level).to_frame()
        for series in ('estimate', 'lower', 'upper'):
            frames.append(pd.DataFrame({'component': f'gamma{d}', 'series': series,
                                        's': band['s'], 'value': band[series]}))
    return pd.concat(frames, ignore_index=True)

def cmd_fit(args, out_dir: str):
    ds, ts, dm, fit, inputs, seed = fit_pipeline(args)
    level = float(load_key('bands.level')) if args.level is None else args.level

    write_json(os.path.join(out_dir, 'fit.json'), {**fit.to_dict(), "level": level,
                                                  "n": dm.n, "n_subjects": dm.n_subjects, "p": dm.p})
    write_csv(os.path.join(out_dir, 'residuals.csv'), residual_frame(dm, fit))
    write_csv(os.path.join(out_dir, 'gamma_plot.csv'), _gamma_plot_frame(fit, level))
    band_files = []
    for t in _band_times(args, ds.times):
        name = f"bands_t{t:g}.csv"
        write_csv(os.path.join(out_dir, name), gamma_at_time(fit, ts, t, level).to_frame())
        band_files.append(name)
    write_json(os.path.join(out_dir, 'manifest.json'),
               build_manifest('fit', inputs, seed, {"outputs": ['fit.json', 'residuals.csv', 'gamma_plot.csv'] + band_files}))
    console.print(f"[green]REML loglik {fit.reml_loglik:.4f}, AIC {fit.aic:.4f}, "
                  f"lambda {np.round(fit.vc.lambdas, 4).tolist()}[/green]")

def cmd_predict(args, out_dir: str):
    """fit, then fitted values with their pointwise standard errors"""
    _, _, dm, fit, inputs, seed = fit_pipeline(args)
    y_hat, cov = predict(dm, fit, fit.unconditional)
    frame = residual_frame(dm, fit).drop(columns=['fitted', 'residual'])
    frame['predicted'] = y_hat
    frame['se'] = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    write_csv(os.path.join(out_dir, 'predictions.csv'), frame)
    write_json(os.path.join(out_dir, 'manifest.json'),
               build_manifest('predict', inputs, seed, {"outputs": ['predictions.csv']}))
