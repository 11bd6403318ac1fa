import json
import os
import numpy as np
import pandas as pd
import pytest
from longpeer import main
from core.config_utils import update_key
from core.step1_dataset import TimeStructure, build_design
from core.step2_penalty import PenaltySpec
from core.step3_2_reml_fit import RemlOptions, reml_fit
from core.step5_1_gen_data import SimulationScenario, export_replicate, simulate_replicate

TINY = dict(name='tiny', N=12, p=20, seed=3, visit_times=[0, 1, 2])
FIXED = ['--lambdas', '1.0', '--sigma-eps-sq', '0.0004', '--sigma-b-sq', '0.0025']

@pytest.fixture(scope='module')
def replicate_files(tmp_path_factory):
    scenario = SimulationScenario.from_config(**TINY)
    paths = export_replicate(scenario, 1, str(tmp_path_factory.mktemp('rep')))
    return scenario, paths

def _data_flags(paths, q=True):
    flags = ['--outcomes', paths['outcomes.csv'], '--curves', paths['curves.csv'], '--grid', paths['grid.json']]
    return flags + (['--q-basis', paths['q_basis.csv']] if q else [])

def _read_json(path):
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)

def _tree(root):
    files = {}
    for folder, _, names in os.walk(root):
        for name in names:
            path = os.path.join(folder, name)
            with open(path, 'rb') as f:
                files[os.path.relpath(path, root)] = f.read()
    return files

# ------------
# fit / predict
# ------------
def test_fit_matches_in_memory_estimate(tmp_path, replicate_files):
    scenario, paths = replicate_files
    out = tmp_path / 'fit'
    assert main(['fit', *_data_flags(paths), '--out', str(out)]) == 0
    fit_json = _read_json(out / 'fit.json')

    rep = simulate_replicate(scenario, 1)
    dm = build_design(rep.dataset, TimeStructure(), 'unit', include_intercept=True, center=False)
    spec = PenaltySpec('decomposition', Q=scenario.Q, phi_a=10.0, phi_b=1.0)
    fit = reml_fit(dm, [spec], RemlOptions.from_config(unconditional=False))
    np.testing.assert_array_equal(np.array(fit_json['gamma'][0]), fit.gamma)
    np.testing.assert_array_equal(np.array(fit_json['beta']), fit.beta)
    assert fit_json['fixed_names'] == ['intercept']
    assert fit_json['n'] == 36 and fit_json['p'] == 20

    for name in ('residuals.csv', 'gamma_plot.csv', 'bands_t0.csv', 'bands_t1.csv', 'bands_t2.csv', 'manifest.json'):
        assert (out / name).is_file()
    manifest = _read_json(out / 'manifest.json')
    assert set(manifest['inputs']) == {'outcomes', 'curves', 'grid', 'q_basis'}
    assert 'timestamp' not in manifest

def test_equal_phis_give_the_ridge_fit(tmp_path, replicate_files):
    _, paths = replicate_files
    decomposition, ridge = tmp_path / 'decomposition', tmp_path / 'ridge'
    assert main(['fit', *_data_flags(paths), *FIXED, '--phi-a', '1', '--phi-b', '1', '--out', str(decomposition)]) == 0
    assert main(['fit', *_data_flags(paths, q=False), *FIXED, '--penalty', 'ridge', '--out', str(ridge)]) == 0
    a, b = _read_json(decomposition / 'fit.json'), _read_json(ridge / 'fit.json')
    np.testing.assert_allclose(a['gamma'], b['gamma'], rtol=1e-12, atol=1e-12)

def test_missing_q_basis_is_an_input_error(tmp_path, replicate_files):
    _, paths = replicate_files
    out = tmp_path / 'missing'
    code = main(['fit', *_data_flags(paths, q=False), '--q-basis', str(tmp_path / 'nope.csv'), '--out', str(out)])
    assert code == 2
    assert os.listdir(out) == ['error.json']
    error = _read_json(out / 'error.json')
    assert error['kind'] == 'QBasisNotFound' and error['exit_code'] == 2
    assert 'nope.csv' in error['message']

def test_partial_fixed_components_are_rejected(tmp_path, replicate_files):
    _, paths = replicate_files
    out = tmp_path / 'partial'
    assert main(['fit', *_data_flags(paths), '--lambdas', '1.0', '--out', str(out)]) == 2
    assert _read_json(out / 'error.json')['kind'] == 'UsageError'

def test_predict_writes_standard_errors(tmp_path, replicate_files):
    _, paths = replicate_files
    out = tmp_path / 'predict'
    assert main(['predict', *_data_flags(paths), *FIXED, '--out', str(out)]) == 0
    frame = pd.read_csv(out / 'predictions.csv')
    assert list(frame.columns) == ['subject', 't', 'observed', 'predicted', 'se']
    assert len(frame) == 36
    assert (frame['se'] > 0).all()

def test_foreign_folder_is_refused(tmp_path, replicate_files):
    _, paths = replicate_files
    out = tmp_path / 'thesis'
    out.mkdir()
    (out / 'thesis_draft.tex').write_text('chapter one')
    assert main(['fit', *_data_flags(paths), *FIXED, '--out', str(out)]) == 2
    assert os.listdir(out) == ['thesis_draft.tex']
    assert (out / 'thesis_draft.tex').read_text() == 'chapter one'

def test_rerun_replaces_only_its_own_files(tmp_path, replicate_files):
    _, paths = replicate_files
    out = tmp_path / 'rerun'
    assert main(['fit', *_data_flags(paths), *FIXED, '--out', str(out)]) == 0
    assert (out / 'bands_t2.csv').is_file()
    (out / 'notes.txt').write_text('keep me')
    assert main(['fit', *_data_flags(paths), *FIXED, '--band-times', '0', '--out', str(out)]) == 0
    assert sorted(os.listdir(out)) == ['bands_t0.csv', 'fit.json', 'gamma_plot.csv', 'manifest.json',
                                       'notes.txt', 'residuals.csv']
    assert (out / 'notes.txt').read_text() == 'keep me'

def test_failed_rerun_keeps_foreign_files(tmp_path, replicate_files):
    _, paths = replicate_files
    out = tmp_path / 'failed'
    assert main(['fit', *_data_flags(paths), *FIXED, '--out', str(out)]) == 0
    (out / 'notes.txt').write_text('keep me')
    assert main(['fit', *_data_flags(paths), '--lambdas', '1.0', '--out', str(out)]) == 2
    assert sorted(os.listdir(out)) == ['error.json', 'notes.txt']

def test_threads_is_rejected_where_nothing_runs_in_parallel(tmp_path, replicate_files):
    _, paths = replicate_files
    with pytest.raises(SystemExit):
        main(['fit', *_data_flags(paths), *FIXED, '--threads', '2', '--out', str(tmp_path / 'fit')])
    with pytest.raises(SystemExit):
        main(['gsvd-check', '--threads', '2', '--out', str(tmp_path / 'check')])

# ------------
# simulate / select
# ------------
@pytest.fixture
def tiny_scenario_file(tmp_path, tmp_config):
    update_key('reml.n_starts', 1)
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(TINY))
    return str(path)

def test_simulate_is_reproducible(tmp_path, tiny_scenario_file):
    first, second = tmp_path / 'first', tmp_path / 'second'
    args = ['simulate', '--scenario', tiny_scenario_file, '--replicates', '2']
    assert main([*args, '--threads', '1', '--out', str(first)]) == 0
    assert main([*args, '--threads', '2', '--out', str(second)]) == 0
    assert _tree(first) == _tree(second)
    metrics = _read_json(first / 'metrics.json')
    assert metrics['seed'] == 3 and metrics['replicates'] == 2
    assert set(metrics['table']) == {'MSE(gamma0)', 'SSPE'}

def test_seed_flag_overrides_scenario(tmp_path, tiny_scenario_file, monkeypatch):
    flag, env = tmp_path / 'flag', tmp_path / 'env'
    args = ['simulate', '--scenario', tiny_scenario_file, '--replicates', '1']
    assert main([*args, '--seed', '11', '--out', str(flag)]) == 0
    monkeypatch.setenv('LONGPEER_SEED', '11')
    assert main([*args, '--out', str(env)]) == 0
    assert _read_json(flag / 'metrics.json')['seed'] == 11
    assert _tree(flag) == _tree(env)

def test_zero_replicates_is_a_usage_error(tmp_path, tiny_scenario_file):
    out = tmp_path / 'zero'
    assert main(['simulate', '--scenario', tiny_scenario_file, '--replicates', '0', '--out', str(out)]) == 2
    assert _read_json(out / 'error.json')['kind'] == 'UsageError'

def test_simulate_exports_a_replicate(tmp_path, tiny_scenario_file):
    out = tmp_path / 'export'
    assert main(['simulate', '--scenario', tiny_scenario_file, '--replicates', '1', '--export-replicate', '0',
                 '--out', str(out)]) == 0
    assert sorted(os.listdir(out / 'replicate_0')) == ['curves.csv', 'grid.json', 'outcomes.csv', 'q_basis.csv']

def test_select_grid_of_one(tmp_path, replicate_files, tmp_config):
    update_key('reml.n_starts', 1)
    _, paths = replicate_files
    out = tmp_path / 'select'
    assert main(['select', *_data_flags(paths), '--phi-grid', '10', '--out', str(out)]) == 0
    report = _read_json(out / 'selection.json')
    assert report['chosen_label'] == 'phi_a=10'
    assert len(report['candidates']) == 1 and report['candidates'][0]['phi_a'] == 10.0
    assert (out / 'selection.csv').is_file()

def test_select_phi_mode_takes_one_time_basis(tmp_path, replicate_files):
    _, paths = replicate_files
    out = tmp_path / 'select_bad'
    code = main(['select', *_data_flags(paths), '--time-basis', 'none', '--time-basis', 't', '--out', str(out)])
    assert code == 2

# ------------
# gsvd-check
# ------------
def test_gsvd_check_passes(tmp_path):
    out = tmp_path / 'check'
    assert main(['gsvd-check', '--seed', '5', '--out', str(out)]) == 0
    report = _read_json(out / 'gsvd_check.json')
    assert report['passed'] and report['max_discrepancy'] < 1e-8

def test_gsvd_check_shape_violation(tmp_path):
    out = tmp_path / 'shape'
    assert main(['gsvd-check', '--subjects', '10', '--out', str(out)]) == 3
    assert _read_json(out / 'error.json')['kind'] == 'ShapeAssumptionViolated'

def test_gsvd_check_seed_is_reproducible(tmp_path, monkeypatch):
    flag, env = tmp_path / 'flag', tmp_path / 'env'
    assert main(['gsvd-check', '--seed', '9', '--penalty', 'second_difference', '--out', str(flag)]) == 0
    monkeypatch.setenv('LONGPEER_SEED', '9')
    assert main(['gsvd-check', '--penalty', 'second_difference', '--out', str(env)]) == 0
    assert _tree(flag) == _tree(env)
