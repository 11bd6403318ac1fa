import numpy as np
import jsonschema
import pytest
from core.errors import AllCandidatesFailed, NonPositivePhi, UsageError
from core.output_utils import to_jsonable
from core.step1_dataset import TimeStructure
from core.step2_penalty import PenaltySpec
from core.step3_2_reml_fit import RemlOptions
from core.step4_selection import (CandidateResult, _choose, _report, compare_time_structures, joint_search,
                                  phi_grid_search, validate_report)
from core.step5_1_gen_data import SimulationScenario, simulate_replicate
from conftest import make_dataset

NONE, LINEAR = TimeStructure.parse('none'), TimeStructure.parse('t')
FAST = RemlOptions(n_starts=1, start_seed=1, max_iter=200)


@pytest.fixture(scope='module')
def data():
    ds = make_dataset(30, n_subjects=8, visits=3, p=6)
    Q = np.random.default_rng(30).normal(size=(6, 2))
    return ds, Q


@pytest.fixture(scope='module')
def single(data):
    ds, Q = data
    return phi_grid_search(ds, NONE, Q, grid=[10.0], opts=FAST, max_workers=1, show=False)


def test_grid_of_one_returns_that_value(single):
    assert len(single.candidates) == 1
    assert single.chosen == 0
    assert single.chosen_candidate.phi_a == 10.0
    assert single.chosen_candidate.label == 'phi_a=10'
    assert single.chosen_candidate.ok


def test_report_matches_schema(single):
    data = to_jsonable(single.to_dict())
    validate_report(data)
    data['level'] = 2.0
    with pytest.raises(jsonschema.ValidationError):
        validate_report(data)


def test_report_table_columns(single):
    frame = single.to_frame()
    assert list(frame.columns) == ['Scalar covariates', 'Time structure', 'phi_a', 'AIC', '-AIC/2',
                                   'converged', 'chosen', 'error']
    assert frame['-AIC/2'].iloc[0] == pytest.approx(-frame['AIC'].iloc[0] / 2)
    assert frame['Scalar covariates'].iloc[0] == 'none'


def test_compare_time_structures(data):
    ds, _ = data
    report = compare_time_structures(ds, [NONE, LINEAR], PenaltySpec('ridge'), opts=FAST, max_workers=1, show=False)
    assert sorted(c.D for c in report.candidates) == [0, 1]
    assert all(c.phi_a is None for c in report.candidates)
    aics = [c.aic for c in report.candidates]
    assert aics == sorted(aics)
    assert len(report.chosen_candidate.band_nullity) == report.chosen_candidate.D + 1


def test_joint_search_crosses_structures_and_grid(data):
    ds, Q = data
    report = joint_search(ds, [NONE, LINEAR], Q, grid=[1.0, 100.0], opts=FAST, max_workers=2, show=False)
    assert len(report.candidates) == 4
    assert {(c.D, c.phi_a) for c in report.candidates} == {(0, 1.0), (0, 100.0), (1, 1.0), (1, 100.0)}


def test_every_candidate_failing(data):
    ds, _ = data
    with pytest.raises(AllCandidatesFailed):
        compare_time_structures(ds, [NONE], PenaltySpec('second_difference'), opts=FAST, max_workers=1, show=False)


def test_invalid_grids(data):
    ds, Q = data
    with pytest.raises(NonPositivePhi):
        phi_grid_search(ds, NONE, Q, grid=[0.0, 1.0], opts=FAST, show=False)
    with pytest.raises(UsageError):
        phi_grid_search(ds, NONE, Q, grid=[], opts=FAST, show=False)
    with pytest.raises(UsageError):
        compare_time_structures(ds, [], PenaltySpec('ridge'), show=False)


def _candidate(label, ts, phi_a, aic, converged=True, all_null=None, error=None):
    return CandidateResult(label=label, time_structure=ts, phi_a=phi_a, aic=aic, converged=converged,
                           all_null=all_null or (False,) * (ts.D + 1), error=error)


def test_ties_prefer_simpler_candidates():
    a = _candidate('a', LINEAR, 1.0, 10.0)
    b = _candidate('b', NONE, 10.0, 10.0 + 1e-9)
    assert _choose([a, b], tie_tol=1e-6) is b
    c = _candidate('c', NONE, 1.0, 10.0)
    assert _choose([a, b, c], tie_tol=1e-6) is c
    # a clear AIC win is not a tie
    assert _choose([a, _candidate('d', NONE, 1.0, 12.0)], tie_tol=1e-6) is a


def test_converged_candidates_take_priority():
    stuck = _candidate('stuck', NONE, 1.0, 5.0, converged=False)
    done = _candidate('done', NONE, 10.0, 8.0)
    assert _choose([stuck, done], tie_tol=1e-6) is done
    assert _choose([stuck], tie_tol=1e-6) is stuck


def test_failed_candidates_are_listed_last():
    failed = _candidate('failed', NONE, 1.0, float('nan'), error='SingularSystem: boom')
    good = _candidate('good', NONE, 10.0, 3.0)
    report = _report([failed, good], 0.95, 1e-6, show=False)
    assert [c.label for c in report.candidates] == ['good', 'failed']
    assert report.chosen == 0
    assert report.to_dict()['candidates'][1]['aic'] is None
    with pytest.raises(AllCandidatesFailed):
        _choose([failed], tie_tol=1e-6)


def test_drop_recommendations_skip_the_intercept_curve():
    quadratic = TimeStructure.parse('t,t2')
    report = _report([_candidate('q', quadratic, 1.0, 1.0, all_null=(True, False, True))], 0.95, 1e-6, show=False)
    assert report.drop_recommendations == ('gamma2 (t^2)',)
    report = _report([_candidate('n', NONE, 1.0, 1.0, all_null=(True,))], 0.95, 1e-6, show=False)
    assert report.drop_recommendations == ()


BASELINE_Q = [[15, 1.0, 2500], [5, 1.0, 2500], [30, 1.0, 1000], [70, 1.0, 1000], [80, 1.0, 2500], [90, 1.0, 1000],
              [50, 1.0, 2500]]


def test_time_invariant_truth_flags_the_time_term():
    scenario = SimulationScenario.from_config(name='flat', N=30, p=20, seed=11, visit_times=[0, 1, 2, 3],
                                              target_r2=0.6, q_bumps=BASELINE_Q)
    ds = simulate_replicate(scenario, 0).dataset
    spec = PenaltySpec('decomposition', Q=scenario.Q, phi_a=10.0, phi_b=1.0)
    report = compare_time_structures(ds, [LINEAR], spec, opts=FAST, level=0.999, max_workers=1, show=False)
    assert report.chosen_candidate.all_null[1]
    assert report.drop_recommendations == ('gamma1 (t)',)


def test_time_varying_truth_prefers_the_time_term():
    gamma_bumps = [[[15, 0.20, 2500], [50, -0.15, 2500], [80, 0.15, 2500]], [[30, 0.3, 2500], [70, -0.3, 2500]]]
    scenario = SimulationScenario.from_config(name='trend', N=30, p=20, seed=12, visit_times=[0, 1, 2, 3],
                                              time_structure='t', gamma_bumps=gamma_bumps, q_bumps=BASELINE_Q)
    ds = simulate_replicate(scenario, 0).dataset
    report = compare_time_structures(ds, [NONE, LINEAR], PenaltySpec('ridge'), opts=FAST, max_workers=1, show=False)
    aic = {c.D: c.aic for c in report.candidates}
    assert aic[1] < aic[0]
    assert report.chosen_candidate.D == 1
