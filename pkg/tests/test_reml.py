import numpy as np
import pytest
from core.errors import SingularBlockForMixedModel, UsageError
from core.step1_dataset import LongitudinalDataset, SampleGrid, TimeStructure, build_design
from core.step2_penalty import PenaltySpec, assemble_block
from core.step3_1_ridge_blup import VarianceComponents, ridge_solve
from core.step3_2_reml_fit import (RemlOptions, _starting_point, _unpack, expand_specs, n_variance_params,
                                   reml_fit, restricted_loglik, unit_penalty)
from conftest import make_dataset


def _design(seed=21, time_basis='t', covariates=1, **kw):
    ds = make_dataset(seed, n_subjects=8, visits=3, p=6, covariates=covariates, **kw)
    return build_design(ds, TimeStructure.parse(time_basis), quadrature='unit', include_intercept=True, center=False)


def _dense_loglik(dm, bp, vc):
    G = np.kron(np.eye(dm.n_subjects), vc.Sigma_b)
    V = dm.Z @ G @ dm.Z.T + vc.sigma_eps_sq * np.eye(dm.n)
    V1 = V + dm.W @ np.linalg.inv(bp.gram) @ dm.W.T
    V1i = np.linalg.inv(V1)
    X = dm.X
    beta = np.linalg.solve(X.T @ V1i @ X, X.T @ V1i @ dm.y)
    r = dm.y - X @ beta
    k = X.shape[1]
    return (-0.5 * (np.linalg.slogdet(V1)[1] + np.linalg.slogdet(X.T @ V1i @ X)[1] + r @ V1i @ r)
            - 0.5 * (dm.n - k) * np.log(2 * np.pi)), beta


@pytest.mark.parametrize("kind", ['ridge', 'decomposition'])
def test_restricted_loglik_matches_dense(rng, kind):
    dm = _design(random_effects=('intercept', 'x1'))
    spec = PenaltySpec('decomposition', Q=rng.normal(size=(6, 2)), phi_a=10.0) if kind == 'decomposition' \
        else PenaltySpec('ridge')
    bp = assemble_block([spec, spec], [0.8, 1.7], 6)
    vc = VarianceComponents((0.8, 1.7), 0.4, np.array([[0.3, 0.05], [0.05, 0.2]]))
    loglik, beta = restricted_loglik(dm, bp, vc)
    expected, beta_dense = _dense_loglik(dm, bp, vc)
    assert loglik == pytest.approx(expected, rel=1e-9)
    np.testing.assert_allclose(beta, beta_dense, rtol=1e-8, atol=1e-10)


def test_variance_parameter_count():
    dm = _design(time_basis='t,t2', random_effects=('intercept', 'x1'))
    assert n_variance_params(dm) == 3 + 1 + 2


def test_expand_specs_broadcasts_single_spec():
    dm = _design()
    assert expand_specs(dm, [PenaltySpec('ridge')]) == [PenaltySpec('ridge')] * 2
    with pytest.raises(UsageError):
        expand_specs(dm, [PenaltySpec('ridge')] * 3)


def test_unpack_and_starting_point():
    dm = _design()
    x0 = _starting_point(dm, unit_penalty(dm, [PenaltySpec('ridge')]))
    assert x0.size == n_variance_params(dm)
    assert np.all(np.isfinite(x0))
    vc = _unpack(np.log([2.0, 3.0, 0.5, 0.25]), 2, 1)
    assert vc.lambdas == pytest.approx((2.0, 3.0))
    assert vc.sigma_eps_sq == pytest.approx(0.5)
    np.testing.assert_allclose(vc.Sigma_b, [[0.25]])


def test_fixed_components_skip_optimization():
    dm = _design()
    vc = VarianceComponents.scalar([1.0, 2.0], 0.5, 0.3)
    fit = reml_fit(dm, [PenaltySpec('ridge')], RemlOptions(optimize=False, fixed=vc))
    bp = assemble_block([PenaltySpec('ridge')] * 2, vc.lambdas, dm.p)
    beta, gamma = ridge_solve(dm, bp, vc)
    np.testing.assert_allclose(fit.gamma, gamma, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(fit.beta, beta, rtol=1e-9, atol=1e-12)
    assert fit.n_iter == 0 and fit.converged
    assert fit.reml_loglik == pytest.approx(restricted_loglik(dm, bp, vc)[0])
    with pytest.raises(UsageError):
        reml_fit(dm, [PenaltySpec('ridge')], RemlOptions(optimize=False))


def test_fixed_second_difference_has_no_loglik():
    dm = _design()
    vc = VarianceComponents.scalar([1.0, 1.0], 0.5, 0.3)
    fit = reml_fit(dm, [PenaltySpec('second_difference')], RemlOptions(optimize=False, fixed=vc))
    assert np.isnan(fit.reml_loglik)
    assert fit.gamma.size == 2 * dm.p


def test_second_difference_cannot_be_tuned():
    dm = _design()
    with pytest.raises(SingularBlockForMixedModel):
        reml_fit(dm, [PenaltySpec('second_difference')], RemlOptions(n_starts=1))


@pytest.fixture(scope='module')
def optimized():
    dm = _design(seed=33, time_basis='none', covariates=0)
    opts = RemlOptions(n_starts=2, start_seed=5, max_iter=300)
    return dm, opts, reml_fit(dm, [PenaltySpec('ridge')], opts)


def test_optimized_fit_improves_on_start(optimized):
    dm, _, fit = optimized
    unit = unit_penalty(dm, [PenaltySpec('ridge')])
    vc0 = _unpack(_starting_point(dm, unit), 1, 1)
    start = restricted_loglik(dm, unit.with_lambdas(vc0.lambdas), vc0)[0]
    assert fit.reml_loglik >= start - 1e-9
    assert fit.reml_loglik == pytest.approx(restricted_loglik(dm, fit.penalty, fit.vc)[0], rel=1e-10)


def test_aic_counts_variance_and_fixed_parameters(optimized):
    dm, _, fit = optimized
    assert fit.n_params == n_variance_params(dm) + dm.X.shape[1] == 4
    assert fit.aic == pytest.approx(-2 * fit.reml_loglik + 2 * fit.n_params)
    assert fit.neg_half_aic == pytest.approx(-fit.aic / 2)


def test_optimization_is_deterministic(optimized):
    dm, opts, fit = optimized
    again = reml_fit(dm, [PenaltySpec('ridge')], opts)
    np.testing.assert_array_equal(again.gamma, fit.gamma)
    assert again.vc.lambdas == fit.vc.lambdas


def _mixed_model_design(seed, n_subjects=40, visits=3, p=6, lam=2.0, sigma_eps_sq=0.25, sigma_b_sq=0.1):
    """y = 1 + W gamma + b_i + eps with gamma ~ N(0, I / lam^2), the ridge mixed model"""
    rng = np.random.default_rng(seed)
    n = n_subjects * visits
    subjects = np.repeat([f"s{i + 1}" for i in range(n_subjects)], visits)
    times = np.tile(np.arange(visits, dtype=float), n_subjects)
    W = rng.normal(size=(n, p))
    gamma = rng.normal(scale=1.0 / lam, size=p)
    b = rng.normal(scale=np.sqrt(sigma_b_sq), size=n_subjects)
    y = 1.0 + W @ gamma + np.repeat(b, visits) + rng.normal(scale=np.sqrt(sigma_eps_sq), size=n)
    ds = LongitudinalDataset.from_arrays(SampleGrid.equispaced(p), subjects, times, y, W)
    return build_design(ds, TimeStructure.parse('none'), quadrature='unit', include_intercept=True, center=False)


def test_reml_recovers_measurement_error_variance():
    opts = RemlOptions(n_starts=1, start_seed=1, max_iter=400)
    estimates = np.array([reml_fit(_mixed_model_design(seed), [PenaltySpec('ridge')], opts).vc.sigma_eps_sq
                          for seed in range(20)])
    se = estimates.std(ddof=1) / np.sqrt(estimates.size)
    assert abs(estimates.mean() - 0.25) < max(4 * se, 0.0125)
    assert np.all(estimates > 0)


def test_options_from_config_accepts_overrides(tmp_config):
    opts = RemlOptions.from_config(n_starts=1)
    assert opts.n_starts == 1
    assert opts.start_seed == 20240101
    assert opts.unconditional is False
