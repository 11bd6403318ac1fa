import os, sys
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import shutil
import numpy as np
import pytest
from core import config_utils
from core.step1_dataset import LongitudinalDataset, SampleGrid
from core.step5_1_gen_data import SimulationScenario


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


@pytest.fixture
def tmp_config(tmp_path, monkeypatch):
    """Private copy of config.yaml so update_key never touches the repo file"""
    path = tmp_path / 'config.yaml'
    shutil.copy(config_utils.CONFIG_PATH, path)
    monkeypatch.setattr(config_utils, 'CONFIG_PATH', str(path))
    return path


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    monkeypatch.delenv('LONGPEER_SEED', raising=False)


def make_dataset(seed: int, n_subjects: int = 5, visits: int = 3, p: int = 8, covariates: int = 0,
                 random_effects=('intercept',)) -> LongitudinalDataset:
    """Random dataset with visits at t = 0, 1, ..., visits-1"""
    rng = np.random.default_rng(seed)
    n = n_subjects * visits
    subjects = np.repeat([f"s{i + 1}" for i in range(n_subjects)], visits)
    times = np.tile(np.arange(visits, dtype=float), n_subjects)
    W = rng.normal(size=(n, p))
    X = rng.normal(size=(n, covariates))
    y = rng.normal(size=n)
    names = tuple(f"x{k + 1}" for k in range(covariates))
    return LongitudinalDataset.from_arrays(SampleGrid.equispaced(p), subjects, times, y, W, X, names, random_effects)


@pytest.fixture
def small_dataset():
    return make_dataset(1, covariates=1)


@pytest.fixture
def small_scenario():
    """Cut-down time-invariant design: fast enough to fit in unit tests"""
    return SimulationScenario.from_config(name='small', N=12, p=20, seed=3, visit_times=[0, 1, 2])


@pytest.fixture
def small_tv_scenario():
    return SimulationScenario.from_config(name='small_tv', N=12, p=20, seed=5, visit_times=[0, 1, 2],
                                          time_structure='t', target_r2=0.9)
