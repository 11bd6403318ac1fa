import os
import pytest
from core import config_utils
from core.config_utils import load_key, update_key, get_max_workers, get_phi_grid


def test_load_key_reads_nested_values():
    assert load_key('penalty.phi_a') == 10.0
    assert load_key('bands.level') == 0.95
    assert list(load_key('dataset.random_effects')) == ['intercept']


def test_load_key_missing_raises():
    with pytest.raises(KeyError):
        load_key('penalty.not_a_key')


def test_update_key_writes_private_copy(tmp_config):
    assert update_key('penalty.phi_a', 100.0)
    assert load_key('penalty.phi_a') == 100.0
    assert config_utils.CONFIG_PATH == str(tmp_config)
    with pytest.raises(KeyError):
        update_key('penalty.missing', 1)
    assert update_key('nowhere.phi_a', 1) is False


def test_phi_grid_covers_one_to_thousand():
    grid = get_phi_grid()
    assert len(grid) == 13
    assert grid[0] == 1.0
    assert grid[4] == pytest.approx(10.0)
    assert grid[-1] == pytest.approx(1000.0)


def test_max_workers(tmp_config):
    assert get_max_workers(3) == 3
    assert get_max_workers() == (os.cpu_count() or 1)
    update_key('max_workers', 2)
    assert get_max_workers() == 2
