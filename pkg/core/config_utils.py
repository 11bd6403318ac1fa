from ruamel.yaml import YAML
from typing import Any, List, Optional
import os, sys
import threading

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# $LONGPEER_CONFIG points runs (and tests) at another config file
CONFIG_PATH = os.environ.get(
    'LONGPEER_CONFIG',
    os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config.yaml'))
config_lock = threading.Lock()

yaml = YAML()
yaml.preserve_quotes = True

def _read_config():
    with open(CONFIG_PATH, 'r', encoding='utf-8') as file:
        return yaml.load(file)

def load_key(key: str) -> Any:
    """Dotted lookup, e.g. load_key('reml.n_starts'); re-reads the file on every call"""
    with config_lock:
        data = _read_config()

    value = data
    for k in key.split('.'):
        if not (isinstance(value, dict) and k in value):
            raise KeyError(f"Key '{k}' not found in configuration")
        value = value[k]
    return value

def update_key(key: str, new_value: Any) -> bool:
    """Only existing keys can be set; returns False when a parent section is missing"""
    with config_lock:
        data = _read_config()
        *parents, leaf = key.split('.')
        current = data
        for k in parents:
            if not (isinstance(current, dict) and k in current):
                return False
            current = current[k]

        if not (isinstance(current, dict) and leaf in current):
            raise KeyError(f"Key '{leaf}' not found in configuration")
        current[leaf] = new_value
        with open(CONFIG_PATH, 'w', encoding='utf-8') as file:
            yaml.dump(data, file)
        return True

# basic utils
def get_max_workers(threads: Optional[int] = None) -> int:
    """`--threads` wins over `max_workers`; 0 means every core"""
    if threads:
        return max(1, int(threads))
    return int(load_key('max_workers')) or (os.cpu_count() or 1)

def get_phi_grid() -> List[float]:
    """phi_a = 10**k over the configured exponent range"""
    grid = load_key('selection.phi_grid_exponents')
    start, stop, step = float(grid['start']), float(grid['stop']), float(grid['step'])
    n = int(round((stop - start) / step)) + 1
    return [float(10 ** (start + i * step)) for i in range(n)]

if __name__ == "__main__":
    print(get_phi_grid())
