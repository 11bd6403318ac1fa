import os, sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import hashlib
import json
import shutil
from contextlib import contextmanager
from typing import Dict, List, Optional
import numpy as np
import pandas as pd
from rich.console import Console
from core.config_utils import load_key
from core.errors import LongPeerError, OutputDirInUse

console = Console()

def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()

def to_jsonable(obj):
    """numpy scalars/arrays to python, non-finite floats to null"""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    return obj

def write_json(path: str, data: dict):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(to_jsonable(data), f, indent=2, ensure_ascii=False)

def write_csv(path: str, df: pd.DataFrame):
    df.to_csv(path, index=False, float_format='%.17g')

def build_manifest(command: str, inputs: Dict[str, Optional[str]], seed: Optional[int], extra: Optional[dict] = None) -> dict:
    """content hashes of the inputs plus seed and version; no timestamps so reruns match byte for byte"""
    hashes = {name: {"path": os.path.basename(path), "sha256": sha256_file(path)}
              for name, path in sorted(inputs.items()) if path and os.path.isfile(path)}
    manifest = {"command": command, "version": str(load_key('version')), "seed": seed, "inputs": hashes}
    manifest.update(extra or {})
    return manifest

MANIFEST = 'manifest.json'
ERROR_FILE = 'error.json'
STAGING_PREFIX = '.longpeer-tmp-'

def _own_entries(out_dir: str) -> Optional[List[str]]:
    """Names an earlier run left in `out_dir`; None when it holds files of unknown origin"""
    if not os.path.exists(out_dir):
        return []
    if not os.path.isdir(out_dir):
        return None
    entries = [e for e in os.listdir(out_dir) if not e.startswith(STAGING_PREFIX)]
    if not entries:
        return []
    if MANIFEST in entries:
        try:
            with open(os.path.join(out_dir, MANIFEST), encoding='utf-8') as f:
                outputs = json.load(f).get('outputs', [])
        except (OSError, ValueError, AttributeError):
            return None
        names = [str(o).rstrip('/') for o in outputs]
        return [MANIFEST, ERROR_FILE] + [n for n in names if n and os.path.basename(n) == n]
    if entries == [ERROR_FILE]:
        return entries
    return None

def check_output_dir(out_dir: str) -> List[str]:
    """Entries of a previous run to replace; raises OutputDirInUse for a folder this tool did not write"""
    owned = _own_entries(os.path.abspath(out_dir))
    if owned is None:
        raise OutputDirInUse(f"Output folder {out_dir} is not empty and has no manifest.json from a previous run; "
                             f"pick another --out")
    return owned

def _remove(path: str):
    if os.path.isdir(path) and not os.path.islink(path):
        shutil.rmtree(path)
    elif os.path.lexists(path):
        os.remove(path)

@contextmanager
def atomic_output_dir(out_dir: str):
    """Yield a staging dir inside `out_dir`; its entries replace the previous run's only if the block finishes.
    Files in `out_dir` that no run of this tool wrote are left alone."""
    out_dir = os.path.abspath(out_dir)
    stale = check_output_dir(out_dir)
    created = not os.path.isdir(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    tmp = os.path.join(out_dir, f"{STAGING_PREFIX}{os.getpid()}")
    shutil.rmtree(tmp, ignore_errors=True)
    os.makedirs(tmp)
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        if created and not os.listdir(out_dir):
            os.rmdir(out_dir)
        raise
    for name in stale:
        _remove(os.path.join(out_dir, name))
    for name in os.listdir(tmp):
        target = os.path.join(out_dir, name)
        _remove(target)
        os.replace(os.path.join(tmp, name), target)
    os.rmdir(tmp)

def write_error(out_dir: str, error: LongPeerError):
    with atomic_output_dir(out_dir) as tmp:
        write_json(os.path.join(tmp, ERROR_FILE), error.to_dict())
    console.print(f"[yellow]Error details written to {os.path.join(out_dir, ERROR_FILE)}[/yellow]")
