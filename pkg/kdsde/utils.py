import csv
import hashlib
import json
import os
import platform
from typing import Any, Dict, Iterable, List, Optional, Sequence

from pydantic import BaseModel

from kdsde.constants import FLOAT_FORMAT, MANIFEST_NAME


def format_float(value: Any) -> str:
    if isinstance(value, bool):
        return '1' if value else '0'
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return FLOAT_FORMAT % value
    return str(value)


def model_to_dict(model: BaseModel) -> Dict[str, Any]:
    if hasattr(model, 'model_dump'):
        return model.model_dump()
    return model.dict()


def serialize_json_data(data: Any) -> str:
    """canonical JSON: sorted keys, no whitespace, models expanded"""
    if isinstance(data, BaseModel):
        data = model_to_dict(data)
    elif isinstance(data, list):
        data = [model_to_dict(d) if isinstance(d, BaseModel) else d for d in data]
    return json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)


def config_hash(config: Any) -> str:
    return hashlib.sha256(serialize_json_data(config).encode('utf8')).hexdigest()


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for block in iter(lambda: f.read(1 << 16), b''):
            digest.update(block)
    return digest.hexdigest()


def write_csv(path: str, columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_float(v) for v in row])
    return path


def package_versions() -> Dict[str, str]:
    import numpy
    import ot
    import pydantic
    import scipy
    import yaml

    from kdsde import __version__

    return {
        'kdsde': __version__,
        'python': platform.python_version(),
        'numpy': numpy.__version__,
        'scipy': scipy.__version__,
        'pot': ot.__version__,
        'pydantic': pydantic.VERSION if isinstance(pydantic.VERSION, str) else str(pydantic.VERSION),
        'pyyaml': yaml.__version__,
    }


def write_manifest(directory: str,
                   files: List[str],
                   config: Any,
                   seed: int,
                   extra: Optional[Dict[str, Any]] = None,
                   ) -> str:
    """
    manifest.json listing every output file with its sha256, the config hash,
    seed and package versions
    """
    entries = {}
    for name in sorted(set(files)):
        path = os.path.join(directory, name)
        if os.path.isfile(path):
            entries[name] = sha256_file(path)
    manifest = {
        'config_hash': config_hash(config),
        'seed': seed,
        'versions': package_versions(),
        'files': entries,
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
    return path
