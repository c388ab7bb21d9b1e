"""YAML stage configs with includes, deep merging, and schema helpers.

Each pipeline stage reads one config file. A file may name others under
`include`; included files merge first (in order), and the file's own keys
win. Scalar CLI flags override the merged result last.
"""

from pathlib import Path

import yaml

from .exceptions import ConfigError


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path) -> dict:
    return _load(Path(path), visiting=())


def _load(path: Path, visiting) -> dict:
    path = path.resolve()
    if path in visiting:
        chain = " -> ".join(str(p) for p in (*visiting, path))
        raise ConfigError(f"include cycle: {chain}")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: {err}") from err
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping, got {type(doc).__name__}")
    includes = doc.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged = {}
    for inc in includes:
        merged = deep_merge(merged, _load(path.parent / inc, (*visiting, path)))
    return deep_merge(merged, doc)


def require(cfg: dict, key: str, kind=None):
    """Fetch a required config field, failing with the key and expectation."""
    if key not in cfg:
        raise ConfigError(f"missing required config field '{key}'")
    val = cfg[key]
    if kind is not None and not isinstance(val, kind):
        names = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise ConfigError(f"config field '{key}' must be {names}, got {type(val).__name__}")
    return val


def state_vector(cfg: dict, key: str):
    val = require(cfg, key, list)
    if len(val) != 3 or not all(isinstance(v, (int, float)) for v in val):
        raise ConfigError(f"config field '{key}' must be a list of 3 numbers")
    return [float(v) for v in val]
