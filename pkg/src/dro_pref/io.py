"""JSON/CSV serialisation helpers, digests and per-phase random streams.

Floats are always written with 17 significant digits (``%.16e``) so that a
write/read cycle reproduces every bit. ``json.dumps`` would emit the shortest
repr, which round-trips too but does not give the fixed digit count the file
formats promise.
"""
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, ParseError

# Phase tags for independent random streams derived from one user seed.
PHASES = {"env": 1, "data": 2, "minibatch": 3, "completion": 4, "warmup": 5, "bias": 6,
          "oracle": 7}


def phase_rng(seed, phase):
    """Generator for ``phase`` of a run seeded with ``seed``.

    Streams for different phases never overlap, so e.g. switching a policy run
    from exact to sampled completions leaves the minibatch indices unchanged.
    """
    if seed < 0:
        raise ConfigError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(PHASES[phase],)))


def format_float(x):
    x = float(x)
    if math.isnan(x):
        return "NaN"
    if math.isinf(x):
        return "Infinity" if x > 0 else "-Infinity"
    return "%.16e" % x


def dumps(obj, _depth=0):
    """Deterministic JSON text. Top-level objects get one key per line."""
    if isinstance(obj, dict):
        items = [json.dumps(str(k)) + ": " + dumps(v, _depth + 1) for k, v in obj.items()]
        if _depth == 0:
            return "{\n  " + ",\n  ".join(items) + "\n}\n"
        return "{" + ", ".join(items) + "}"
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(dumps(v, _depth + 1) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if obj is None:
        return "null"
    raise ContractError(f"cannot serialise {type(obj).__name__}")


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


def loads(text, what="document"):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed {what}: {e}") from None


def read_json(path, what=None):
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from None
    return loads(text, what or str(path))


def sha256_text(text):
    return hashlib.sha256(text.encode()).hexdigest()


def digest_obj(obj):
    return sha256_text(dumps(obj))


def require_keys(doc, keys, what):
    if not isinstance(doc, dict):
        raise ParseError(f"{what}: expected a JSON object")
    missing = [k for k in keys if k not in doc]
    if missing:
        raise ParseError(f"{what}: missing keys {missing}")


def check_schema(doc, schema, what):
    require_keys(doc, ["schema"], what)
    if doc["schema"] != schema:
        raise ParseError(f"{what}: schema {doc['schema']!r}, expected {schema!r}")


def build_id():
    """Short content hash of the installed package sources."""
    h = hashlib.sha1()
    here = Path(__file__).parent
    for f in sorted(here.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:12]
