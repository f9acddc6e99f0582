"""model.json / policy.json persistence for trained parameters."""
import numpy as np

from . import io
from .errors import DigestMismatchError, ParseError
from .losses import PolicyParams, RewardParams

MODEL_SCHEMA = "dro-pref/model/v1"
KINDS = ("reward", "policy", "dpo")


def model_dict(kind, params, env, config_digest="", **extra):
    vec = params.omega if kind == "reward" else params.theta
    radius = params.radius_F if kind == "reward" else params.radius_B
    doc = {"schema": MODEL_SCHEMA, "kind": kind, "params": np.asarray(vec), "radius": radius,
           "env_digest": env.digest(), "config_digest": config_digest}
    doc.update(extra)
    return doc


def save_model(path, kind, params, env, config_digest="", **extra):
    io.write_json(path, model_dict(kind, params, env, config_digest, **extra))


def load_model(path, env=None, kinds=KINDS):
    """Returns (kind, params, doc); checks the env digest when env is given."""
    doc = io.read_json(path, "model")
    io.check_schema(doc, MODEL_SCHEMA, "model")
    io.require_keys(doc, ["kind", "params", "radius", "env_digest"], "model")
    kind = doc["kind"]
    if kind not in kinds:
        raise ParseError(f"{path}: model kind {kind!r}, expected one of {kinds}")
    if env is not None and doc["env_digest"] != env.digest():
        raise DigestMismatchError(f"{path} was trained on a different env")
    try:
        vec = np.asarray(doc["params"], dtype=float)
        params = (RewardParams(vec, float(doc["radius"])) if kind == "reward"
                  else PolicyParams(vec, float(doc["radius"])))
    except (TypeError, ValueError) as e:
        raise ParseError(f"{path}: {e}") from None
    return kind, params, doc
