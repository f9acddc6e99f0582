"""Experiment config files: schema check, unknown-key rejection, section
parsing into the trainer config dataclasses."""
from dataclasses import fields
from pathlib import Path

from . import io
from .errors import ConfigError, ParseError
from .robust_dpo import DPOTrainConfig
from .robust_policy import PolicyTrainConfig
from .robust_reward import RewardTrainConfig

CONFIG_SCHEMA = "dro-pref/config/v1"

ENV_KEYS = {"num_prompts": 20, "num_completions": 4, "d_reward": 8, "d_policy": 8,
            "F": 1.0, "B": 1.0, "seed": None}
DATA_KEYS = {"n_examples": 20000, "seed": None}
EVAL_KEYS = {"rho": None, "divergence": None}
SWEEP_KEYS = {"trainer": "reward", "rho": None, "env": None, "data": None, "reward_model": None,
              "out_dir": "sweep_out"}
TOP_KEYS = {"schema", "seed", "out_dir", "env", "data", "reward", "policy", "dpo", "eval",
            "sweep"}
TRAINERS = {"reward": RewardTrainConfig, "policy": PolicyTrainConfig, "dpo": DPOTrainConfig}


class ExperimentConfig:
    def __init__(self, doc, base_dir="."):
        io.check_schema(doc, CONFIG_SCHEMA, "config")
        unknown = set(doc) - TOP_KEYS
        if unknown:
            raise ConfigError(f"config: unknown keys {sorted(unknown)}")
        self.doc = doc
        self.base_dir = Path(base_dir)
        self.seed = _int(doc.get("seed", 0), "seed")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        for name in ("env", "data", "eval", "sweep"):
            _section(doc, name, {"env": ENV_KEYS, "data": DATA_KEYS, "eval": EVAL_KEYS,
                                 "sweep": SWEEP_KEYS}[name])
        for name, cls in TRAINERS.items():
            if name in doc:
                _section(doc, name, {f.name: None for f in fields(cls)})

    @classmethod
    def load(cls, path):
        path = Path(path)
        return cls(io.read_json(path, "config"), path.parent)

    def path(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def env_args(self):
        sec = {**ENV_KEYS, **self.doc.get("env", {})}
        seed = self.seed if sec.pop("seed") is None else _int(sec["seed"], "env.seed")
        return seed, sec

    def data_args(self):
        sec = {**DATA_KEYS, **self.doc.get("data", {})}
        seed = self.seed if sec["seed"] is None else _int(sec["seed"], "data.seed")
        return _int(sec["n_examples"], "data.n_examples"), seed

    def trainer(self, name, **overrides):
        sec = dict(self.doc.get(name, {}))
        sec.setdefault("seed", self.seed)
        sec.update(overrides)
        try:
            return TRAINERS[name](**sec)
        except TypeError as e:
            raise ConfigError(f"config section {name!r}: {e}") from None

    def section(self, name):
        return dict(self.doc.get(name, {}))

    def digest(self):
        return io.digest_obj(self.doc)


def _int(v, what):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{what} must be an integer, got {v!r}")
    return v


def _section(doc, name, allowed):
    if name not in doc:
        return
    sec = doc[name]
    if not isinstance(sec, dict):
        raise ParseError(f"config section {name!r} must be an object")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"config section {name!r}: unknown keys {sorted(unknown)}")
