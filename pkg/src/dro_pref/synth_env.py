"""Synthetic log-linear preference environments and Bradley-Terry datasets."""
from dataclasses import dataclass

import numpy as np

from . import io
from .errors import ConfigError, DigestMismatchError, InvalidDimensionError, ParseError

ENV_SCHEMA = "dro-pref/env/v1"
DATASET_SCHEMA = "dro-pref/dataset/v1"
SOURCE_FLOOR = 0.01


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureEnv:
    """Finite prompt/completion space with fixed feature maps.

    reward_features[x, y] is phi(x, y) (unit norm), policy_features[x, y] is
    psi(x, y) (unit norm). ``true_reward_params`` generates preference labels,
    ``ref_policy_params`` defines the reference softmax policy.
    """
    reward_features: np.ndarray
    policy_features: np.ndarray
    true_reward_params: np.ndarray
    ref_policy_params: np.ndarray
    source_dist: np.ndarray
    F: float = 1.0
    B: float = 1.0

    def __post_init__(self):
        rf = _frozen(self.reward_features)
        pf = _frozen(self.policy_features)
        if rf.ndim != 3 or pf.ndim != 3 or rf.shape[:2] != pf.shape[:2]:
            raise InvalidDimensionError("feature tensors must be (prompts, completions, dim) "
                                        "with matching leading axes")
        X, Y = rf.shape[:2]
        if X < 1 or Y < 1 or rf.shape[2] < 1 or pf.shape[2] < 1:
            raise InvalidDimensionError(f"empty dimension in env of shape {rf.shape}, {pf.shape}")
        w = _frozen(self.true_reward_params)
        th = _frozen(self.ref_policy_params)
        if w.shape != (rf.shape[2],) or th.shape != (pf.shape[2],):
            raise InvalidDimensionError("parameter vectors do not match feature dimensions")
        for name, f in (("reward", rf), ("policy", pf)):
            norms = np.linalg.norm(f, axis=2)
            if np.max(np.abs(norms - 1.0)) > 1e-12:
                raise ConfigError(f"{name} features must have unit norm")
        D = _frozen(self.source_dist)
        if D.shape != (X,) or np.any(D <= 0) or abs(D.sum() - 1.0) > 1e-12:
            raise ConfigError("source_dist must be a strictly positive distribution over prompts")
        if not (self.F > 0 and self.B > 0):
            raise ConfigError("radii F and B must be positive")
        if np.linalg.norm(w) > self.F * (1 + 1e-12) or np.linalg.norm(th) > self.B * (1 + 1e-12):
            raise ConfigError("parameters lie outside their radius")
        for k, v in (("reward_features", rf), ("policy_features", pf), ("true_reward_params", w),
                     ("ref_policy_params", th), ("source_dist", D)):
            object.__setattr__(self, k, v)
        object.__setattr__(self, "F", float(self.F))
        object.__setattr__(self, "B", float(self.B))

    @property
    def num_prompts(self):
        return self.reward_features.shape[0]

    @property
    def num_completions(self):
        return self.reward_features.shape[1]

    @property
    def d_reward(self):
        return self.reward_features.shape[2]

    @property
    def d_policy(self):
        return self.policy_features.shape[2]

    def rewards(self, omega=None, shift=0.0):
        """(X, Y) table of <omega, phi(x, y)> + shift; omega defaults to the true one."""
        w = self.true_reward_params if omega is None else np.asarray(omega, dtype=float)
        return self.reward_features @ w + shift

    def to_dict(self):
        return {
            "schema": ENV_SCHEMA,
            "num_prompts": self.num_prompts,
            "num_completions": self.num_completions,
            "d_reward": self.d_reward,
            "d_policy": self.d_policy,
            "F": self.F,
            "B": self.B,
            "reward_features": self.reward_features.ravel(),
            "policy_features": self.policy_features.ravel(),
            "true_reward_params": self.true_reward_params,
            "ref_policy_params": self.ref_policy_params,
            "source_dist": self.source_dist,
        }

    @classmethod
    def from_dict(cls, doc):
        io.check_schema(doc, ENV_SCHEMA, "env")
        keys = ["num_prompts", "num_completions", "d_reward", "d_policy", "F", "B",
                "reward_features", "policy_features", "true_reward_params",
                "ref_policy_params", "source_dist"]
        io.require_keys(doc, keys, "env")
        X, Y, dr, dp = (int(doc[k]) for k in keys[:4])
        try:
            rf = np.asarray(doc["reward_features"], dtype=float)
            pf = np.asarray(doc["policy_features"], dtype=float)
            if rf.size != X * Y * dr or pf.size != X * Y * dp:
                raise ParseError("env: feature arrays have the wrong length")
            return cls(rf.reshape(X, Y, dr), pf.reshape(X, Y, dp),
                       np.asarray(doc["true_reward_params"], dtype=float),
                       np.asarray(doc["ref_policy_params"], dtype=float),
                       np.asarray(doc["source_dist"], dtype=float),
                       float(doc["F"]), float(doc["B"]))
        except (TypeError, ValueError) as e:
            raise ParseError(f"env: {e}") from None

    def digest(self):
        return io.digest_obj(self.to_dict())

    def __eq__(self, other):
        if not isinstance(other, FeatureEnv):
            return NotImplemented
        return self.digest() == other.digest()

    __hash__ = None


@dataclass(frozen=True)
class PreferenceExample:
    x: int
    y_plus: int
    y_minus: int


@dataclass(frozen=True, eq=False)
class PreferenceDataset:
    """Rows of ``examples`` are (prompt, preferred, dispreferred)."""
    examples: np.ndarray
    env_digest: str
    seed: int = 0

    def __post_init__(self):
        ex = _frozen(self.examples, np.int64)
        if ex.ndim != 2 or ex.shape[1] != 3 or ex.shape[0] == 0:
            raise ConfigError("dataset must be a non-empty (N, 3) integer array")
        if np.any(ex[:, 1] == ex[:, 2]):
            raise ConfigError("preferred and dispreferred completions must differ")
        if np.any(ex < 0):
            raise ConfigError("negative index in dataset")
        object.__setattr__(self, "examples", ex)

    def __len__(self):
        return self.examples.shape[0]

    def __getitem__(self, i):
        return PreferenceExample(*(int(v) for v in self.examples[i]))

    @property
    def prompts(self):
        return self.examples[:, 0]

    def check_env(self, env):
        if self.env_digest != env.digest():
            raise DigestMismatchError(
                f"dataset was generated for env {self.env_digest[:12]}, got {env.digest()[:12]}")
        if (self.examples[:, 0].max() >= env.num_prompts
                or self.examples[:, 1:].max() >= env.num_completions):
            raise ConfigError("dataset indices out of range for env")

    def to_dict(self):
        return {"schema": DATASET_SCHEMA, "seed": int(self.seed), "env_digest": self.env_digest,
                "examples": self.examples}

    @classmethod
    def from_dict(cls, doc):
        io.check_schema(doc, DATASET_SCHEMA, "dataset")
        io.require_keys(doc, ["seed", "env_digest", "examples"], "dataset")
        try:
            ex = np.asarray(doc["examples"], dtype=np.int64)
        except (TypeError, ValueError) as e:
            raise ParseError(f"dataset: {e}") from None
        return cls(ex, str(doc["env_digest"]), int(doc["seed"]))

    def __eq__(self, other):
        if not isinstance(other, PreferenceDataset):
            return NotImplemented
        return (self.env_digest == other.env_digest and self.seed == other.seed
                and np.array_equal(self.examples, other.examples))

    __hash__ = None


def _unit_rows(rng, shape):
    v = rng.standard_normal(shape)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    while np.any(n == 0):  # measure-zero, but keep the unit-norm guarantee exact
        v = np.where(n == 0, rng.standard_normal(shape), v)
        n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def generate_env(seed, num_prompts, num_completions, d_reward, d_policy, F=1.0, B=1.0):
    """Random environment: unit-norm features, true reward drawn uniformly from
    the F-ball, zero reference parameters, Dirichlet(1) prompt distribution
    floored at 0.01/|X| and renormalised."""
    for name, v in (("num_prompts", num_prompts), ("num_completions", num_completions),
                    ("d_reward", d_reward), ("d_policy", d_policy)):
        if int(v) != v or v < 1:
            raise InvalidDimensionError(f"{name} must be a positive integer, got {v}")
    if num_completions < 2:
        raise InvalidDimensionError("need at least two completions per prompt")
    rng = io.phase_rng(seed, "env")
    X, Y = int(num_prompts), int(num_completions)
    rf = _unit_rows(rng, (X, Y, int(d_reward)))
    pf = _unit_rows(rng, (X, Y, int(d_policy)))
    direction = _unit_rows(rng, (int(d_reward),))
    omega = direction * F * rng.random() ** (1.0 / d_reward)
    D = rng.dirichlet(np.ones(X))
    D = np.maximum(D, SOURCE_FLOOR / X)
    D = D / D.sum()
    return FeatureEnv(rf, pf, omega, np.zeros(int(d_policy)), D, F, B)


def sample_dataset(env, n_examples, seed):
    """Draw prompts from the source distribution, an unordered pair of distinct
    completions uniformly, and the label from the Bradley-Terry model."""
    if n_examples < 1:
        raise ConfigError("n_examples must be positive")
    if env.num_completions < 2:
        raise InvalidDimensionError("need at least two completions per prompt")
    rng = io.phase_rng(seed, "data")
    X, Y = env.num_prompts, env.num_completions
    x = rng.choice(X, size=n_examples, p=env.source_dist)
    a = rng.integers(0, Y, size=n_examples)
    b = rng.integers(0, Y - 1, size=n_examples)
    b = b + (b >= a)
    r = env.rewards()
    p_a = 1.0 / (1.0 + np.exp(-(r[x, a] - r[x, b])))
    a_wins = rng.random(n_examples) < p_a
    ex = np.stack([x, np.where(a_wins, a, b), np.where(a_wins, b, a)], axis=1)
    return PreferenceDataset(ex, env.digest(), int(seed))


def save_env(path, env):
    io.write_json(path, env.to_dict())


def load_env(path):
    return FeatureEnv.from_dict(io.read_json(path, "env"))


def save_dataset(path, ds):
    io.write_json(path, ds.to_dict())


def load_dataset(path, env=None):
    ds = PreferenceDataset.from_dict(io.read_json(path, "dataset"))
    if env is not None:
        ds.check_env(env)
    return ds
