"""Distributionally robust reward estimation: reweighted projected SGD on the
Bradley-Terry loss with iterate averaging."""
import math
from dataclasses import asdict, dataclass

from . import io
from ._sgd import check_common, robust_sgd
from .errors import ConfigError
from .losses import RewardParams, reward_design

# Bound on the per-example gradient norm of the BT loss with unit-norm features.
GRAD_BOUND = 2.0


@dataclass
class RewardTrainConfig:
    T: int = 1000
    n: int = 64
    eta: object = "auto"
    rho: float = 0.0
    divergence: str = "tv"
    F: float = 1.0
    seed: int = 0
    q_floor: float = 0.0
    replacement: bool = True
    output: str = "average"
    # domain radius used by eta="auto"; defaults to F
    auto_radius: float = None

    def __post_init__(self):
        check_common(self)
        if not self.F > 0:
            raise ConfigError(f"F must be positive, got {self.F}")

    def step_size(self):
        if self.eta == "auto":
            R = self.F if self.auto_radius is None else self.auto_radius
            return R / (GRAD_BOUND * math.sqrt(self.T))
        return float(self.eta)

    def digest(self):
        return io.digest_obj(asdict(self))


def train_robust_reward(cfg, env, dataset, keep_iterates=False):
    """Returns (RewardParams, TrainReport). The starting point is omega = 0."""
    dataset.check_env(env)
    A = reward_design(env, dataset.examples)
    offset = A[:, 0] * 0.0
    meta = {"trainer": "reward", "config_digest": cfg.digest(), "build_id": io.build_id(),
            "eta": io.format_float(cfg.step_size())}
    w, rep = robust_sgd(A, offset, 1.0, cfg.F, A[0] * 0.0, cfg.step_size(), cfg.T, cfg.n,
                        cfg.rho, cfg.divergence, cfg.q_floor, cfg.seed, cfg.replacement,
                        cfg.output, keep_iterates, meta)
    return RewardParams(w, cfg.F), rep
