"""Distributionally robust DPO: reweighted projected SGD on the DPO loss of a
log-linear policy, with iterate averaging."""
import math
from dataclasses import asdict, dataclass

from . import io
from ._sgd import check_common, robust_sgd
from .errors import ConfigError
from .losses import PolicyParams, dpo_design


@dataclass
class DPOTrainConfig:
    T: int = 1000
    n: int = 64
    eta: object = "auto"
    rho: float = 0.0
    divergence: str = "tv"
    beta: float = 0.5
    B: float = 1.0
    seed: int = 0
    q_floor: float = 0.0
    replacement: bool = True
    output: str = "average"

    def __post_init__(self):
        check_common(self)
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not self.B > 0:
            raise ConfigError(f"B must be positive, got {self.B}")

    def step_size(self):
        if self.eta == "auto":
            return 2.0 / math.sqrt(self.T)
        return float(self.eta)

    def digest(self):
        return io.digest_obj(asdict(self))


def train_robust_dpo(cfg, env, dataset, keep_iterates=False):
    """Returns (PolicyParams, TrainReport); starts from the reference parameters."""
    dataset.check_env(env)
    A, offset = dpo_design(env, dataset.examples, cfg.beta)
    meta = {"trainer": "dpo", "config_digest": cfg.digest(), "build_id": io.build_id(),
            "eta": io.format_float(cfg.step_size())}
    theta, rep = robust_sgd(A, offset, cfg.beta, cfg.B, env.ref_policy_params, cfg.step_size(),
                            cfg.T, cfg.n, cfg.rho, cfg.divergence, cfg.q_floor, cfg.seed,
                            cfg.replacement, cfg.output, keep_iterates, meta)
    return PolicyParams(theta, cfg.B), rep
