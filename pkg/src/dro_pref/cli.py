"""Command line entry point: ``dro-pref <command> ...``.

Errors are reported as one JSON object on stderr; the exit code is 2 for
config/parse problems, 3 for digest mismatches, 4 for numerical failures.
"""
import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .config import ExperimentConfig
from .divergence import as_divergence
from .errors import ConfigError, DroPrefError, ParseError
from .evaluation import (AtomDist, bias_check, evaluate_dpo, evaluate_policy, evaluate_reward)
from .losses import KLConfig
from .models import load_model, save_model
from .oracles import oracle_optimum_dpo, oracle_optimum_policy, oracle_optimum_reward
from .report import COLUMNS, TrainReport
from .robust_dpo import train_robust_dpo
from .robust_policy import train_robust_policy
from .robust_reward import train_robust_reward
from .synth_env import generate_env, load_dataset, load_env, sample_dataset, save_dataset, save_env

EVAL_SCHEMA = "dro-pref/eval/v1"
BIAS_SCHEMA = "dro-pref/bias/v1"
ORACLE_SCHEMA = "dro-pref/oracle/v1"
MANIFEST_SCHEMA = "dro-pref/manifest/v1"


def max_workers():
    raw = os.environ.get("DRO_PREF_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DRO_PREF_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# -- commands ---------------------------------------------------------------

def cmd_gen(args):
    cfg = ExperimentConfig.load(args.config)
    seed, env_kw = cfg.env_args()
    env = generate_env(seed, **env_kw)
    n_examples, data_seed = cfg.data_args()
    ds = sample_dataset(env, n_examples, data_seed)
    env_out, data_out = args.out
    save_env(env_out, env)
    save_dataset(data_out, ds)


def _train(name, cfg, env, ds, model_out, report_out, reward_path=None, **overrides):
    tcfg = cfg.trainer(name, **overrides)
    extra = {}
    if name == "reward":
        params, rep = train_robust_reward(tcfg, env, ds)
    elif name == "dpo":
        params, rep = train_robust_dpo(tcfg, env, ds)
        extra = {"beta": tcfg.beta}
    else:
        _, reward, _ = load_model(reward_path, env, kinds=("reward",))
        params, rep = train_robust_policy(tcfg, env, ds, reward)
        shift = reward.radius_F if tcfg.reward_shift is None else tcfg.reward_shift
        extra = {"beta": tcfg.beta, "reward_params": reward.omega, "reward_shift": float(shift)}
    extra.update({"rho": float(tcfg.rho), "divergence": as_divergence(tcfg.divergence).value})
    save_model(model_out, name, params, env, cfg.digest(), **extra)
    rep.to_csv(report_out)
    return tcfg


def cmd_train(name):
    def run(args):
        cfg = ExperimentConfig.load(args.config)
        env = load_env(args.env)
        ds = load_dataset(args.data, env)
        model_out, report_out = args.out
        _train(name, cfg, env, ds, model_out, report_out, getattr(args, "reward", None))
    return run


def _evaluate(env, model_path, rho, divergence):
    kind, params, doc = load_model(model_path, env)
    if kind == "reward":
        rep = evaluate_reward(params.omega, env, rho, divergence)
    elif kind == "dpo":
        rep = evaluate_dpo(params.theta, env, float(doc["beta"]), rho, divergence)
    else:
        table = env.rewards(np.asarray(doc["reward_params"], dtype=float),
                            float(doc["reward_shift"]))
        rep = evaluate_policy(params.theta, env, float(doc["beta"]), table, rho, divergence)
    out = {"schema": EVAL_SCHEMA, "model_kind": kind, "env_digest": env.digest()}
    out.update(rep.to_dict())
    return out


def cmd_eval(args):
    env = load_env(args.env)
    io.write_json(args.out, _evaluate(env, args.model, args.rho, args.divergence))


def cmd_bias(args):
    env = load_env(args.env)
    _, reward, _ = load_model(args.model, env, kinds=("reward",))
    atoms = None if args.data is None else AtomDist.empirical(load_dataset(args.data, env))
    rec = bias_check(reward, env, atoms, args.n, args.rho, args.trials, args.seed)
    io.write_json(args.out, {"schema": BIAS_SCHEMA, "env_digest": env.digest(), **rec})


def cmd_oracle(args):
    env = load_env(args.env)
    atoms = None
    if args.support == "joint":
        atoms = (AtomDist.population(env) if args.data is None
                 else AtomDist.empirical(load_dataset(args.data, env)))
    out = {"schema": ORACLE_SCHEMA, "target": args.target, "env_digest": env.digest(),
           "rho": args.rho, "divergence": args.divergence, "support": args.support}
    if args.target == "reward":
        params, value = oracle_optimum_reward(env, args.rho, args.divergence, atoms)
        vec = params.omega
    elif args.target == "dpo":
        params, value = oracle_optimum_dpo(env, KLConfig(args.beta), args.rho, args.divergence,
                                           atoms)
        vec = params.theta
        out["beta"] = args.beta
    else:
        if args.reward is None:
            raise ConfigError("oracle --target policy needs --reward")
        _, reward, _ = load_model(args.reward, env, kinds=("reward",))
        shift = reward.radius_F if args.reward_shift is None else args.reward_shift
        table = env.rewards(reward.omega, shift)
        params, value, grid_value = oracle_optimum_policy(env, table, KLConfig(args.beta),
                                                          args.rho, args.divergence)
        vec = params.theta
        out.update({"beta": args.beta, "reward_shift": shift, "grid_value": grid_value})
    out.update({"params": vec, "value": value})
    io.write_json(args.out, out)


def _sweep_cell(cfg_path, rho):
    """One sweep cell; runs in a worker process."""
    cfg = ExperimentConfig.load(cfg_path)
    sw = cfg.section("sweep")
    name = sw.get("trainer", "reward")
    env = load_env(cfg.path(sw["env"]))
    ds = load_dataset(cfg.path(sw["data"]), env)
    cell = cfg.path(sw.get("out_dir", "sweep_out")) / f"rho_{rho:g}"
    cell.mkdir(parents=True, exist_ok=True)
    reward_path = cfg.path(sw["reward_model"]) if sw.get("reward_model") else None
    tcfg = _train(name, cfg, env, ds, cell / "model.json", cell / "report.csv", reward_path,
                  rho=rho)
    ev = cfg.section("eval")
    eval_rho = rho if ev.get("rho") is None else ev["rho"]
    div = ev.get("divergence") or tcfg.divergence
    io.write_json(cell / "eval.json", _evaluate(env, cell / "model.json", eval_rho, div))
    return str(cell)


def cmd_sweep(args):
    cfg = ExperimentConfig.load(args.config)
    sw = cfg.section("sweep")
    for key in ("rho", "env", "data"):
        if sw.get(key) is None:
            raise ConfigError(f"sweep section needs {key!r}")
    if sw.get("trainer", "reward") not in ("reward", "policy", "dpo"):
        raise ConfigError(f"unknown sweep trainer {sw.get('trainer')!r}")
    if sw.get("trainer") == "policy" and not sw.get("reward_model"):
        raise ConfigError("policy sweep needs 'reward_model'")
    rhos = [float(r) for r in sw["rho"]]
    if len(set(f"{r:g}" for r in rhos)) != len(rhos):
        raise ConfigError("duplicate rho values in sweep")
    workers = min(max_workers(), len(rhos))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            cells = list(ex.map(_sweep_cell, [args.config] * len(rhos), rhos))
    else:
        cells = [_sweep_cell(args.config, r) for r in rhos]
    out_dir = cfg.path(sw.get("out_dir", "sweep_out"))
    io.write_json(out_dir / "manifest.json", manifest(out_dir, cells))


# -- manifest ---------------------------------------------------------------

def stable_bytes(path):
    """File content with run-dependent parts (report wall-clock column) removed."""
    path = Path(path)
    if path.suffix == ".csv":
        rep = TrainReport.from_csv(path)
        rep.columns["wallclock_ms"] = np.zeros(len(rep))
        return rep.to_csv_text().encode()
    return path.read_bytes()


def manifest(root, cells):
    files = {}
    for cell in sorted(cells):
        for f in sorted(Path(cell).iterdir()):
            files[str(f.relative_to(root))] = hashlib.sha256(stable_bytes(f)).hexdigest()
    digest = hashlib.sha256(json.dumps(files, sort_keys=True).encode()).hexdigest()
    return {"schema": MANIFEST_SCHEMA, "files": files, "digest": digest,
            "report_columns": list(COLUMNS)}


# -- argument parsing -------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dro-pref", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate an environment and a preference dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", nargs=2, required=True, metavar=("ENV_JSON", "DATA_JSON"))
    g.set_defaults(func=cmd_gen)

    for name in ("reward", "policy", "dpo"):
        t = sub.add_parser(f"train-{name}", help=f"train the robust {name} model")
        t.add_argument("--config", required=True)
        t.add_argument("--env", required=True)
        t.add_argument("--data", required=True)
        if name == "policy":
            t.add_argument("--reward", required=True, help="reward model.json")
        t.add_argument("--out", nargs=2, required=True, metavar=("MODEL_JSON", "REPORT_CSV"))
        t.set_defaults(func=cmd_train(name))

    e = sub.add_parser("eval", help="exact population (robust) evaluation of a model")
    e.add_argument("--env", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--rho", type=float, required=True)
    e.add_argument("--divergence", choices=("tv", "chi2"), default="tv")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bias-check", help="Monte-Carlo bias of the minibatch robust loss")
    b.add_argument("--env", required=True)
    b.add_argument("--model", required=True)
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--rho", type=float, required=True)
    b.add_argument("--trials", type=int, required=True)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--data", help="use the dataset's empirical atoms instead of the population")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bias)

    o = sub.add_parser("oracle", help="reference optimum of a population robust objective")
    o.add_argument("--target", choices=("reward", "policy", "dpo"), required=True)
    o.add_argument("--env", required=True)
    o.add_argument("--rho", type=float, required=True)
    o.add_argument("--divergence", choices=("tv", "chi2"), default="tv")
    o.add_argument("--beta", type=float, default=0.5)
    o.add_argument("--reward", help="reward model.json (policy target)")
    o.add_argument("--reward-shift", type=float, default=None)
    o.add_argument("--support", choices=("prompt", "joint"), default="prompt")
    o.add_argument("--data", help="dataset for the joint empirical objective")
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle)

    s = sub.add_parser("sweep", help="train and evaluate one cell per rho value")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except DroPrefError as e:
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        err = ParseError(f"{e.filename}: {e.strerror}")
        print(json.dumps(err.to_dict()), file=sys.stderr)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
