"""Command-line front end: simulate, fit, evaluate, online, reproduce.

Settings come from flags, then an optional ``--config`` file (configparser,
one section per subcommand plus [DEFAULT]), then built-in defaults; flags
win.  Every command writes a JSON manifest next to its main output.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .basis import BasisKind, basis_kind, fit_feature_map
from .data import DataError, load_dataset, write_dataset
from .evalkit import (
    TABLES,
    format_grid,
    format_probability_table,
    report_action_probabilities,
    run_offline_experiment,
    table_configs,
    write_replications,
    write_rows,
)
from .ggq import QModel, fit_ggq, ggq_policy
from .online import OnlineConfig, run_online, run_online_individualized
from .policy import SoftmaxPolicy
from .propensity import PropensityModel, fit_logistic_propensity, parse_propensity
from .simenv import generate_offline, make_env, rollout_value
from .vlearn import SearchConfig, optimize_policy, variance_estimate

log = logging.getLogger("vlearning")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
METHODS = ("linear", "poly", "gaussian", "ggq")


class UsageError(Exception):
    pass


def _seed_default() -> int:
    raw = os.environ.get("VLEARN_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"VLEARN_SEED must be an integer, got {raw!r}") from None


def _gamma(text: str) -> float:
    g = float(text)
    if not 0.0 < g < 1.0:
        raise argparse.ArgumentTypeError(f"gamma must lie in (0, 1), got {g}")
    return g


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file; section per subcommand plus [DEFAULT]")
    common.add_argument("--seed", type=int, default=None, help="default: $VLEARN_SEED or 0")
    common.add_argument("--threads", type=_positive, default=1, help="worker cap")
    common.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="vlearn", description="V-learning for mobile-health treatment policies")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", parents=[common], help="generate an offline dataset")
    s.add_argument("--env", default="toy")
    s.add_argument("--n", type=_positive, default=25)
    s.add_argument("--T", type=_positive, default=24)
    s.add_argument("--burn-in", type=int, default=50)
    s.add_argument("--out", default="data.csv")

    f = sub.add_parser("fit", parents=[common], help="estimate a policy from a dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--method", default="gaussian", choices=METHODS)
    f.add_argument("--gamma", type=_gamma, default=0.9)
    f.add_argument("--propensity", default="logged", help="known:p1,..,pK | logistic | logged")
    f.add_argument("--actions", type=_positive, default=None, help="action count (default: inferred)")
    f.add_argument("--anneal-evals", type=int, default=1000)
    f.add_argument("--restarts", type=_positive, default=5, help="GGQ restarts")
    f.add_argument("--out", default="model.csv")

    e = sub.add_parser("evaluate", parents=[common], help="roll out a fitted policy")
    e.add_argument("--model", required=True, help="model report written by fit")
    e.add_argument("--env", default="toy")
    e.add_argument("--n-eval", type=_positive, default=100)
    e.add_argument("--T-eval", type=_positive, default=100)
    e.add_argument("--state", default=None, help="comma-separated state for an action-probability table")
    e.add_argument("--out", default="evaluation.csv")

    o = sub.add_parser("online", parents=[common], help="simulate an online study")
    o.add_argument("--env", default="toy")
    o.add_argument("--n", type=_positive, default=25)
    o.add_argument("--T", type=_positive, default=36)
    o.add_argument("--method", default="gaussian", choices=METHODS)
    o.add_argument("--gamma", type=_gamma, default=0.9)
    o.add_argument("--individualized", action="store_true")
    o.add_argument("--out", default="online.csv")

    r = sub.add_parser("reproduce", parents=[common], help="run a simulation table grid")
    r.add_argument("--table", type=int, required=True, choices=sorted(TABLES))
    r.add_argument("--reps", type=int, default=100)
    r.add_argument("--cells", default=None, help="subset of n:T cells, e.g. 25:24,100:48")
    r.add_argument("--out", default="table.csv")
    return p


def _prescan(argv):
    """(command, config path) without running the full parser."""
    command, config = None, None
    it = iter(argv)
    for tok in it:
        if tok == "--config":
            config = next(it, None)
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
        elif command is None and not tok.startswith("-"):
            command = tok
    return command, config


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    command, config = _prescan(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if config and command in subparsers:
        cp = configparser.ConfigParser()
        if not cp.read(config):
            raise UsageError(f"cannot read config file {config}")
        subparser = subparsers[command]
        actions = {a.dest: a for a in subparser._actions if a.dest != "help"}
        section = cp[command] if cp.has_section(command) else cp.defaults()
        defaults = {}
        for key, raw in section.items():
            dest = key.replace("-", "_")
            if dest not in actions or dest == "config":
                raise UsageError(f"unknown config key {key!r} for {command}")
            act = actions[dest]
            try:
                if isinstance(act, argparse._StoreTrueAction):
                    value = section.getboolean(key)
                else:
                    value = act.type(raw) if act.type else raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
            if act.choices is not None and value not in act.choices:
                raise UsageError(f"config key {key!r}: {value!r} not in {sorted(act.choices)}")
            defaults[dest] = value
            act.required = False
        subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def _basis(method: str) -> BasisKind:
    return basis_kind(method)


def _env(name: str):
    try:
        return make_env(name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(args, outputs: list[str], started: float) -> str:
    path = args.manifest or f"{args.out}.manifest.json"
    snapshot = {k: v for k, v in vars(args).items() if k not in ("manifest",)}
    manifest = {
        "command": args.command,
        "config": snapshot,
        "seed": args.seed,
        "code_version": _code_version(),
        "outputs": {p: _sha256(p) for p in outputs},
        "wall_clock_seconds": round(time.time() - started, 3),
        "argv": ["vlearn", *_argv_from(snapshot)],
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
    return path


def _argv_from(snapshot: dict) -> list[str]:
    """Flags that rerun the command without the config file."""
    out = [snapshot["command"]]
    for k, v in sorted(snapshot.items()):
        if k in ("command", "config", "verbose") or v is None or v is False:
            continue
        flag = "--" + k.replace("_", "-")
        out += [flag] if v is True else [flag, str(v)]
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> list[str]:
    env = _env(args.env)
    data = generate_offline(env, args.n, args.T, np.random.default_rng(args.seed), burn_in_steps=args.burn_in)
    write_dataset(data, args.out, include_propensity=True)
    log.info("wrote %d patients x %d decisions to %s", data.n, args.T, args.out)
    return [args.out]


def _load(args):
    try:
        data = load_dataset(args.data, action_count=args.actions)
    except FileNotFoundError:
        raise UsageError(f"no such dataset: {args.data}") from None
    except DataError as exc:
        raise UsageError(f"invalid dataset: {exc}") from None
    return data


def _propensity(args, data) -> PropensityModel:
    try:
        spec = parse_propensity(args.propensity)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if spec == "logistic":
        return fit_logistic_propensity(data)
    if spec.kind.value == "logged" and not data.has_propensities:
        raise UsageError("dataset has no propensity column; use --propensity known:... or logistic")
    if spec.kind.value == "known_constant" and spec.action_count != data.action_count:
        raise UsageError(f"known propensities list {spec.action_count} actions, data has {data.action_count}")
    return spec


def _write_report(path, items) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        for k, v in items:
            if isinstance(v, np.ndarray):
                v = " ".join(repr(float(x)) for x in v.ravel())
            w.writerow([k, v])


def read_report(path) -> dict[str, str]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        if next(rd, None) != ["key", "value"]:
            raise UsageError(f"{path} is not a model report")
        return {k: v for k, v in rd}


def cmd_fit(args) -> list[str]:
    data = _load(args)
    if args.method == "ggq":
        fit = fit_ggq(data, args.gamma, args.restarts, np.random.default_rng(args.seed))
        m = fit.model
        _write_report(args.out, [
            ("method", "ggq"), ("gamma", args.gamma), ("action_count", m.action_count),
            ("eta", m.eta), ("lo", m.lo), ("hi", m.hi), ("residual_norm", fit.residual_norm),
            ("n", data.n), ("n_transitions", data.n_transitions),
        ])
        return [args.out]
    prop = _propensity(args, data)
    fmap = fit_feature_map(_basis(args.method), data)
    search = SearchConfig(anneal_evals=args.anneal_evals, seed=args.seed)
    fit = optimize_policy(data, prop, fmap, args.gamma, search, np.random.default_rng(args.seed))
    try:
        sigma2 = variance_estimate(data, fit.policy, fit.theta, prop, fmap, args.gamma, fit.nu)
    except np.linalg.LinAlgError as exc:
        log.warning("variance estimate unavailable: %s", exc)
        sigma2 = float("nan")
    _write_report(args.out, [
        ("method", args.method), ("basis", fmap.kind.value), ("gamma", args.gamma),
        ("policy", fit.policy.to_text()), ("value", repr(fit.value)), ("sigma2", repr(sigma2)),
        ("theta", fit.theta), ("nu", fit.nu), ("beta_penalty", fit.beta_penalty),
        ("theta_penalty", fit.theta_penalty), ("n", data.n), ("n_transitions", data.n_transitions),
    ])
    log.info("value %.4f  sigma2 %.4g", fit.value, sigma2)
    return [args.out]


def _policy_from_report(rep: dict):
    if rep.get("method") == "ggq":
        vec = lambda k: np.array([float(x) for x in rep[k].split()])
        model = QModel(vec("eta"), int(rep["action_count"]), vec("lo"), vec("hi"))
        return ggq_policy(model)
    return SoftmaxPolicy.from_text(rep["policy"])


def cmd_evaluate(args) -> list[str]:
    env = _env(args.env)
    try:
        rep = read_report(args.model)
        policy = _policy_from_report(rep)
    except (OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read model report {args.model}: {exc}") from None
    if policy.action_count != env.action_count:
        raise UsageError(f"model has {policy.action_count} actions, environment {args.env} has {env.action_count}")
    value = rollout_value(env, policy, np.random.default_rng(args.seed), args.n_eval, args.T_eval)
    rows = [("env", args.env), ("rollout_value", repr(value)), ("n_eval", args.n_eval), ("T_eval", args.T_eval)]
    if args.state:
        state = np.array([float(x) for x in args.state.split(",")])
        if state.size != env.state_dim:
            raise UsageError(f"state needs {env.state_dim} components")
        table = report_action_probabilities(policy, state, env.action_labels)
        print(format_probability_table(table))
        rows += [(f"prob:{lab}", p) for lab, p in table]
    _write_report(args.out, rows)
    print(f"rollout value {value:.4f}")
    return [args.out]


def cmd_online(args) -> list[str]:
    env = _env(args.env)
    estimator = "ggq" if args.method == "ggq" else _basis(args.method).value
    cfg = OnlineConfig(args.n, args.T, estimator=estimator, gamma=args.gamma, seed=args.seed)
    runner = run_online_individualized if args.individualized else run_online
    res = runner(env, cfg)
    res.write_log(args.out)
    print(f"realized value {res.value:.4f}")
    return [args.out]


def _cells(text):
    if not text:
        return None
    try:
        return tuple(tuple(int(v) for v in c.split(":")) for c in text.split(","))
    except ValueError:
        raise UsageError(f"bad --cells {text!r}; expected n:T,n:T") from None


def cmd_reproduce(args) -> list[str]:
    if args.reps < 1:
        raise UsageError("--reps must be at least 1")
    configs = table_configs(args.table, args.reps, args.seed, cells=_cells(args.cells))
    results = [run_offline_experiment(c, workers=args.threads) for c in configs]
    rows = [r for res in results for r in res.rows]
    write_rows(rows, args.out)
    reps_path = str(Path(args.out).with_suffix("")) + "_replications.csv"
    write_replications(results, reps_path)
    print(format_grid(results))
    return [args.out, reps_path]


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "online": cmd_online,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    started = time.time()
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if args.seed is None:
            args.seed = _seed_default()
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        outputs = COMMANDS[args.command](args)
        _write_manifest(args, outputs, started)
    except UsageError as exc:
        print(f"vlearn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"vlearn: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
