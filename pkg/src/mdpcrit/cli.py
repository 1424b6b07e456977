"""Command-line entry point: ``mdpcrit <subcommand> ...``.

Structured results are JSON, curves and landscapes are CSV. Every file
written with ``--out`` gets a sibling ``<out>.manifest.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from typing import Optional

import numpy as np

from . import __version__
from .chains import classify_chain, classify_mdp
from .envs import FAMILIES, gamma_bw_family_sweep, generate, halves_featurizer, landscape_grid
from .evaluation import evaluate_all
from .learning import LearnerConfig, q_b_learning, q_gamma_learning, q_tot_learning
from .mdp import ValidationError, induce_chain, policy_from_dict
from .solvers import ConvergenceError, blackwell_gamma, solve
from .transform import (RstModel, ZratModel, as_mdp, model_from_dict, model_to_json,
                        rst_to_zrat, zrat_to_rst)

EXIT_VALIDATION = 2
EXIT_IO = 1


def _dumps(doc) -> str:
    return json.dumps(doc, separators=(",", ":")) + "\n"


def _read_json(path: str):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc}") from None


def _load_model(path: str):
    return model_from_dict(_read_json(path))


def _sha256(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _write_atomic(path: str, text: str) -> None:
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(args, text: str, inputs=(), started: float = 0.0) -> None:
    if args.out is None:
        sys.stdout.write(text)
        return
    _write_atomic(args.out, text)
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest = {"command": args.command, "config": config, "seed": args.seed,
                "version": __version__,
                "inputs": {p: _sha256(p) for p in inputs},
                "output_sha256": hashlib.sha256(text.encode()).hexdigest(),
                "wall_clock_seconds": round(time.time() - started, 6)}
    _write_atomic(args.out + ".manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"expected a comma-separated list of numbers, got {text!r}") from None


# --- subcommands ----------------------------------------------------------------------

def cmd_gen(args, started):
    model = generate(args.family, n=args.n, slip=args.slip, c=args.c)
    _emit(args, model_to_json(model), (), started)


def cmd_classify(args, started):
    mdp = as_mdp(_load_model(args.model))
    if args.policy:
        doc = classify_chain(induce_chain(mdp, policy_from_dict(_read_json(args.policy),
                                                                mdp.num_actions))).to_dict()
    else:
        doc = classify_mdp(mdp).to_dict()
    _emit(args, _dumps(doc), [args.model] + ([args.policy] if args.policy else []), started)


def cmd_eval(args, started):
    mdp = as_mdp(_load_model(args.model))
    policy = policy_from_dict(_read_json(args.policy), mdp.num_actions)
    chain = induce_chain(mdp, policy)
    doc = evaluate_all(chain, args.gamma, args.n_max)
    doc["chain_class"] = classify_chain(chain).chain_class
    _emit(args, _dumps(doc), [args.model, args.policy], started)


def cmd_solve(args, started):
    mdp = as_mdp(_load_model(args.model))
    results = solve(mdp, args.criterion, gamma=args.gamma, n=args.n, tol=args.tol)
    if args.criterion == "ndiscount":
        final = results[-1]
        doc = {"criterion": "ndiscount", "n": args.n,
               "policies": [list(p) for p in final.policies],
               "levels": [{"n": r.parameter, "optimal_value": r.value.tolist(),
                           "policies": [list(p) for p in r.policies]} for r in results]}
    else:
        doc = results[0].to_dict()
    _emit(args, _dumps(doc), [args.model], started)


def cmd_blackwell(args, started):
    mdp = as_mdp(_load_model(args.model))
    est = blackwell_gamma(mdp, tol=args.tol, grid_size=args.grid, jobs=args.jobs)
    _emit(args, _dumps(est.to_dict()), [args.model], started)


def cmd_convert(args, started):
    model = _load_model(args.model)
    if args.to == "rst":
        if isinstance(model, RstModel):
            raise ValidationError("model is already a resetting model")
        if not isinstance(model, ZratModel):
            if args.terminal is None:
                raise ValidationError("plain MDP input needs --terminal STATE")
            model = ZratModel(model, args.terminal, 0)
        out = zrat_to_rst(model, require_inevitable=not args.allow_improper)
    else:
        if not isinstance(model, RstModel):
            raise ValidationError("--to zrat needs a resetting-model document")
        out = rst_to_zrat(model)
    _emit(args, out.to_json(), [args.model], started)


def cmd_train(args, started):
    model = _load_model(args.model)
    eval_mdp = None
    if isinstance(model, ZratModel):
        eval_mdp = zrat_to_rst(model, require_inevitable=False).mdp
    cfg = LearnerConfig(alpha=args.alpha, q_init=args.q_init, epsilon=args.epsilon,
                        s_ref=args.s_ref, max_steps=args.steps, episode_cap=args.episode_cap,
                        seed=args.seed, eval_every=args.eval_every,
                        eval_horizon=args.eval_horizon)
    if args.algo == "qgamma":
        if args.gamma is None:
            raise ValidationError("--gamma is required for qgamma")
        _, curve = q_gamma_learning(model, args.gamma, cfg, eval_mdp)
    elif args.algo == "qb":
        _, _, curve = q_b_learning(model, cfg, eval_mdp)
    else:
        _, curve = q_tot_learning(model, cfg, eval_mdp)
    _emit(args, curve.to_csv(), [args.model], started)


def cmd_landscape(args, started):
    mdp = as_mdp(_load_model(args.model))
    feat = halves_featurizer(mdp, args.action)
    lo, hi = -args.range, args.range
    grid = landscape_grid(mdp, feat, (lo, hi, args.grid), (lo, hi, args.grid),
                          _floats(args.gammas), args.s0, args.jobs)
    _emit(args, grid.to_csv(), [args.model], started)


def cmd_sweep(args, started):
    knobs = _floats(args.knobs)
    rows = gamma_bw_family_sweep(args.family, knobs, tol=args.tol, grid_size=args.grid,
                                 jobs=args.jobs)
    text = "knob,gamma_bw_hat\n" + "".join(f"{k:g},{g!r}\n" for k, g in rows)
    _emit(args, text, (), started)


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--out", default=None, help="output file (stdout if omitted)")

    parser = argparse.ArgumentParser(prog="mdpcrit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate an environment model")
    p.add_argument("--family", required=True,
                   choices=["puterman3", "loop1", "gridnav", "taxi", "chain", "torus",
                            "access_control"])
    p.add_argument("--n", type=int)
    p.add_argument("--slip", type=float)
    p.add_argument("--c", type=float)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("classify", parents=[common], help="classify an MDP or a policy's chain")
    p.add_argument("model")
    p.add_argument("--policy")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", parents=[common], help="evaluate a fixed policy")
    p.add_argument("model")
    p.add_argument("--policy", required=True)
    p.add_argument("--gamma", type=float)
    p.add_argument("--n-max", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve", parents=[common], help="optimal value and policy set")
    p.add_argument("model")
    p.add_argument("--criterion", required=True,
                   choices=["discounted", "gain", "total", "ndiscount"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("blackwell", parents=[common], help="estimate the Blackwell discount factor")
    p.add_argument("model")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--grid", type=int, default=40)
    p.set_defaults(func=cmd_blackwell)

    p = sub.add_parser("convert", parents=[common], help="terminal-state <-> resetting model")
    p.add_argument("model")
    p.add_argument("--to", required=True, choices=["rst", "zrat"])
    p.add_argument("--terminal", type=int, help="terminal state of a plain MDP document")
    p.add_argument("--allow-improper", action="store_true",
                   help="skip the inevitable-termination check")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", parents=[common], help="tabular Q-learning curve")
    p.add_argument("model")
    p.add_argument("--algo", required=True, choices=["qgamma", "qb", "qtot"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--episode-cap", type=int, default=1000)
    p.add_argument("--eval-every", type=int, default=5000)
    p.add_argument("--eval-horizon", type=int)
    p.add_argument("--q-init", type=float)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--s-ref", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("landscape", parents=[common], help="two-parameter policy-value landscape")
    p.add_argument("model")
    p.add_argument("--grid", type=int, default=41)
    p.add_argument("--range", type=float, default=5.0)
    p.add_argument("--gammas", default="0,0.35,0.5,0.7,0.85,0.95")
    p.add_argument("--s0", type=int, default=0)
    p.add_argument("--action", type=int, default=1, help="action whose logit the parameters move")
    p.set_defaults(func=cmd_landscape)

    p = sub.add_parser("sweep", parents=[common], help="Blackwell discount over a family knob")
    p.add_argument("--family", required=True, choices=sorted(FAMILIES))
    p.add_argument("--knobs", required=True, help="comma-separated knob values")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--grid", type=int, default=40)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        args.func(args, started)
    except (ValidationError, ValueError, ConvergenceError, np.linalg.LinAlgError) as exc:
        sys.stderr.write(_dumps({"error": type(exc).__name__, "message": str(exc)}))
        return EXIT_VALIDATION
    except OSError as exc:
        sys.stderr.write(_dumps({"error": "io", "message": str(exc)}))
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
