"""Command-line interface: ``pxray clone|attribute|rollout|check``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, checks
from .attribution import METHODS, attribute
from .env import (DEFAULT_STARTS, DEFAULT_TARGETS, EpisodeConfig, Observation, default_arm,
                  expert_dataset, make_scene, rollout, save_dataset)
from .kinematics import ArmModel, ArmState, importance_factors, uniform_factors
from .nn import network_forward
from .serialization import WeightFileError, dumps, load_weights, save_weights
from .training import Hyperparams, TrainingError, clone_policy, default_arch

log = logging.getLogger("pxray")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get("PXRAY_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"PXRAY_SEED must be an integer, got {raw!r}") from None


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"{what} file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} file {path} is not valid JSON: {exc}") from None


def _point(text, what):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers, got {text!r}") from None
    return tuple(vals)


def _load_net(path):
    try:
        return load_weights(path)
    except FileNotFoundError:
        raise UsageError(f"weights file not found: {path}") from None
    except WeightFileError as exc:
        raise UsageError(f"bad weights file {path}: {exc}") from None


def _load_arm(path):
    if path is None:
        return default_arm()
    try:
        return ArmModel.from_json(path)
    except FileNotFoundError:
        raise UsageError(f"arm file not found: {path}") from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad arm file {path}: {exc}") from None


# -- clone ---------------------------------------------------------------------

def cmd_clone(args) -> int:
    seed = args.seed if args.seed is not None else _default_seed()
    if args.targets:
        try:
            cfg = EpisodeConfig.from_json(args.targets)
        except FileNotFoundError:
            raise UsageError(f"targets file not found: {args.targets}") from None
        except (ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"bad targets file {args.targets}: {exc}") from None
    else:
        cfg = EpisodeConfig.default()
    if args.episodes is not None:
        if args.episodes < 1:
            raise UsageError("--episodes must be >= 1")
        cfg.episodes = args.episodes
    cfg.seed = seed
    model = _load_arm(args.arm)
    arch = default_arch(model.n_joints)
    if args.arch:
        arch.update(_read_json(args.arch, "architecture"))
    hp = Hyperparams()
    if args.hyper:
        hp = Hyperparams.from_dict(_read_json(args.hyper, "hyperparameter"))
    if args.epochs is not None:
        hp.epochs = args.epochs
    try:
        records = expert_dataset(cfg, model)
    except ValueError as exc:
        raise UsageError(f"bad episode configuration: {exc}") from None
    if args.dataset_out:
        save_dataset(records, args.dataset_out)
    log.info("training on %d samples", len(records))
    try:
        net, report = clone_policy(records, arch, hp, seed=seed)
    except TrainingError as exc:
        print(f"error: {exc}; diagnostics: {json.dumps(exc.diagnostics)}", file=sys.stderr)
        return EXIT_RUNTIME
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad architecture: {exc}") from None

    reached = []
    for ti, target in enumerate(cfg.targets):
        start = cfg.start_states[ti % len(cfg.start_states)]
        *_, hit = rollout(make_scene(target, start, model),
                          lambda sc, obs: network_forward(net, obs.image, obs.config)[0],
                          args.eval_steps, stop_on_reach=True)
        reached.append(bool(hit))
    save_weights(net, args.out)
    out = report.to_dict()
    del out["seconds"]  # keep reports byte-identical across runs
    out.update({"seed": seed, "episode_config": cfg.to_dict(), "arch": arch,
                "hyperparams": vars(hp), "reached": reached, "n_reached": sum(reached)})
    report_path = Path(args.report) if args.report else Path(args.out).with_suffix(".report.json")
    report_path.write_text(dumps(out, indent=1) + "\n", encoding="utf-8")
    print(f"final loss {report.final_loss:.6g} ({report.final_loss / report.torque_variance:.1%} of torque "
          f"variance); reached {sum(reached)}/{len(reached)} targets; weights -> {args.out}")
    return EXIT_OK


# -- attribute -----------------------------------------------------------------

def _state_from_config(net, config) -> ArmState:
    lo, hi = net.input_groups["joint_pos"]
    vlo, vhi = net.input_groups.get("joint_vel", (lo, lo))
    omega = config[vlo:vhi] if vhi > vlo else None
    return ArmState(config[lo:hi], omega)


def _alpha(mode, net, config, arm_path, required_arm=True):
    if mode == "uniform":
        return uniform_factors(net.n_joints)
    if arm_path is None and required_arm:
        raise UsageError("--alpha kinematic requires --arm")
    model = _load_arm(arm_path)
    if model.n_joints != net.n_joints:
        raise UsageError(f"arm has {model.n_joints} joints, network has {net.n_joints}")
    return importance_factors(model, _state_from_config(net, config), "kinematic")


def cmd_attribute(args) -> int:
    net = _load_net(args.weights)
    obj = _read_json(args.obs, "observation")
    try:
        obs = Observation.from_dict(obj)
        image, config = net.check_inputs(obs.image, obs.config)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"bad observation file {args.obs}: {exc}") from None
    alpha = _alpha(args.alpha, net, config, args.arm)
    res = attribute(net, image, config, alpha, args.method)
    ratios = analysis.group_ratios(res)
    print(f"method={args.method} alpha={np.round(alpha.alpha, 6).tolist()} "
          f"output_total={res.output_total:.9g} total={res.total:.9g} dropped={res.dropped:.9g}")
    for g in analysis.GROUPS:
        print(f"  {g:10s} {ratios[g]:.4f}")
    if args.heatmap:
        hp = Path(args.heatmap)
        analysis.emit_heatmap(res, "image", hp)
        analysis.emit_heatmap(res, "config", hp.with_name(hp.stem + "_config.pgm"))
    if args.csv:
        series = analysis.RelevanceTimeSeries(args.method, args.alpha)
        series.steps.append(analysis.StepRecord(0, res.group_totals, ratios, analysis.group_ratios(res, True),
                                                res.total, res.dropped, res.output_total, ()))
        analysis.write_series_csv(args.csv, {args.method: series})
    return EXIT_OK


# -- rollout -------------------------------------------------------------------

def cmd_rollout(args) -> int:
    net = _load_net(args.weights)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise UsageError(f"unknown method(s) {bad}; valid methods: {', '.join(METHODS)}")
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    seed = args.seed if args.seed is not None else _default_seed()
    model = _load_arm(args.arm)
    target = _point(args.target, "--target") if args.target else DEFAULT_TARGETS[0]
    start = _point(args.start, "--start") if args.start else DEFAULT_STARTS[0]
    try:
        scene = make_scene(target, start, model)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    on_step = None
    if args.heatmap_dir:
        hdir = Path(args.heatmap_dir)
        hdir.mkdir(parents=True, exist_ok=True)

        def on_step(t, method, res, obs):
            analysis.emit_heatmap(res, "image", hdir / f"{method}_t{t:04d}.pgm")

    if args.target_change_step is not None:
        if args.new_target:
            new_target = _point(args.new_target, "--new-target")
        else:
            new_target = analysis.random_between_targets(DEFAULT_TARGETS, np.random.default_rng(seed))
        series = analysis.target_change_experiment(net, scene, args.target_change_step, new_target,
                                                   args.alpha, methods, args.steps, on_step=on_step)
    else:
        series = analysis.run_trajectory_analysis(net, scene, args.alpha, methods, args.steps,
                                                  freeze_alpha=args.freeze_alpha, on_step=on_step)
    analysis.write_series_csv(args.out, series, args.target_change_step)
    for m, s in series.items():
        if len(s):
            diag = analysis.diagnostics(s)
            print(f"[diagnostic] {m}: " + ", ".join(f"{k}={v}" for k, v in diag.items() if k != "method"))
    first = next(iter(series.values()))
    print(f"wrote {len(first)} steps x {len(methods)} methods -> {args.out}; reached={first.reached}")
    return EXIT_OK


# -- check ---------------------------------------------------------------------

def cmd_check(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    seed = args.seed if args.seed is not None else _default_seed()
    names = list(checks.SUITES) if args.suite == "all" else [args.suite]
    results = checks.run_suites(names, args.trials, seed)
    for r in results:
        print(r.line(), json.dumps(r.detail))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pxray", description="Relevance analysis for visuomotor policies.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("clone", help="behavior-clone the scripted expert into a policy network")
    c.add_argument("--out", required=True, help="weights JSON to write")
    c.add_argument("--episodes", type=int, help="expert episodes per target")
    c.add_argument("--targets", help="episode config JSON (targets, start_states, steps, seed)")
    c.add_argument("--arch", help="architecture JSON overriding the default toy network")
    c.add_argument("--hyper", help="hyperparameter JSON")
    c.add_argument("--epochs", type=int)
    c.add_argument("--arm", help="arm description JSON")
    c.add_argument("--seed", type=int)
    c.add_argument("--report", help="training report path (default: <out>.report.json)")
    c.add_argument("--dataset-out", help="also write the expert dataset as JSON lines")
    c.add_argument("--eval-steps", type=int, default=200)
    c.set_defaults(func=cmd_clone)

    a = sub.add_parser("attribute", help="attribute one observation")
    a.add_argument("--weights", required=True)
    a.add_argument("--obs", required=True)
    a.add_argument("--method", choices=METHODS, default="dtd")
    a.add_argument("--alpha", choices=("kinematic", "uniform"), default="kinematic")
    a.add_argument("--arm")
    a.add_argument("--heatmap", help="image heatmap PGM (config heatmap written alongside)")
    a.add_argument("--csv", help="group-ratio CSV")
    a.set_defaults(func=cmd_attribute)

    r = sub.add_parser("rollout", help="run the policy and record relevance ratios per step")
    r.add_argument("--weights", required=True)
    r.add_argument("--steps", type=int, required=True)
    r.add_argument("--methods", default="dtd")
    r.add_argument("--alpha", choices=("kinematic", "uniform"), default="kinematic")
    r.add_argument("--out", required=True)
    r.add_argument("--target-change-step", type=int)
    r.add_argument("--new-target", help="x,y of the replacement target (default: random between trained targets)")
    r.add_argument("--target", help="x,y of the initial target")
    r.add_argument("--start", help="comma-separated initial joint angles")
    r.add_argument("--arm")
    r.add_argument("--freeze-alpha", action="store_true", help="compute importance factors once at t=0")
    r.add_argument("--heatmap-dir")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_rollout)

    k = sub.add_parser("check", help="run the oracle property suites")
    k.add_argument("--suite", choices=[*checks.SUITES, "all"], default="all")
    k.add_argument("--trials", type=int, default=100)
    k.add_argument("--seed", type=int)
    k.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pxray {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
