"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 a property
could not be certified, 4 internal error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .control import ControlError, ExactControl, build_frame, exact_control_f
from .experiment import (EXIT_CONFIG, EXIT_INTERNAL, EXIT_NOT_CERTIFIED, EXIT_OK, STREAM_FRAME, ArtifactWriter,
                         ConfigError, dumps, load_config, reach_grid, run_experiment, stage_certify,
                         stage_hormander, stage_mixing)
from .flow import Trajectory
from .markov import simulate_chain
from .mixing import NotCertified, finite_oracle, random_chain

STREAM_SIMULATE = 20


def _config(args):
    path = args.config_opt or args.config
    if path is None:
        raise ConfigError("--config", "a configuration file is required")
    cfg = load_config(path)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _writer(args, cfg=None) -> ArtifactWriter:
    return ArtifactWriter(args.out or (cfg.out if cfg is not None else "out"))


def _floats(text: str, name: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in text.split(",")])
    except ValueError:
        raise ConfigError(name, f"expected comma-separated numbers, got {text!r}") from None


def cmd_run(args) -> int:
    cfg = _config(args)
    report = run_experiment(cfg, args.out, args.threads)
    for name, st in report.stages.items():
        print(f"{name:10s} {st['status']}" + (f"  ({st['error']})" if "error" in st else ""))
    print(f"report {Path(report.out) / 'report.json'} sha256 {report.digest}")
    return report.exit_code


def cmd_check_hormander(args) -> int:
    cfg = _config(args)
    res = stage_hormander(cfg, cfg.make_system())
    _writer(args, cfg).write("hormander.json", dumps(res))
    print(res["message"])
    if res["basis"]:
        print("basis: " + ", ".join(res["basis"]))
    return EXIT_OK if res["ok"] else EXIT_NOT_CERTIFIED


def cmd_synthesize_control(args) -> int:
    cfg = _config(args)
    system, law = cfg.make_system(), cfg.make_law()
    target = _floats(args.target, "--target")
    if target.shape != (system.manifold.ambient_dim,):
        raise ConfigError("--target", f"needs {system.manifold.ambient_dim} coordinates")
    frame = build_frame(system, cfg.certification["u_hat"], law.stream(STREAM_FRAME), tau=cfg.control["tau"],
                        h=cfg.step)
    ec = ExactControl(frame)
    w = _writer(args, cfg)
    w.write("frame.json", dumps(dict(frame.to_dict(), f_center=ec.center)))
    csv = exact_control_f(frame, target).to_csv()
    w.write("control.csv", csv)
    sys.stdout.write(csv)
    return EXIT_OK


def cmd_check_reach(args) -> int:
    cfg = _config(args)
    system, law = cfg.make_system(), cfg.make_law()
    rows = reach_grid(system, cfg.certification["u_hat"], args.eps, law, args.grid, args.budget, cfg.step)
    ok = all(r["reached"] for r in rows)
    report = dict(eps=args.eps, grid=args.grid, budget=args.budget, reached=sum(r["reached"] for r in rows),
                  total=len(rows), starts=rows)
    _writer(args, cfg).write("reach.json", dumps(report))
    print(f"{report['reached']}/{report['total']} starts reached within {args.eps}")
    return EXIT_OK if ok else EXIT_NOT_CERTIFIED


def cmd_certify(args) -> int:
    cfg = _config(args)
    for key in ("delta", "m", "grid", "samples"):
        if getattr(args, key) is not None:
            if not getattr(args, key) > 0:
                raise ConfigError(f"--{key}", "must be positive")
            cfg.certification[key] = getattr(args, key)
    res, _ = stage_certify(cfg, cfg.make_system(), cfg.make_law(), cfg.step, args.threads)
    _writer(args, cfg).write("certify.json", dumps(res))
    for key in ("recurrence", "coupling", "minorization"):
        est = res[key]
        print(f"{key:12s} value {est['value']:.6g} (estimate {est['estimate']:.6g}, certified {est['certified']})")
    return EXIT_OK if res["ok"] else EXIT_NOT_CERTIFIED


def cmd_simulate(args) -> int:
    cfg = _config(args)
    system, law = cfg.make_system(), cfg.make_law()
    start = _floats(args.start, "--start") if args.start else np.array(cfg.certification["u_hat"])
    steps = cfg.horizon if args.steps is None else args.steps
    if steps < 0:
        raise ConfigError("--steps", "must be >= 0")
    path = simulate_chain(system, start, steps, law, law.stream(STREAM_SIMULATE), cfg.step)
    traj = Trajectory(np.arange(steps + 1, dtype=float), path, cfg.step)
    _writer(args, cfg).write("trajectory.csv", traj.to_csv())
    print(f"{steps + 1} points, end {path[-1].tolist()}")
    return EXIT_OK


def cmd_mixing_rate(args) -> int:
    if args.from_config:
        args.config_opt = args.from_config
    cfg = _config(args)
    system, law = cfg.make_system(), cfg.make_law()
    w = _writer(args, cfg)
    cert, estimates = stage_certify(cfg, system, law, cfg.step, args.threads)
    if not cert["ok"]:
        raise NotCertified("recurrence or coupling not certified")
    res = stage_mixing(cfg, system, law, cfg.step, estimates, w)
    c = res["certificate"]
    print(f"q = {c['q']:.10g}, gamma = {c['gamma']:.6g}, C = {c['C']:.10g}")
    if res["fit"] is not None:
        f = res["fit"]
        print(f"fitted gamma = {f['gamma']:.6g}, C = {f['C']:.6g}, R^2 = {f['r2']:.4f} ({f['n_used']} points)")
    else:
        print("fit: fewer than 4 points above the noise floor")
    return EXIT_OK if res["ok"] else EXIT_NOT_CERTIFIED


def cmd_oracle(args) -> int:
    if args.states < 2 or args.trials < 1:
        raise ConfigError("--states/--trials", "need at least 2 states and 1 trial")
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    chain = random_chain(args.states, rng, args.min_entry, args.m)
    rep = finite_oracle(chain, args.horizon, args.trials, rng)
    passed = rep.contraction_checks - rep.contraction_violations
    print(f"{rep.status}: p = {rep.p:.6g}, eps = {rep.eps:.6g}")
    print(f"{passed}/{rep.contraction_checks} contraction checks pass")
    print(f"{rep.decay_checks - rep.decay_violations}/{rep.decay_checks} decay checks pass")
    _writer(args).write("oracle.json", dumps(dict(
        status=rep.status, p=rep.p, eps=rep.eps, P=chain.P, u_hat=chain.u_hat, delta_set=chain.delta_set,
        certificate=rep.certificate.to_dict() if rep.certificate else None, mu=rep.mu,
        contraction_checks=rep.contraction_checks, contraction_violations=rep.contraction_violations,
        decay_checks=rep.decay_checks, decay_violations=rep.decay_violations,
        monotone_violations=rep.monotone_violations)))
    return EXIT_OK if rep.ok else EXIT_NOT_CERTIFIED


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", nargs="?", help="configuration file (or bundled name)")
    common.add_argument("--config", dest="config_opt", metavar="PATH")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="worker threads for ensembles")

    p = argparse.ArgumentParser(prog="ctrlmix", description="Controllability and mixing certificates.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="full pipeline").set_defaults(fn=cmd_run)
    sub.add_parser("check-hormander", parents=[common], help="bracket rank at u_hat").set_defaults(
        fn=cmd_check_hormander)
    s = sub.add_parser("synthesize-control", parents=[common], help="exact control to a target (CSV)")
    s.add_argument("--target", required=True, help="comma-separated coordinates")
    s.set_defaults(fn=cmd_synthesize_control)
    s = sub.add_parser("check-reach", parents=[common], help="steer a grid of starts to u_hat")
    s.add_argument("--grid", type=int, default=4)
    s.add_argument("--eps", type=float, default=0.05)
    s.add_argument("--budget", type=int, default=8)
    s.set_defaults(fn=cmd_check_reach)
    s = sub.add_parser("certify", parents=[common], help="recurrence, coupling, minorization")
    s.add_argument("--delta", type=float)
    s.add_argument("--m", type=int)
    s.add_argument("--grid", type=int)
    s.add_argument("--samples", type=int)
    s.set_defaults(fn=cmd_certify)
    s = sub.add_parser("simulate", parents=[common], help="one chain path (CSV)")
    s.add_argument("--steps", type=int, help="chain steps (default flow.horizon)")
    s.add_argument("--start", help="comma-separated start (default u_hat)")
    s.set_defaults(fn=cmd_simulate)
    s = sub.add_parser("mixing-rate", parents=[common], help="certificate and fitted decay")
    s.add_argument("--from-config", metavar="FILE")
    s.set_defaults(fn=cmd_mixing_rate)
    s = sub.add_parser("oracle", parents=[common], help="exact check on a random finite chain")
    s.add_argument("--states", type=int, default=3)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--horizon", type=int, default=200)
    s.add_argument("--min-entry", type=float, default=0.05)
    s.add_argument("--m", type=int, default=1)
    s.set_defaults(fn=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ControlError, NotCertified) as err:
        print(f"not certified: {err}", file=sys.stderr)
        return EXIT_NOT_CERTIFIED
    except Exception as err:  # noqa: BLE001
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
