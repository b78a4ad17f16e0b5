"""Command-line front end.

Exit status: 0 success, 2 configuration error, 3 data error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from ..autodiff import glt
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("fedleak_lab")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _out(args, cfg, default: str) -> Path:
    return Path(args.out or (cfg.output if args.config else default))


def cmd_simulate(args) -> int:
    from .experiment import run_simulation
    cfg = _config(args)
    path = run_simulation(cfg, _out(args, cfg, "simulate-out"))
    print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import run_experiment
    cfg = _config(args)
    path = run_experiment(cfg, _out(args, cfg, "experiment-out"), full=args.full)
    print(path)
    return EXIT_OK


def cmd_attack(args) -> int:
    from ..fl import RoundLog
    from .experiment import attack_round, build_model
    cfg = _config(args)
    rlog = RoundLog.load(args.round_log)
    shape = next(iter(rlog.updates.values())).images.shape[1:]
    model = build_model(cfg, shape, cfg.dataset.classes)
    out = _out(args, cfg, "attack-out")
    if out.exists() and any(out.iterdir()):
        raise ConfigError(f"output directory {out} exists and is not empty")
    row = attack_round(cfg, model, rlog, args.client, args.full, out)
    print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from ..metrics import evaluate_reconstruction
    recon = glt.load(args.recon)
    truth = glt.load(args.truth)
    if recon.ndim != 4 or truth.ndim != 4 or recon.shape[1:] != truth.shape[1:]:
        raise DataError("reconstructions and truths must be (B, C, H, W) stacks with equal image shapes")
    report = evaluate_reconstruction(recon, truth, exclusive=args.exclusive)
    out = Path(args.out or "evaluate-out")
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    report.write_json(out / "metrics.json")
    print(json.dumps(report.aggregates(), sort_keys=True))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .diagnose import run_suites
    cfg = _config(args)
    out = Path(args.out or "diagnose-out")
    results = run_suites(args.suite, cfg.seed, out, trials=args.trials)
    print(json.dumps(results, sort_keys=True, default=float))
    return EXIT_OK


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def cmd_sweep(args) -> int:
    from .experiment import sweep
    cfg = _config(args)
    values = [_parse_value(v) for v in args.values.split(",")]
    path = sweep(cfg, args.axis, values, _out(args, cfg, "sweep-out"), parallel=args.parallel, full=args.full)
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out", help="output directory")
    common.add_argument("--parallel", type=int, default=1, help="concurrent sub-experiments")
    common.add_argument("--full", action="store_true", help="use the full attack iteration budget")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedleak-lab", description="Gradient leakage laboratory")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run FL rounds and save round logs").set_defaults(fn=cmd_simulate)
    sub.add_parser("run", parents=[common], help="simulate, attack and report").set_defaults(fn=cmd_run)

    a = sub.add_parser("attack", parents=[common], help="attack a saved round log")
    a.add_argument("--round-log", required=True, help="round directory written by simulate")
    a.add_argument("--client", type=int, default=0)
    a.set_defaults(fn=cmd_attack)

    e = sub.add_parser("evaluate", parents=[common], help="metrics for saved reconstructions")
    e.add_argument("--recon", required=True, help="GLT1 tensor of reconstructions")
    e.add_argument("--truth", required=True, help="GLT1 tensor of ground-truth images")
    e.add_argument("--exclusive", action="store_true", help="use each reconstruction at most once")
    e.set_defaults(fn=cmd_evaluate)

    d = sub.add_parser("diagnose", parents=[common], help="analysis suites")
    d.add_argument("--suite", choices=["mu-l", "fisher", "uniqueness", "theorem3", "all"], default="all")
    d.add_argument("--trials", type=int, default=1000)
    d.set_defaults(fn=cmd_diagnose)

    s = sub.add_parser("sweep", parents=[common], help="one experiment per value of a config field")
    s.add_argument("--axis", required=True, help="dotted config path, e.g. defense.epsilon")
    s.add_argument("--values", required=True, help="comma-separated JSON values")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.parallel < 1:
        parser.error("--parallel must be at least 1")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, glt.GLTFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
