"""Command-line entry point.

Subcommands:
  run <config>                       execute one scenario, write the run dir
  compare <config> --strategies ...  run several strategies on shared seeds
  check --gradcheck                  64-bit gradient verification suite

Exit codes: 0 success, 2 config error, 3 numerical failure.
Environment: RBWP_PRECISION=32|64 selects the float width (default 32
for run/compare; check always verifies in 64-bit).
"""

from __future__ import annotations

import argparse
import os
import sys

from . import diffcore as dc
from .config import ConfigError, parse_config_file
from .harness import (
    ContinualRunner,
    LossConfig,
    NumericalAbort,
    ScenarioConfig,
    STRATEGIES,
    build_scenario,
)
from .plotting import plot_series
from .rundir import scenario_hash, write_csv, write_run_dir
from .verify import gradcheck_suite

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _build_runner(cfg, strategy=None, seed=None):
    scen = cfg["scenario"]
    model = cfg["model"]
    loss = cfg["loss"]
    gate = cfg["gate"]
    scenario = build_scenario(ScenarioConfig(
        tasks=scen["tasks"], classes_per_task=scen["classes_per_task"],
        samples_per_class=scen["samples_per_class"],
        separation=scen["separation"], patches=model["patches"],
        dim=model["dim"], seed=seed if seed is not None else scen["seed"],
    ))
    return ContinualRunner(
        scenario,
        strategy or cfg["run"]["strategy"],
        layers=model["layers"], heads=model["heads"],
        prompt_length=model["prompt_length"],
        proj_dim=model["proj_dim"], align_dim=model["align_dim"],
        loss_config=LossConfig(
            lambda_sparse=loss["lambda_sparse"],
            lambda_match=loss["lambda_match"],
            learning_rate=loss["learning_rate"],
            epochs_per_task=loss["epochs_per_task"],
            batch_size=loss["batch_size"],
        ),
        gate_temperature=gate["temperature"],
        soft_phase_fraction=gate["soft_phase_fraction"],
        seed=seed if seed is not None else scen["seed"],
    )


def _apply_precision():
    bits = os.environ.get("RBWP_PRECISION", "32")
    if bits not in ("32", "64"):
        raise ConfigError(f"RBWP_PRECISION must be 32 or 64, got {bits!r}")
    dc.set_precision(int(bits))


def cmd_run(args) -> int:
    _apply_precision()
    cfg = parse_config_file(args.config)
    with open(args.config) as f:
        config_text = f.read()
    outdir = args.out or cfg["run"]["output_dir"]
    runner = _build_runner(cfg, seed=args.seed)
    try:
        result = runner.run()
    except (NumericalAbort, FloatingPointError) as exc:
        last = runner.events[-1] if runner.events else "(no events logged)"
        print(f"numerical failure: {exc}", file=sys.stderr)
        print(f"last event: {last}", file=sys.stderr)
        return EXIT_NUMERIC
    write_run_dir(outdir, runner, result, config_text)
    print(f"A={result.average_accuracy:.6g} F={result.average_forgetting:.6g}")
    return EXIT_OK


def cmd_compare(args) -> int:
    _apply_precision()
    cfg = parse_config_file(args.config)
    with open(args.config) as f:
        config_text = f.read()
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"unknown strategy {s!r}")
    outdir = args.out or cfg["run"]["output_dir"]
    os.makedirs(outdir, exist_ok=True)
    shash = scenario_hash(config_text)
    rows = []
    traces = []
    for s in strategies:
        runner = _build_runner(cfg, strategy=s, seed=args.seed)
        try:
            result = runner.run()
        except (NumericalAbort, FloatingPointError) as exc:
            print(f"numerical failure in strategy {s}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        write_run_dir(os.path.join(outdir, s), runner, result, config_text)
        final_div = next(
            (d for d in reversed(result.diversity) if d is not None), None
        )
        rows.append([s, result.average_accuracy, result.average_forgetting,
                     final_div, shash])
        traces.append((s, result.diversity))
        print(f"{s}: A={result.average_accuracy:.6g} "
              f"F={result.average_forgetting:.6g}")
    write_csv(os.path.join(outdir, "comparison.csv"),
              ["strategy", "A", "F", "final_diversity", "scenario_hash"], rows)
    plot_series(os.path.join(outdir, "diversity_vs_step.png"), traces)
    return EXIT_OK


def cmd_check(args) -> int:
    if not args.gradcheck:
        print("nothing to check; pass --gradcheck", file=sys.stderr)
        return EXIT_CONFIG
    result = gradcheck_suite(seed=args.seed or 0,
                             corrupt=args.corrupt_gradient)
    print(f"max relative gradient error: {result.max_rel_error:.6g} "
          f"({len(result.skipped)} kink entries skipped)")
    if result.max_rel_error >= 1e-4:
        name, idx = result.worst_param
        print(f"gradient check FAILED at parameter {name}[{idx}]",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rainbowlab",
        description="Prompt-evolution continual-learning laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one scenario")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several strategies on shared seeds")
    p_cmp.add_argument("config")
    p_cmp.add_argument("--strategies", default=",".join(STRATEGIES))
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--out", default=None)
    p_cmp.set_defaults(func=cmd_compare)

    p_chk = sub.add_parser("check", help="numerical verification")
    p_chk.add_argument("--gradcheck", action="store_true")
    p_chk.add_argument("--seed", type=int, default=None)
    p_chk.add_argument("--corrupt-gradient", action="store_true",
                       help="negative-control test hook")
    p_chk.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalAbort, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
