"""Command-line entry point.

Subcommands: run (full experiment), gradcheck / klcheck / aggcheck
(verification suites), partition --inspect (per-client label histograms),
uncertainty (recompute predictive entropies for a finished run).

Exit codes: 0 success, 1 verification or runtime failure (with a JSON
report on stdout where applicable), 2 usage errors such as unknown
subcommands or config keys.
"""
from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigurationError, FormatError, ProtocolError, UsageError
from .harness import (
    ExperimentConfig,
    apply_overrides,
    load_config,
    partition_report,
    run_aggcheck,
    run_experiment,
    run_gradcheck,
    run_klcheck,
    uncertainty,
)

# Convenience aliases accepted in --key=value overrides.
OVERRIDE_ALIASES = {"seed": "global_seed"}


def _clean_overrides(raw: list[str]) -> list[str]:
    out = []
    for item in raw:
        if not item.startswith("--"):
            raise UsageError(f"expected --key=value override, got {item!r}")
        body = item[2:]
        if "=" not in body:
            raise UsageError(f"override must look like --key=value, got {item!r}")
        key, value = body.split("=", 1)
        key = OVERRIDE_ALIASES.get(key, key)
        out.append(f"{key}={value}")
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbayes",
        description="Deterministic federated-learning simulator with variational Bayesian clients.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser(
        "run",
        help="run one experiment from a TOML config",
        epilog="any --key=value pair overrides the matching config key",
    )
    p_run.add_argument("config", help="path to a TOML config file")

    p_grad = sub.add_parser("gradcheck", help="objective gradients vs finite differences")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--configs", type=int, default=10)
    p_grad.add_argument("--h", type=float, default=1e-5)

    p_kl = sub.add_parser("klcheck", help="closed-form KL vs Monte Carlo estimates")
    p_kl.add_argument("--seed", type=int, default=0)
    p_kl.add_argument("--pairs", type=int, default=20)
    p_kl.add_argument("--samples", type=int, default=1_000_000)

    p_agg = sub.add_parser("aggcheck", help="closed-form server optimum vs its objective")
    p_agg.add_argument("--seed", type=int, default=0)
    p_agg.add_argument("--client_sets", type=int, default=10)
    p_agg.add_argument("--perturbations", type=int, default=100)

    p_part = sub.add_parser(
        "partition",
        help="inspect the per-client data partition",
        epilog="any --key=value pair overrides the matching config key",
    )
    p_part.add_argument("--inspect", action="store_true")
    p_part.add_argument("config", nargs="?", help="optional TOML config file")

    p_unc = sub.add_parser("uncertainty", help="predictive entropy per snapshot")
    p_unc.add_argument("run_dir", help="directory written by the run subcommand")
    p_unc.add_argument("--n_samples", type=int, default=16)
    p_unc.add_argument("--max_rows", type=int, default=500)
    return parser


def _cmd_run(args, extras) -> int:
    config = load_config(args.config)
    config = apply_overrides(config, _clean_overrides(extras))
    result = run_experiment(config)
    print(
        json.dumps(
            {
                "run_dir": str(result.run_dir),
                "pm_final": result.summary.get("pm_final"),
                "gm_final": result.summary.get("gm_final"),
                "wall_time_s_total": result.summary["wall_time_s_total"],
            },
            indent=2,
        )
    )
    return 0


def _cmd_check(report: dict) -> int:
    print(json.dumps(report, indent=2))
    return 0 if report["passed"] else 1


def _cmd_partition(args, extras) -> int:
    if not args.inspect:
        raise UsageError("partition requires --inspect")
    if args.config:
        config = load_config(args.config)
    else:
        config = ExperimentConfig()
    config = apply_overrides(config, _clean_overrides(extras))
    print(json.dumps(partition_report(config), indent=2))
    return 0


def _cmd_uncertainty(args) -> int:
    rows = uncertainty(args.run_dir, n_samples=args.n_samples, max_rows=args.max_rows)
    print(
        json.dumps(
            {"run_dir": args.run_dir, "rows": len(rows), "output": "uncertainty.csv"},
            indent=2,
        )
    )
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    # Unrecognized --key=value pairs are config overrides for run/partition;
    # every other subcommand treats leftovers as usage errors.
    args, extras = parser.parse_known_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args, extras)
        if args.command == "partition":
            return _cmd_partition(args, extras)
        if extras:
            raise UsageError(f"unexpected arguments: {' '.join(extras)}")
        if args.command == "gradcheck":
            return _cmd_check(run_gradcheck(seed=args.seed, configs=args.configs, h=args.h))
        if args.command == "klcheck":
            return _cmd_check(
                run_klcheck(seed=args.seed, pairs=args.pairs, samples=args.samples)
            )
        if args.command == "aggcheck":
            return _cmd_check(
                run_aggcheck(
                    seed=args.seed,
                    client_sets=args.client_sets,
                    perturbations=args.perturbations,
                )
            )
        if args.command == "uncertainty":
            return _cmd_uncertainty(args)
        raise UsageError(f"unknown subcommand: {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ProtocolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
