"""Command-line entry point: ``qfl run | compare | qkd-probe``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import parse_config
from .errors import ConfigError, SecurityAbort
from .experiments import (
    EXIT_CONFIG,
    EXIT_IO,
    EXIT_OK,
    EXIT_SECURITY,
    ExperimentIOError,
    compare_baseline_encrypted,
    execute_experiment,
    qkd_probe,
)
from .qkd import QkdPolicy


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out", default="out", help="output directory (default: %(default)s)")
    p.add_argument("--fail-fast", action="store_true", help="stop at the first failed round")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one federated training experiment")
    _add_common(run)
    run.add_argument("--transport", choices=("plaintext", "encrypted"))

    cmp_ = sub.add_parser("compare", help="plaintext vs encrypted transport with identical seeds")
    _add_common(cmp_)

    probe = sub.add_parser("qkd-probe", help="standalone BB84 sweeps over gamma, length and eve rate")
    probe.add_argument("--gamma", type=_floats, default=[0.0], help="comma-separated, per km")
    probe.add_argument("--length", type=_floats, default=[0.0], help="comma-separated, km")
    probe.add_argument("--eve-rate", type=_floats, default=[0.0, 0.5, 1.0])
    probe.add_argument("--n-qubits", type=int, default=100_000)
    probe.add_argument("--seed", type=int, default=0)
    probe.add_argument("--threshold", type=float, default=0.11)
    probe.add_argument("--out", help="write JSON lines here instead of stdout")
    return parser


def _load(args) -> "ExperimentConfig":  # noqa: F821
    overrides = {"master_seed": args.seed}
    if getattr(args, "transport", None):
        overrides["transport"] = args.transport
    if args.fail_fast:
        overrides["fail_fast"] = True
    return parse_config(args.config, **overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "qkd-probe":
            records = qkd_probe(args.gamma, args.length, args.eve_rate, args.n_qubits, args.seed,
                                QkdPolicy(qber_abort_threshold=args.threshold))
            text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
            if args.out:
                Path(args.out).parent.mkdir(parents=True, exist_ok=True)
                Path(args.out).write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return EXIT_OK

        cfg = _load(args)
        if args.command == "run":
            status = execute_experiment(cfg, args.out)
            print(f"wrote {args.out}/metrics.jsonl, summary.json, final_weights.qflw (exit {status})")
            return status

        report = compare_baseline_encrypted(cfg, args.out)
        print(report.render(), end="")
        failed = any(e.get("round_failed") for e in report.security_events)
        if cfg.fail_fast and failed:
            return EXIT_SECURITY
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SecurityAbort as exc:
        print(f"security abort: {exc}", file=sys.stderr)
        return EXIT_SECURITY
    except (ExperimentIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
