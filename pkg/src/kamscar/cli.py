"""Command-line entry point: ``kamscar <subcommand> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

import yaml

from . import pipeline
from .config import ExperimentConfig, defaults_yaml
from .errors import ConfigError, HypothesisViolation, KamScarError

EXIT_OK, EXIT_HYPOTHESIS, EXIT_NUMERICAL, EXIT_CONFIG = 0, 2, 3, 4

COMMANDS: Dict[str, Callable] = {
    "check-hypotheses": pipeline.cmd_check_hypotheses,
    "quasispectrum": pipeline.cmd_quasispectrum,
    "flow-stats": pipeline.cmd_flow_stats,
    "eigensolve": pipeline.cmd_eigensolve,
    "scar-report": pipeline.cmd_scar_report,
}


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors, not hypothesis violations
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kamscar", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="YAML or JSON configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration entry, dotted keys, YAML values (repeatable)")
        p.add_argument("--output-dir", "-o")
    sub.add_parser("print-defaults")
    return parser


def _apply_overrides(doc: dict, items: List[str]) -> dict:
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key!r}: {p!r} is not a section")
        node[parts[-1]] = yaml.safe_load(raw)
    return doc


def load_config(args) -> ExperimentConfig:
    if args.config:
        base = ExperimentConfig.load(args.config)
        doc, base_dir = dict(base.doc), base.base_dir
    else:
        doc, base_dir = {}, "."
    doc = _apply_overrides(doc, args.set)
    if args.output_dir:
        doc["output_dir"] = args.output_dir
    return ExperimentConfig.from_dict(doc, base_dir)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "print-defaults":
        sys.stdout.write(defaults_yaml())
        return EXIT_OK
    try:
        cfg = load_config(args)
        ctx = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HypothesisViolation as exc:
        print(f"hypothesis violation: {exc} (witness {exc.witness})", file=sys.stderr)
        return EXIT_HYPOTHESIS
    except KamScarError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for w in ctx.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {len(ctx.files)} files to {ctx.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
