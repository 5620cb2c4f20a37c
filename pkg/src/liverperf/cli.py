"""Command line entry point.

    liverperf run <config>
    liverperf lesion-diff <baseline-config> <lesion-config> [--out DIR]
    liverperf gen-tree <spec> <out>
    liverperf validate <config>

Exit codes: 0 success, 2 invalid input, 3 solver failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import (
    CFLError,
    ConfigurationError,
    ContractError,
    FormatError,
    GenerationError,
    GeometryError,
    InvariantError,
    PerfusionError,
    SolverError,
    SplitError,
    TreeValidationError,
)

EXIT_OK, EXIT_INVALID, EXIT_SOLVER = 0, 2, 3

log = logging.getLogger("liverperf")

_INVALID = (ConfigurationError, FormatError, TreeValidationError, GenerationError, SplitError, GeometryError, ContractError)
_SOLVER = (SolverError, CFLError, InvariantError)


def _cmd_run(args):
    from .scenario import run_scenario

    res = run_scenario(args.config)
    s = res.summary
    print(f"outputs written to {res.config.output_dir}")
    for name, c in s["checks"].items():
        print(f"  {name}: {'pass' if c['pass'] else 'FAIL'} ({c['value']})")
    return EXIT_OK if s["all_checks_pass"] else EXIT_SOLVER


def _cmd_lesion_diff(args):
    from .scenario import difference_report, load_config, load_run_outputs, run_pair, write_difference

    base_cfg = load_config(args.baseline)
    les_cfg = load_config(args.lesion)
    if les_cfg.lesion is None:
        raise ConfigurationError("the lesion scenario has no [lesion] section", "lesion")
    if Path(base_cfg.output_dir).resolve() == Path(les_cfg.output_dir).resolve():
        raise ConfigurationError("baseline and lesion runs need different output directories", "output_dir")
    base, les = run_pair(base_cfg, les_cfg)
    report = difference_report(load_run_outputs(base_cfg.output_dir), load_run_outputs(les_cfg.output_dir))
    out = Path(args.out) if args.out else Path(les_cfg.output_dir) / "difference"
    write_difference(report, out, base.mesh.nodes, base.mesh.cells, les_cfg.lesion)
    print(f"difference report written to {out}")
    ok = base.summary["all_checks_pass"] and les.summary["all_checks_pass"]
    return EXIT_OK if ok else EXIT_SOLVER


def _cmd_gen_tree(args):
    from .scenario import parse_tree_spec
    from .vtree import build_synthetic_tree, save_tree

    tree = build_synthetic_tree(parse_tree_spec(args.spec))
    save_tree(tree, args.out)
    print(f"tree with {tree.n_segments} segments and {len(tree.terminals)} terminals written to {args.out}")
    return EXIT_OK


def _cmd_validate(args):
    from .scenario import load_config, validate_config

    cfg = load_config(args.config)
    validate_config(cfg)
    print(f"{args.config}: valid scenario-v1")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="liverperf", description="Hierarchical perfusion and contrast transport simulator")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a scenario")
    r.add_argument("config")
    r.set_defaults(func=_cmd_run)
    d = sub.add_parser("lesion-diff", help="run baseline and lesion scenarios and write their difference")
    d.add_argument("baseline")
    d.add_argument("lesion")
    d.add_argument("--out", default=None, help="directory for the difference report")
    d.set_defaults(func=_cmd_lesion_diff)
    g = sub.add_parser("gen-tree", help="generate a synthetic tree from a spec file")
    g.add_argument("spec")
    g.add_argument("out")
    g.set_defaults(func=_cmd_gen_tree)
    v = sub.add_parser("validate", help="check a scenario file without running it")
    v.add_argument("config")
    v.set_defaults(func=_cmd_validate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except _SOLVER as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except PerfusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
