"""Command-line interface.

Exit status is 0 on success, 1 when a run fails or a check does not pass,
and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from .cif import read_structure, write_structure
from .config import load_campaign, schema_summary
from .derivatives import evaluate, finite_difference_gradient, gradient_mismatch
from .relaxer import OptimizerKind, RelaxationConfig, parse_schedule, relax
from .structure import BuckinghamTable, parse_charges
from .workbench import (
    BatchResult,
    StructureGenSpec,
    export_report,
    generate_structures,
    read_runs,
    run_batch,
    utility_curve,
)

log = logging.getLogger("ionrelax")

OUTPUT_DIR_ENV = "IONRELAX_OUTPUT_DIR"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def default_potential() -> Path:
    return Path(str(resources.files("ionrelax") / "data" / "srtio3_example.lib"))


def _output_dir(arg: str | None) -> Path:
    out = Path(arg or os.environ.get(OUTPUT_DIR_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _table(path: str | None) -> BuckinghamTable:
    return BuckinghamTable.from_file(path or default_potential())


def _charges(spec: str | None) -> dict:
    return parse_charges(spec) if spec else {}


def _add_potential_args(p):
    p.add_argument("--potential", help="Buckingham library (SPECIES SPECIES A rho C per line); "
                   "defaults to the bundled example set")
    p.add_argument("--charges", help="charge map, e.g. 'Sr=2,Ti=4,O=-2', or a file of "
                   "'SPECIES CHARGE' lines; overrides charges in the CIF")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ionrelax", description="Ewald/Buckingham relaxation of ionic crystals")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes for batch runs (fixes results across machines)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("relax", help="relax one structure")
    p.add_argument("cif")
    p.add_argument("--optimizer", choices=["gd", "cg"], default="cg")
    p.add_argument("--schedule", default="const:1e-5",
                   help="const:S | bisect:S0:SMIN:PERIOD | gbisect:S0:SMIN:BETA | "
                        "expo:S0:SMIN:GAMMA (default const:1e-5)")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-iter", type=int, default=50000)
    p.add_argument("--walltime", type=float, default=None, help="seconds")
    p.add_argument("--accuracy", type=float, default=1e-17)
    p.add_argument("--strain-reset-period", type=int, default=None)
    p.add_argument("--catastrophe-window", type=int, default=100)
    p.add_argument("--no-alpha-strain-terms", action="store_true",
                   help="debug: drop the alpha(V) contributions to strain derivatives")
    p.add_argument("--output-dir", default=None, help=f"defaults to ${OUTPUT_DIR_ENV} or .")
    _add_potential_args(p)

    p = sub.add_parser("batch", help="run a campaign file")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None)

    p = sub.add_parser("generate", help="write random structures as CIF")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--edges", default="4,6,8,10,12", help="comma-separated edge choices in Å")
    p.add_argument("--composition", default="Sr:3:2,Ti:3:4,O:9:-2",
                   help="SPECIES:COUNT:CHARGE entries, comma-separated")
    p.add_argument("--grid-spacing", type=float, default=1.0)
    p.add_argument("--output-dir", default=None)

    p = sub.add_parser("check-derivatives", help="compare analytic and finite-difference gradients")
    p.add_argument("cif")
    p.add_argument("--accuracy", type=float, default=1e-17)
    p.add_argument("--rel-tol", type=float, default=1e-4)
    p.add_argument("--abs-floor", type=float, default=1e-8)
    p.add_argument("--no-alpha-strain-terms", action="store_true")
    _add_potential_args(p)

    p = sub.add_parser("utility", help="utility table from a runs.csv file")
    p.add_argument("runs")
    p.add_argument("--lambda", dest="lambdas", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    p.add_argument("--max-iter", type=int, default=50000, help="iteration deadline I")
    return parser


def _positive(name, value):
    if value is not None and not value > 0:
        raise UsageError(f"{name} must be positive")


# Subcommands ----------------------------------------------------------------

def cmd_relax(args) -> int:
    try:
        schedule = parse_schedule(args.schedule)
        config = RelaxationConfig(
            tol=args.tol, max_iter=args.max_iter, walltime=args.walltime,
            strain_reset_period=args.strain_reset_period, accuracy=args.accuracy,
            catastrophe_window=args.catastrophe_window,
            alpha_strain_terms=not args.no_alpha_strain_terms)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    structure = read_structure(args.cif, _charges(args.charges))
    table = _table(args.potential)
    outcome = relax(structure, table, OptimizerKind(args.optimizer), schedule, config)
    out = _output_dir(args.output_dir)
    stem = Path(args.cif).stem
    trace_path = out / f"{stem}.trace.csv"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "phi_eV", "gnorm", "step"])
    for t in outcome.trace:
        w.writerow([t.iteration, repr(t.energy), repr(t.gnorm), repr(t.step)])
    trace_path.write_text(buf.getvalue())
    record = outcome.record()
    record.update(input=str(args.cif), optimizer=args.optimizer, schedule=args.schedule,
                  tol=args.tol, max_iter=args.max_iter, accuracy=args.accuracy)
    status_path = out / f"{stem}.status.json"
    status_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    write_structure(outcome.structure, out / f"{stem}.relaxed.cif")
    print(f"{outcome.status.value}: {outcome.iterations} iterations, "
          f"phi {outcome.phi0:.10g} -> {outcome.phi_final:.10g} eV, g {outcome.g_final:.3e}")
    return EXIT_OK if outcome.success else EXIT_FAIL


def cmd_batch(args) -> int:
    try:
        cfg, base = load_campaign(args.config)
    except ValidationError as exc:
        raise UsageError(f"{args.config}: invalid campaign\n{exc}\n{schema_summary()}") from None
    except ValueError as exc:
        raise UsageError(f"{exc}\n{schema_summary()}") from None
    if cfg.structures:
        structures = [read_structure(base / p, cfg.charges) for p in cfg.structures]
    else:
        g = cfg.generation
        structures = generate_structures(g.spec(), g.count, g.seed)
    table = _table(str(base / cfg.potential) if cfg.potential else None)
    workers = args.threads if args.threads is not None else cfg.workers
    batch = run_batch(structures, [r.recipe() for r in cfg.recipes], table,
                      cfg.relaxation.config(), group_size=cfg.group_size, workers=workers)
    out_arg = args.output_dir or (str(base / cfg.output_dir) if cfg.output_dir else None)
    paths = export_report(batch, _output_dir(out_arg), cfg.formats, cfg.lambdas)
    for label in batch.recipe_labels:
        print(f"{label}: success {batch.success_fraction(label):.3f} "
              f"over {len(batch.for_recipe(label))} runs")
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _parse_composition(text: str) -> dict:
    comp = {}
    for item in text.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise UsageError(f"bad composition entry {item!r}; expected SPECIES:COUNT:CHARGE")
        try:
            comp[parts[0]] = (int(parts[1]), float(parts[2]))
        except ValueError:
            raise UsageError(f"bad composition entry {item!r}") from None
    return comp


def cmd_generate(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        edges = tuple(float(e) for e in args.edges.split(","))
        spec = StructureGenSpec(edge_choices=edges, composition=_parse_composition(args.composition),
                                grid_spacing=args.grid_spacing, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _output_dir(args.output_dir)
    for s in generate_structures(spec, args.count, args.seed):
        print(write_structure(s, out / f"{s.label}.cif"))
    return EXIT_OK


def cmd_check_derivatives(args) -> int:
    _positive("--accuracy", args.accuracy)
    structure = read_structure(args.cif, _charges(args.charges))
    table = _table(args.potential)
    analytic = evaluate(structure, table, args.accuracy,
                        alpha_strain_terms=not args.no_alpha_strain_terms).gradient.flat()
    numeric = finite_difference_gradient(structure, table, accuracy=args.accuracy).flat()
    worst, idx = gradient_mismatch(analytic, numeric, args.rel_tol, args.abs_floor)
    n = structure.n_ions
    where = f"ion {idx // 3} axis {'xyz'[idx % 3]}" if idx < 3 * n else \
        f"strain {('xx', 'yy', 'zz', 'yz', 'xz', 'xy')[idx - 3 * n]}"
    print(f"components: {analytic.size}")
    print(f"max |analytic - fd| / tolerance: {worst:.4g} at {where}")
    print(f"max abs difference: {np.max(np.abs(analytic - numeric)):.4g}")
    ok = worst <= 1.0
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_utility(args) -> int:
    if any(not 0 <= lam <= 1 for lam in args.lambdas):
        raise UsageError("--lambda values must lie in [0, 1]")
    _positive("--max-iter", args.max_iter)
    records = read_runs(args.runs)
    batch = BatchResult(records=records, recipes=[], max_iter=args.max_iter)
    curve = utility_curve(batch, args.lambdas)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["recipe", "lambda", "utility"])
    for label, row in curve.items():
        for lam, u in row.items():
            w.writerow([label, lam, f"{u:.6f}"])
    return EXIT_OK


COMMANDS = {
    "relax": cmd_relax,
    "batch": cmd_batch,
    "generate": cmd_generate,
    "check-derivatives": cmd_check_derivatives,
    "utility": cmd_utility,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (OSError, ValueError) as exc:
        print(f"ionrelax: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
