"""Experiment harness: random structures, batch campaigns and utility scoring."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from collections import Counter, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .relaxer import (
    OptimizerKind,
    RelaxationConfig,
    Status,
    StepSchedule,
    format_schedule,
    parse_schedule,
    relax,
)
from .structure import BuckinghamTable, Structure, max_pair_distance

log = logging.getLogger(__name__)

DEFAULT_COMPOSITION = {"Sr": (3, 2.0), "Ti": (3, 4.0), "O": (9, -2.0)}
MAX_REJECTIONS = 10_000
MAX_EDGE_DRAWS = 1_000


class GenerationError(RuntimeError):
    """Ions could not be placed on the grid."""


# Structure generation -------------------------------------------------------

@dataclass(frozen=True)
class StructureGenSpec:
    """Recipe for random orthorhombic structures on a cubic grid.

    Anions sit on grid points whose indices are all even, cations on points
    whose indices are all odd. Indices start at 0 at the cell corner.
    """

    edge_choices: tuple[float, ...] = (4.0, 6.0, 8.0, 10.0, 12.0)
    composition: Mapping[str, tuple[int, float]] = field(
        default_factory=lambda: dict(DEFAULT_COMPOSITION))
    grid_spacing: float = 1.0
    seed: int = 0

    def __post_init__(self):
        edges = tuple(sorted({float(e) for e in self.edge_choices}))
        if not edges or min(edges) <= 0:
            raise ValueError("edge_choices must be positive lengths")
        if not self.grid_spacing > 0:
            raise ValueError("grid_spacing must be positive")
        comp = {str(k): (int(v[0]), float(v[1])) for k, v in dict(self.composition).items()}
        if not comp:
            raise ValueError("composition is empty")
        for name, (count, _) in comp.items():
            if count < 1:
                raise ValueError(f"count for {name} must be >= 1")
        if any(q == 0 for _, q in comp.values()):
            raise ValueError("every species needs a nonzero charge")
        net = sum(c * q for c, q in comp.values())
        if abs(net) > 1e-9:
            raise ValueError(f"composition is not neutral (net charge {net:+g})")
        object.__setattr__(self, "edge_choices", edges)
        object.__setattr__(self, "composition", comp)
        if not any(self._fits(e) for e in self._largest_cell()):
            raise ValueError("the grid of the largest cell cannot hold the composition")

    @property
    def n_anions(self) -> int:
        return sum(c for c, q in self.composition.values() if q < 0)

    @property
    def n_cations(self) -> int:
        return sum(c for c, q in self.composition.values() if q > 0)

    def grid_points(self, edge: float) -> int:
        return max(1, int(math.floor(edge / self.grid_spacing + 1e-9)))

    def site_counts(self, edges) -> tuple[int, int]:
        """(even sites, odd sites) available in a cell with the given edges."""
        even = odd = 1
        for e in edges:
            n = self.grid_points(e)
            even *= (n + 1) // 2
            odd *= n // 2
        return even, odd

    def _fits(self, edges) -> bool:
        even, odd = self.site_counts(edges)
        return even >= self.n_anions and odd >= self.n_cations

    def _largest_cell(self):
        big = max(self.edge_choices)
        return [(big, big, big)]

    def species_list(self) -> list[tuple[str, float]]:
        out = []
        for name, (count, q) in self.composition.items():
            out.extend([(name, q)] * count)
        return out


def _place(rng: np.random.Generator, dims, parity: int, count: int, taken: set) -> list:
    """Draw ``count`` distinct grid points with the given parity on every axis."""
    choices = [np.arange(parity, n, 2) for n in dims]
    out = []
    rejections = 0
    while len(out) < count:
        idx = tuple(int(rng.choice(c)) for c in choices)
        if idx in taken:
            rejections += 1
            if rejections > MAX_REJECTIONS:
                raise GenerationError(f"gave up after {MAX_REJECTIONS} rejected placements")
            continue
        taken.add(idx)
        out.append(idx)
    return out


def generate_structure(spec: StructureGenSpec, seed: int | None = None,
                       label: str | None = None) -> Structure:
    """Random neutral structure following ``spec``; deterministic in ``seed``.

    Edges are redrawn when the drawn cell has too few sites of either
    parity for the composition.
    """
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    for _ in range(MAX_EDGE_DRAWS):
        edges = tuple(float(e) for e in rng.choice(spec.edge_choices, size=3))
        if spec._fits(edges):
            break
    else:
        raise GenerationError("no drawn cell can hold the composition")
    dims = [spec.grid_points(e) for e in edges]
    ions = spec.species_list()
    anions = [(n, q) for n, q in ions if q < 0]
    cations = [(n, q) for n, q in ions if q > 0]
    taken: set = set()
    sites = _place(rng, dims, 0, len(anions), taken) + _place(rng, dims, 1, len(cations), taken)
    positions = np.array(sites, dtype=float) * spec.grid_spacing
    species = [n for n, _ in anions + cations]
    charges = [q for _, q in anions + cations]
    return Structure(np.diag(edges), positions, charges, tuple(species),
                     label=label if label is not None else f"gen-{seed}")


def generate_structures(spec: StructureGenSpec, count: int, seed: int | None = None
                        ) -> list[Structure]:
    """``count`` structures with per-structure seeds ``seed, seed+1, ...``."""
    base = spec.seed if seed is None else seed
    return [generate_structure(spec, base + k, label=f"gen-{base + k:06d}") for k in range(count)]


# Campaigns ------------------------------------------------------------------

@dataclass(frozen=True)
class MethodRecipe:
    optimizer: OptimizerKind
    schedule: StepSchedule
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        if isinstance(self.schedule, str):
            object.__setattr__(self, "schedule", parse_schedule(self.schedule))
        if not self.label:
            object.__setattr__(self, "label",
                               f"{self.optimizer.value}-{format_schedule(self.schedule)}")


@dataclass
class RunRecord:
    structure: str
    recipe: str
    group: int
    status: str
    iterations: int
    phi0: float
    phi_final: float
    g0: float
    g_final: float
    max_initial_distance: float
    message: str = ""
    gnorm_bands: dict = field(default_factory=dict)

    @property
    def success(self) -> bool:
        return self.status == Status.SUCCESS.value

    CSV_FIELDS = ("structure", "recipe", "group", "status", "iterations", "phi0", "phi_final",
                  "g0", "g_final", "max_initial_distance", "message")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}

    @classmethod
    def from_row(cls, row: Mapping[str, str]) -> "RunRecord":
        return cls(
            structure=row["structure"], recipe=row["recipe"], group=int(row["group"]),
            status=row["status"], iterations=int(row["iterations"]),
            phi0=float(row["phi0"]), phi_final=float(row["phi_final"]),
            g0=float(row["g0"]), g_final=float(row["g_final"]),
            max_initial_distance=float(row["max_initial_distance"]),
            message=row.get("message", "") or "",
        )


def gnorm_band_steps(trace, width: float = 0.1) -> dict[int, int]:
    """Iterations spent with the gradient norm inside each band ``[k w, (k+1) w)``."""
    out: Counter = Counter()
    prev = None
    for sample in trace:
        if prev is not None:
            out[int(math.floor(prev.gnorm / width))] += sample.iteration - prev.iteration
        prev = sample
    return dict(sorted(out.items()))


def _run_one(job):
    structure, recipe, table, config, group = job
    try:
        outcome = relax(structure, table, recipe.optimizer, recipe.schedule, config)
        return RunRecord(
            structure=structure.label, recipe=recipe.label, group=group,
            status=outcome.status.value, iterations=outcome.iterations,
            phi0=outcome.phi0, phi_final=outcome.phi_final, g0=outcome.g0,
            g_final=outcome.g_final, max_initial_distance=max_pair_distance(structure),
            message=outcome.message, gnorm_bands=gnorm_band_steps(outcome.trace),
        )
    except Exception as exc:  # a broken run must not sink the batch
        return RunRecord(
            structure=structure.label, recipe=recipe.label, group=group,
            status=Status.CATASTROPHE.value, iterations=config.max_iter,
            phi0=math.nan, phi_final=math.nan, g0=math.nan, g_final=math.nan,
            max_initial_distance=max_pair_distance(structure),
            message=f"{type(exc).__name__}: {exc}",
        )


@dataclass
class BatchResult:
    records: list[RunRecord]
    recipes: list[MethodRecipe]
    max_iter: int
    group_size: int = 40

    @property
    def recipe_labels(self) -> list[str]:
        if self.recipes:
            return [r.label for r in self.recipes]
        return list(dict.fromkeys(r.recipe for r in self.records))

    def for_recipe(self, label: str) -> list[RunRecord]:
        return [r for r in self.records if r.recipe == label]

    def status_counts(self, label: str) -> dict[str, int]:
        counts = {s.value: 0 for s in Status}
        for r in self.for_recipe(label):
            counts[r.status] += 1
        return counts

    def success_fraction(self, label: str) -> float:
        runs = self.for_recipe(label)
        return sum(r.success for r in runs) / len(runs) if runs else 0.0

    def group_tau(self, label: str) -> dict[int, float]:
        groups = defaultdict(list)
        for r in self.for_recipe(label):
            groups[r.group].append(r.success)
        return {g: sum(v) / len(v) for g, v in sorted(groups.items())}

    def iteration_stats(self, label: str) -> dict[str, float]:
        its = [r.iterations for r in self.for_recipe(label) if r.success]
        if not its:
            return {"successes": 0, "mean": math.nan, "median": math.nan, "min": math.nan,
                    "max": math.nan}
        return {"successes": len(its), "mean": float(np.mean(its)),
                "median": float(np.median(its)), "min": float(min(its)), "max": float(max(its))}

    def summary(self) -> dict:
        known = {r.label: r for r in self.recipes}
        out = {}
        for label in self.recipe_labels:
            entry = {
                "runs": len(self.for_recipe(label)),
                "success_fraction": self.success_fraction(label),
                "group_tau": {str(k): v for k, v in self.group_tau(label).items()},
                "status_counts": self.status_counts(label),
                "iterations": self.iteration_stats(label),
            }
            if label in known:
                entry["optimizer"] = known[label].optimizer.value
                entry["schedule"] = format_schedule(known[label].schedule)
            out[label] = entry
        return out


def assign_groups(labels: Iterable[str], group_size: int = 40) -> dict[str, int]:
    """Group index for each structure, by sorted label so input order is irrelevant."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    return {lab: k // group_size for k, lab in enumerate(sorted(labels))}


def run_batch(
    structures: Sequence[Structure],
    recipes: Sequence[MethodRecipe],
    table: BuckinghamTable | None,
    config: RelaxationConfig | None = None,
    *,
    group_size: int = 40,
    workers: int = 1,
) -> BatchResult:
    """Relax every structure with every recipe.

    Records come back sorted by (recipe, structure), so the result does not
    depend on input order or on the worker count.
    """
    if not structures or not recipes:
        raise ValueError("run_batch needs at least one structure and one recipe")
    config = config or RelaxationConfig()
    labels = [s.label for s in structures]
    if len(set(labels)) != len(labels) or any(not lab for lab in labels):
        raise ValueError("structure labels must be non-empty and unique")
    recipe_labels = [r.label for r in recipes]
    if len(set(recipe_labels)) != len(recipe_labels):
        raise ValueError("recipe labels must be unique within a campaign")
    groups = assign_groups(labels, group_size)
    jobs = [(s, r, table, config, groups[s.label]) for r in recipes for s in structures]
    if workers <= 1:
        records = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs, chunksize=1))
    order = {lab: k for k, lab in enumerate(recipe_labels)}
    records.sort(key=lambda r: (order[r.recipe], r.structure))
    return BatchResult(records=records, recipes=list(recipes), max_iter=config.max_iter,
                       group_size=group_size)


# Utility --------------------------------------------------------------------

def utility(i_f: float, I: float, tau: float, lam: float) -> float:
    """Speed/success trade-off ``(1 - lam) (I - i_f) / I + lam tau``."""
    if not I > 0:
        raise ValueError("iteration deadline I must be positive")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if i_f < 0:
        raise ValueError("i_f must be non-negative")
    if i_f > I:
        warnings.warn(f"i_f={i_f} exceeds I={I}; clamped", RuntimeWarning, stacklevel=2)
        i_f = I
    if lam == 1.0:
        return float(tau)
    return (1.0 - lam) * (I - i_f) / I + lam * tau


def recipe_utility(batch: BatchResult, label: str, lam: float) -> float:
    """Mean per-structure utility of one recipe; failed runs count as ``i_f = I``."""
    runs = batch.for_recipe(label)
    if not runs:
        return math.nan
    taus = batch.group_tau(label)
    I = batch.max_iter
    vals = [utility(min(r.iterations, I) if r.success else I, I, taus[r.group], lam)
            for r in runs]
    return float(np.mean(vals))


def utility_curve(batch: BatchResult, lambdas: Sequence[float]) -> dict[str, dict[float, float]]:
    return {label: {float(lam): recipe_utility(batch, label, lam) for lam in lambdas}
            for label in batch.recipe_labels}


# Reports --------------------------------------------------------------------

def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc.strerror or exc}") from exc


def _csv_text(fields, rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def export_report(batch: BatchResult, outdir, formats: Iterable[str] = ("csv", "json"),
                  lambdas: Sequence[float] = (0.0, 0.5, 1.0)) -> list[Path]:
    """Write run records, recipe aggregates, utility curves and diagnostic series.

    Files: ``runs.csv``, ``utility.csv``, ``gnorm_bands.csv`` and
    ``diagnostics.csv`` for the csv format, ``recipes.json`` for json.
    """
    formats = {f.lower() for f in formats}
    unknown = formats - {"csv", "json"}
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    out = Path(outdir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"could not create {out}: {exc.strerror or exc}") from exc
    written = []
    if "csv" in formats:
        p = out / "runs.csv"
        _write(p, _csv_text(RunRecord.CSV_FIELDS, (r.row() for r in batch.records)))
        written.append(p)

        curve = utility_curve(batch, lambdas)
        p = out / "utility.csv"
        _write(p, _csv_text(("recipe", "lambda", "utility"),
                            ({"recipe": k, "lambda": lam, "utility": u}
                             for k, row in curve.items() for lam, u in row.items())))
        written.append(p)

        p = out / "diagnostics.csv"
        _write(p, _csv_text(
            ("structure", "recipe", "status", "initial_gnorm", "max_initial_distance",
             "iterations"),
            ({"structure": r.structure, "recipe": r.recipe, "status": r.status,
              "initial_gnorm": r.g0, "max_initial_distance": r.max_initial_distance,
              "iterations": r.iterations} for r in batch.records)))
        written.append(p)

        p = out / "gnorm_bands.csv"
        _write(p, _csv_text(
            ("structure", "recipe", "band_low", "band_high", "steps"),
            ({"structure": r.structure, "recipe": r.recipe, "band_low": round(0.1 * b, 10),
              "band_high": round(0.1 * (b + 1), 10), "steps": n}
             for r in batch.records for b, n in r.gnorm_bands.items())))
        written.append(p)
    if "json" in formats:
        p = out / "recipes.json"
        _write(p, json.dumps(batch.summary(), indent=2, sort_keys=True) + "\n")
        written.append(p)
    return written


def read_runs(path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        return [RunRecord.from_row(row) for row in csv.DictReader(fh)]
