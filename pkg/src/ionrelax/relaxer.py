"""First-order relaxation of ion positions and cell strain.

The search space is the ``3N + 6`` vector of ion displacements and Voigt
strain components. Each iteration moves the ions along the position part
of the direction, then deforms cell and ions by ``I + delta_eps`` built from
the strain part.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np

from . import lattice as lat
from ._kernels import fast_evaluate
from .derivatives import VOIGT, GradientVector, evaluate, gradient_norm
from .energy import PairTables, build_context
from .structure import BuckinghamTable, Structure


class OptimizerKind(str, enum.Enum):
    GradientDescent = "gd"
    ConjugateGradientPR = "cg"

    GD = "gd"
    CG = "cg"


class Status(str, enum.Enum):
    SUCCESS = "success"
    OVERTIME = "overtime"
    CATASTROPHE = "catastrophe"
    WALLTIME = "walltime"


# Step-size schedules --------------------------------------------------------

@dataclass(frozen=True)
class Constant:
    s: float

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("step size must be positive")

    @property
    def s0(self) -> float:
        return self.s

    @property
    def s_min(self) -> float:
        return self.s


@dataclass(frozen=True)
class Bisect:
    """Halve the distance to ``s_min`` every ``period`` iterations."""

    s0: float
    s_min: float
    period: int = 100

    def __post_init__(self):
        _check_bounds(self.s0, self.s_min)
        if self.period < 1:
            raise ValueError("period must be >= 1")


@dataclass(frozen=True)
class GBisect:
    """Halve the distance to ``s_min`` whenever the gradient norm drops by ``beta``."""

    s0: float
    s_min: float
    beta: float = 10.0

    def __post_init__(self):
        _check_bounds(self.s0, self.s_min)
        if not self.beta > 1:
            raise ValueError("beta must exceed 1")


@dataclass(frozen=True)
class Expo:
    """Multiply by ``gamma`` every iteration, never going below ``s_min``."""

    s0: float
    s_min: float
    gamma: float = 0.999

    def __post_init__(self):
        _check_bounds(self.s0, self.s_min)
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


StepSchedule = Union[Constant, Bisect, GBisect, Expo]


def _check_bounds(s0, s_min):
    if not 0 < s_min <= s0:
        raise ValueError(f"need 0 < s_min <= s0, got s0={s0}, s_min={s_min}")


@dataclass(frozen=True)
class ScheduleState:
    iteration: int
    s: float
    g_reference: float | None = None


def schedule_start(schedule: StepSchedule) -> ScheduleState:
    return ScheduleState(iteration=0, s=schedule.s0)


def schedule_next(schedule: StepSchedule, state: ScheduleState, g: float) -> ScheduleState:
    """Advance the schedule by one iteration given the current gradient norm."""
    it = state.iteration + 1
    s, g_ref = state.s, state.g_reference
    if isinstance(schedule, Bisect):
        if it % schedule.period == 0:
            s = 0.5 * (s + schedule.s_min)
    elif isinstance(schedule, GBisect):
        if g_ref is None:
            g_ref = g
        elif g < g_ref / schedule.beta:
            s = 0.5 * (s + schedule.s_min)
            g_ref = g
    elif isinstance(schedule, Expo):
        s = max(schedule.s_min, s * schedule.gamma)
    return ScheduleState(iteration=it, s=s, g_reference=g_ref)


def parse_schedule(text: str) -> StepSchedule:
    """``const:S``, ``bisect:S0:SMIN:PERIOD``, ``gbisect:S0:SMIN:BETA``, ``expo:S0:SMIN:GAMMA``.

    ``e`` is accepted as a value for ``beta``.
    """
    name, *args = text.strip().split(":")
    name = name.lower()

    def num(x):
        return math.e if x.strip() == "e" else float(x)

    try:
        if name in ("const", "constant"):
            (s,) = args
            return Constant(float(s))
        if name == "bisect":
            s0, smin, *rest = args
            return Bisect(float(s0), float(smin), int(rest[0]) if rest else 100)
        if name == "gbisect":
            s0, smin, *rest = args
            return GBisect(float(s0), float(smin), num(rest[0]) if rest else 10.0)
        if name in ("expo", "es"):
            s0, smin, *rest = args
            return Expo(float(s0), float(smin), float(rest[0]) if rest else 0.999)
    except ValueError as exc:
        raise ValueError(f"bad schedule {text!r}: {exc}") from None
    raise ValueError(f"unknown schedule {text!r}")


def format_schedule(schedule: StepSchedule) -> str:
    """Inverse of :func:`parse_schedule`; values are written with ``repr`` to round-trip."""
    if isinstance(schedule, Constant):
        return f"const:{schedule.s!r}"
    if isinstance(schedule, Bisect):
        return f"bisect:{schedule.s0!r}:{schedule.s_min!r}:{schedule.period}"
    if isinstance(schedule, GBisect):
        return f"gbisect:{schedule.s0!r}:{schedule.s_min!r}:{schedule.beta!r}"
    return f"expo:{schedule.s0!r}:{schedule.s_min!r}:{schedule.gamma!r}"


# Directions and updates -----------------------------------------------------

def gd_direction(g: np.ndarray) -> np.ndarray:
    return -np.asarray(g, dtype=float)


def cg_direction(g: np.ndarray, g_prev: np.ndarray | None = None,
                 d_prev: np.ndarray | None = None) -> np.ndarray:
    """Polak-Ribiere direction with the non-negative restart ``beta = max(0, beta_PR)``."""
    g = np.asarray(g, dtype=float)
    if g_prev is None or d_prev is None:
        return -g
    denom = float(np.dot(g_prev, g_prev))
    if denom == 0.0:
        return -g
    beta = max(0.0, float(np.dot(g, g - g_prev)) / denom)
    if beta == 0.0:
        return -g
    return -g + beta * np.asarray(d_prev, dtype=float)


def polak_ribiere_beta(g, g_prev) -> float:
    denom = float(np.dot(g_prev, g_prev))
    return 0.0 if denom == 0.0 else float(np.dot(g, np.subtract(g, g_prev))) / denom


def strain_increment(voigt_step) -> np.ndarray:
    """Symmetric strain from a Voigt step; off-diagonal entries are split in half."""
    v = np.asarray(voigt_step, dtype=float)
    eps = np.zeros((3, 3))
    for k, (a, b) in enumerate(VOIGT):
        if a == b:
            eps[a, a] = v[k]
        else:
            eps[a, b] = eps[b, a] = 0.5 * v[k]
    return eps


def apply_step(structure: Structure, strain: np.ndarray, direction: np.ndarray,
               s: float) -> tuple[Structure, np.ndarray]:
    """Move ions by ``s d[:3N]`` then deform cell and ions by ``I + delta_eps``.

    Returns the new structure and the accumulated strain tensor. Raises
    :class:`~ionrelax.lattice.DegenerateCellError` if the cell collapses.
    """
    n = structure.n_ions
    d = np.asarray(direction, dtype=float)
    if d.size != 3 * n + 6:
        raise ValueError(f"direction must have {3 * n + 6} components")
    positions = structure.positions + s * d[:3 * n].reshape(n, 3)
    delta = strain_increment(s * d[3 * n:])
    deform = np.eye(3) + delta
    new_lattice = structure.lattice @ deform.T
    lat.volume(new_lattice)
    out = structure.with_geometry(lattice=new_lattice, positions=positions @ deform.T)
    return out, np.asarray(strain) + delta


def strain_reset(strain: np.ndarray, iteration: int, period: int) -> np.ndarray:
    """Zero the accumulated strain every ``period`` iterations; geometry is untouched."""
    if period < 1:
        raise ValueError("period must be >= 1")
    if iteration > 0 and iteration % period == 0:
        return np.zeros((3, 3))
    return strain


# Catastrophe detection ------------------------------------------------------

def detect_catastrophe(energies, gnorms, window: int = 100, min_distance: float | None = None,
                       d_min: float = 0.1) -> bool:
    """Energy strictly falling while the gradient norm strictly rises over ``window`` steps,
    or ions closer than ``d_min``."""
    if min_distance is not None and min_distance < d_min:
        return True
    e = np.asarray(energies, dtype=float)[-(window + 1):]
    g = np.asarray(gnorms, dtype=float)[-(window + 1):]
    if len(e) < window + 1 or len(g) < window + 1:
        return False
    return bool(np.all(np.diff(e) < 0) and np.all(np.diff(g) > 0))


# Relaxation loop ------------------------------------------------------------

@dataclass(frozen=True)
class RelaxationConfig:
    tol: float = 1e-3
    max_iter: int = 50000
    walltime: float | None = None
    strain_reset_period: int | None = None
    accuracy: float = 1e-17
    catastrophe_window: int = 100
    catastrophe_distance: float = 0.1
    alpha_strain_terms: bool = True
    backend: str = "compiled"
    trace_full_limit: int = 5000
    trace_stride: int = 10

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.accuracy < 1:
            raise ValueError("accuracy must lie in (0, 1)")
        if self.backend not in ("compiled", "numpy"):
            raise ValueError("backend must be 'compiled' or 'numpy'")

    def reset_period(self, n_ions: int) -> int:
        return self.strain_reset_period or 3 * n_ions + 9


@dataclass
class TraceSample:
    iteration: int
    energy: float
    gnorm: float
    step: float


@dataclass
class RelaxationOutcome:
    status: Status
    iterations: int
    phi0: float
    phi_final: float
    g0: float
    g_final: float
    structure: Structure
    trace: list[TraceSample] = field(default_factory=list)
    message: str = ""
    elapsed: float = 0.0

    @property
    def success(self) -> bool:
        return self.status is Status.SUCCESS

    def record(self) -> dict:
        return {
            "status": self.status.value,
            "iterations": self.iterations,
            "phi0": self.phi0,
            "phi_final": self.phi_final,
            "g0": self.g0,
            "g_final": self.g_final,
            "message": self.message,
        }


class _Trace:
    def __init__(self, config: RelaxationConfig):
        self.samples: list[TraceSample] = []
        self.full_limit = config.trace_full_limit
        self.stride = config.trace_stride

    def add(self, i, energy, g, s, force=False):
        if force or i <= self.full_limit or i % self.stride == 0:
            if self.samples and self.samples[-1].iteration == i:
                return
            self.samples.append(TraceSample(i, energy, g, s))


def relax(
    structure: Structure,
    table: BuckinghamTable | None,
    optimizer: OptimizerKind | str = OptimizerKind.ConjugateGradientPR,
    schedule: StepSchedule | None = None,
    config: RelaxationConfig | None = None,
    *,
    callback=None,
) -> RelaxationOutcome:
    """Relax ``structure`` until ``g < tol`` with energy below the start.

    Termination is classified as success, catastrophe (energy running away
    downhill, colliding ions or non-finite values), overtime (``max_iter``
    reached) or walltime. ``callback(i, structure, energy, gnorm)`` is called
    once per iteration when given.
    """
    optimizer = OptimizerKind(optimizer)
    schedule = schedule if schedule is not None else Constant(1e-5)
    config = config or RelaxationConfig()
    pt = PairTables.build(structure, table)
    n = structure.n_ions
    period = config.reset_period(n)
    window = config.catastrophe_window
    start = time.monotonic()
    trace = _Trace(config)
    # Length of the current run of steps with energy falling and gradient norm rising;
    # equals the window test of detect_catastrophe without storing the window.
    run = 0

    def evaluate_at(s: Structure):
        if config.backend == "compiled":
            terms, grad, dmin = fast_evaluate(s.lattice, s.positions, s.charges, pt.A, pt.rho,
                                              pt.C, config.accuracy,
                                              alpha_terms=config.alpha_strain_terms)
            energy = math.fsum(terms)
        else:
            ctx = build_context(s, config.accuracy)
            ev = evaluate(s, context=ctx, pair_tables=pt,
                          alpha_strain_terms=config.alpha_strain_terms)
            grad, energy, dmin = ev.gradient.flat(), ev.energy, ev.min_distance
        if not (math.isfinite(energy) and np.all(np.isfinite(grad))):
            raise FloatingPointError("non-finite energy or gradient")
        return energy, grad, dmin

    current = structure
    energy, grad, dmin = evaluate_at(current)
    phi0 = energy
    g = gradient_norm(grad)
    g0 = g
    state = schedule_start(schedule)
    strain = np.zeros((3, 3))
    g_prev = d_prev = None

    def finish(status, i, message=""):
        trace.add(i, energy, g, state.s, force=True)
        return RelaxationOutcome(status=status, iterations=i, phi0=phi0, phi_final=energy,
                                 g0=g0, g_final=g, structure=current, trace=trace.samples,
                                 message=message, elapsed=time.monotonic() - start)

    i = 0
    while True:
        trace.add(i, energy, g, state.s)
        if callback is not None:
            callback(i, current, energy, g)
        if g < config.tol and energy < phi0:
            return finish(Status.SUCCESS, i)
        if run >= window or dmin < config.catastrophe_distance:
            why = (f"ions within {dmin:.3g} A" if dmin < config.catastrophe_distance
                   else "energy falling while gradient norm rises")
            return finish(Status.CATASTROPHE, i, why)
        if i >= config.max_iter:
            return finish(Status.OVERTIME, i)
        if config.walltime is not None and time.monotonic() - start > config.walltime:
            return finish(Status.WALLTIME, i)

        if optimizer is OptimizerKind.GradientDescent:
            d = gd_direction(grad)
        else:
            d = cg_direction(grad, g_prev, d_prev)
        if i > 0:
            state = schedule_next(schedule, state, g)
        elif isinstance(schedule, GBisect):
            state = replace(state, g_reference=g)
        try:
            nxt, strain = apply_step(current, strain, d, state.s)
            e_new, grad_new, d_new = evaluate_at(nxt)
        except (ValueError, FloatingPointError, ZeroDivisionError) as exc:
            return finish(Status.CATASTROPHE, i, f"{type(exc).__name__}: {exc}")
        i += 1
        strain = strain_reset(strain, i, period)
        g_new = gradient_norm(grad_new)
        run = run + 1 if (e_new < energy and g_new > g) else 0
        g_prev, d_prev = grad, d
        current, energy, grad, dmin, g = nxt, e_new, grad_new, d_new, g_new
