"""Crystal structures, Buckingham parameter tables and charge maps."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from . import lattice as lat

log = logging.getLogger(__name__)


class CoincidentIonsError(ValueError):
    """Two ions (or an ion and a periodic image) occupy the same point."""


class ChargeNeutralityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Structure:
    """A periodic cell with N ions.

    ``lattice`` holds the lattice vectors as rows (Å), ``positions`` the
    Cartesian ion positions (N, 3) in Å, ``charges`` the ionic charges in
    units of e.
    """

    lattice: np.ndarray
    positions: np.ndarray
    charges: np.ndarray
    species: tuple[str, ...]
    label: str = ""

    def __post_init__(self):
        lattice = lat.as_lattice(self.lattice).copy()
        positions = np.array(self.positions, dtype=float).reshape(-1, 3)
        charges = np.array(self.charges, dtype=float).reshape(-1)
        species = tuple(str(s) for s in self.species)
        n = len(positions)
        if n < 1:
            raise ValueError("a structure needs at least one ion")
        if len(charges) != n or len(species) != n:
            raise ValueError("positions, charges and species must have equal length")
        if not np.all(np.isfinite(positions)):
            raise ValueError("ion positions must be finite")
        for arr in (lattice, positions, charges):
            arr.flags.writeable = False
        object.__setattr__(self, "lattice", lattice)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "charges", charges)
        object.__setattr__(self, "species", species)

    @property
    def n_ions(self) -> int:
        return len(self.positions)

    @property
    def volume(self) -> float:
        return lat.volume(self.lattice)

    @property
    def total_charge(self) -> float:
        return float(np.sum(self.charges))

    def with_geometry(self, lattice=None, positions=None) -> "Structure":
        return replace(
            self,
            lattice=self.lattice if lattice is None else lattice,
            positions=self.positions if positions is None else positions,
        )

    def fractional(self) -> np.ndarray:
        return self.positions @ np.linalg.inv(self.lattice)

    def check(self, *, neutral_tol: float = 1e-8) -> None:
        """Validate cell volume, ion separations and warn on net charge."""
        lat.volume(self.lattice)
        d = min_pair_distance(self)
        if d <= 0.0:
            raise CoincidentIonsError("two ions coincide")
        if abs(self.total_charge) > neutral_tol:
            warnings.warn(
                f"structure carries net charge {self.total_charge:+.6g} e",
                ChargeNeutralityWarning,
                stacklevel=2,
            )


def min_pair_distance(structure: Structure, reach: int = 1) -> float:
    """Smallest separation between any two ions, periodic images included.

    Images within ``reach`` cells along each axis are scanned, which is
    exact for reasonably shaped cells and a lower-bound probe otherwise.
    """
    pos = structure.positions
    n = len(pos)
    shifts = np.array(
        [(a, b, c) for a in range(-reach, reach + 1) for b in range(-reach, reach + 1)
         for c in range(-reach, reach + 1)],
        dtype=float,
    ) @ structure.lattice
    diff = pos[:, None, :] - pos[None, :, :]
    best = math.inf
    for shift in shifts:
        dist = np.linalg.norm(diff + shift, axis=-1)
        if not shift.any():
            dist = dist + np.diag(np.full(n, math.inf))
        best = min(best, float(dist.min()))
    return best


def max_pair_distance(structure: Structure) -> float:
    pos = structure.positions
    if len(pos) < 2:
        return 0.0
    diff = pos[:, None, :] - pos[None, :, :]
    return float(np.linalg.norm(diff, axis=-1).max())


@dataclass(frozen=True)
class BuckinghamParams:
    A: float
    rho: float
    C: float

    def __post_init__(self):
        if not self.rho > 0.0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.A < 0.0 or self.C < 0.0:
            raise ValueError("A and C must be non-negative")


@dataclass
class BuckinghamTable:
    """Unordered species pair -> Buckingham (A [eV], rho [Å], C [eV Å^6])."""

    pairs: dict[frozenset, BuckinghamParams] = field(default_factory=dict)
    _warned: set = field(default_factory=set, init=False, repr=False, compare=False)

    def add(self, a: str, b: str, A: float, rho: float, C: float) -> None:
        self.pairs[frozenset((a, b))] = BuckinghamParams(float(A), float(rho), float(C))

    def get(self, a: str, b: str) -> BuckinghamParams | None:
        return self.pairs.get(frozenset((a, b)))

    def __len__(self) -> int:
        return len(self.pairs)

    def matrices(self, species: Iterable[str]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-ion-pair (A, rho, C) matrices; missing pairs do not interact."""
        species = list(species)
        n = len(species)
        A = np.zeros((n, n))
        rho = np.ones((n, n))
        C = np.zeros((n, n))
        missing = set()
        for i, si in enumerate(species):
            for j, sj in enumerate(species):
                p = self.get(si, sj)
                if p is None:
                    missing.add(tuple(sorted((si, sj))))
                    continue
                A[i, j], rho[i, j], C[i, j] = p.A, p.rho, p.C
        fresh = missing - self._warned
        if fresh and self.pairs:
            log.warning("no Buckingham parameters for %s; treated as non-interacting",
                        sorted(fresh))
            self._warned.update(fresh)
        return A, rho, C

    @classmethod
    def from_file(cls, path) -> "BuckinghamTable":
        path = Path(path)
        return cls.from_text(path.read_text(), source=str(path))

    @classmethod
    def from_text(cls, text: str, source: str = "<string>") -> "BuckinghamTable":
        """Parse ``SPECIES_A SPECIES_B A_eV rho_A C_eVA6`` lines; ``#`` starts a comment."""
        table = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 5:
                raise ValueError(f"{source}:{lineno}: expected 5 fields, got {len(fields)}")
            try:
                A, rho, C = (float(x) for x in fields[2:])
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
            try:
                table.add(fields[0], fields[1], A, rho, C)
            except ValueError as exc:
                raise ValueError(f"{source}:{lineno}: {exc}") from None
        return table

    def to_text(self) -> str:
        lines = []
        for key in sorted(self.pairs, key=lambda k: sorted(k)):
            names = sorted(key)
            a, b = (names[0], names[0]) if len(names) == 1 else names
            p = self.pairs[key]
            lines.append(f"{a} {b} {p.A!r} {p.rho!r} {p.C!r}")
        return "\n".join(lines) + "\n"


def parse_charges(spec: str | Mapping[str, float]) -> dict[str, float]:
    """Charge map from ``"Sr=2,Ti=4,O=-2"``, a file of ``SPECIES CHARGE`` lines, or a mapping."""
    if isinstance(spec, Mapping):
        return {str(k): float(v) for k, v in spec.items()}
    path = Path(spec)
    if "=" not in spec and path.exists():
        out = {}
        for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'SPECIES CHARGE'")
            out[fields[0]] = float(fields[1])
        return out
    out = {}
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, value = item.partition("=")
        if not _:
            raise ValueError(f"bad charge entry {item!r}; expected NAME=VALUE")
        out[name.strip()] = float(value)
    return out
