"""Shared builders, oracles and the acceptance report for the test suite."""

from __future__ import annotations

import math

import numpy as np

from ionrelax.structure import BuckinghamTable, Structure

# Generic test potential with dispersion on every pair that has it.
TEST_TABLE_TEXT = """
Ca X 1100.0 0.31 4.0
Na X 900.0 0.30 0.0
X X 1400.0 0.33 60.0
Ca Ca 0.0 1.0 0.0
Na Na 0.0 1.0 0.0
Ca Na 0.0 1.0 0.0
Ca Y 1300.0 0.30 10.0
Na Y 1000.0 0.29 2.0
X Y 1500.0 0.32 35.0
Y Y 1600.0 0.31 25.0
"""

CHARGES = {"Ca": 2.0, "Na": 1.0, "X": -1.0, "Y": -2.0}


def generic_table() -> BuckinghamTable:
    return BuckinghamTable.from_text(TEST_TABLE_TEXT, source="test-table")


def random_lattice(rng: np.random.Generator, volume: float, skew: float = 0.25) -> np.ndarray:
    """Random right-handed cell of the given volume with moderate shear."""
    while True:
        L = np.eye(3) + skew * rng.uniform(-1, 1, (3, 3))
        det = np.linalg.det(L)
        if det <= 0.3:
            continue
        L *= (volume / det) ** (1.0 / 3.0)
        lengths = np.linalg.norm(L, axis=1)
        if lengths.max() / lengths.min() < 1.6:
            return L


def _species_for(n: int, rng: np.random.Generator) -> list[str]:
    """Neutral species list of length ``n`` drawn from the test charges."""
    while True:
        cations = rng.choice(["Ca", "Na"], size=n // 2)
        anions = rng.choice(["X", "Y"], size=n - n // 2)
        species = list(cations) + list(anions)
        if sum(CHARGES[s] for s in species) == 0:
            return species


def random_neutral_structure(seed: int, n: int, d_min: float = 1.7,
                             volume_per_ion: float = 18.0) -> Structure:
    """Seeded random neutral triclinic structure with all separations above ``d_min``."""
    rng = np.random.default_rng(seed)
    species = _species_for(n, rng)
    L = random_lattice(rng, volume_per_ion * n)
    shifts = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]) @ L
    frac: list[np.ndarray] = []
    while len(frac) < n:
        f = rng.uniform(0, 1, 3)
        p = f @ L
        ok = all(np.min(np.linalg.norm(p - (g @ L) + shifts, axis=1)) > d_min for g in frac)
        if ok:
            frac.append(f)
    pos = np.array(frac) @ L
    return Structure(L, pos, [CHARGES[s] for s in species], tuple(species),
                     label=f"rand-{seed}-{n}")


def rock_salt(a: float = 5.64, q: float = 1.0, cation: str = "Na", anion: str = "Cl") -> Structure:
    """Conventional 8-ion rock-salt cell."""
    frac = np.array([[0, 0, 0], [0, .5, .5], [.5, 0, .5], [.5, .5, 0],
                     [.5, 0, 0], [0, .5, 0], [0, 0, .5], [.5, .5, .5]])
    return Structure(np.eye(3) * a, frac * a, [q] * 4 + [-q] * 4,
                     (cation,) * 4 + (anion,) * 4, label="rock-salt")


MGO_TABLE_TEXT = """
Mg O 1428.5 0.2945 0.0
O O 22764.0 0.149 27.88
Mg Mg 0.0 1.0 0.0
"""


def mgo_table() -> BuckinghamTable:
    return BuckinghamTable.from_text(MGO_TABLE_TEXT, source="mgo")


def perturbed_mgo(seed: int, a: float = 4.2, shake: float = 0.05, strain: float = 0.01) -> Structure:
    """Rock-salt MgO near its minimum with random ion and cell perturbations."""
    base = rock_salt(a, 2.0, "Mg", "O")
    rng = np.random.default_rng(seed)
    e = strain * rng.standard_normal((3, 3))
    D = np.eye(3) + 0.5 * (e + e.T)
    pos = (base.positions + shake * rng.standard_normal(base.positions.shape)) @ D.T
    return base.with_geometry(lattice=base.lattice @ D.T, positions=pos)


def evjen_madelung(shells: int) -> float:
    """Rock-salt Madelung constant from a neutral cube of point charges.

    Charges on cube faces, edges and corners are weighted 1/2, 1/4 and 1/8
    so every partial cube is neutral; the sum is taken around a cation at
    the origin with unit nearest-neighbour distance.
    """
    total = 0.0
    r = range(-shells, shells + 1)
    for i in r:
        for j in r:
            for k in r:
                if i == j == k == 0:
                    continue
                w = 1.0
                for c in (i, j, k):
                    if abs(c) == shells:
                        w *= 0.5
                sign = -1.0 if (i + j + k) % 2 else 1.0
                total += w * sign / math.sqrt(i * i + j * j + k * k)
    return -total


def brute_force_triplets(L, r_off):
    """Images whose inner face on every axis lies inside the cutoff sphere.

    Each image cell centre is projected onto the three face normals; an image
    counts when, for every axis, the face nearer the origin cell is closer
    than ``r_off``, or the image is in the first layer (the clamp).
    """
    L = np.asarray(L, float)
    normals, heights = [], []
    for i in range(3):
        n = np.cross(L[(i + 1) % 3], L[(i + 2) % 3])
        n /= np.linalg.norm(n)
        normals.append(n)
        heights.append(abs(float(L[i] @ n)))
    keep = set()
    reach = int(r_off / min(heights)) + 3
    rng = range(-reach, reach + 1)
    for n in ((a, b, c) for a in rng for b in rng for c in rng):
        if n == (0, 0, 0):
            continue
        centre = np.asarray(n, float) @ L
        inside = True
        for i in range(3):
            near_face = abs(float(centre @ normals[i])) - heights[i] / 2.0
            if abs(n[i]) > 1 and near_face >= r_off:
                inside = False
        if inside:
            keep.add(n)
    return keep


# Lines printed by the terminal-summary hook in conftest.py.
ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"criterion {criterion} ({name}): {'PASS' if ok else 'FAIL'}  {detail}")
