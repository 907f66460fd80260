"""Ewald-expanded Buckingham-Coulomb lattice energy.

The Coulomb sum is split into an erfc-screened real-space part, a
reciprocal-space part and a self term. The Buckingham dispersion tail
``-C/r^6`` receives the same treatment, while the exponential repulsion is
summed directly in real space.

Short-range sums run over the ordered pairs ``(i, j, n)`` of the real image
set (the central cell included) and skip ``i == j`` only for ``n = 0``.
Reciprocal sums run over every ``(i, j)`` pair, ``i == j`` included, and skip
``m = 0``. All summations use lexicographic image order followed by
row-major ``(i, j)`` order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from . import lattice as lat
from .structure import (
    BuckinghamTable,
    ChargeNeutralityWarning,
    CoincidentIonsError,
    Structure,
)

#: Coulomb constant in eV Å / e^2.
COULOMB_CONSTANT = 14.399645

SQRT_PI = math.sqrt(math.pi)
PI_3_2 = math.pi ** 1.5


@dataclass(frozen=True)
class EnergyContext:
    """Splitting parameter, cutoffs and image sets for one cell shape."""

    split: lat.EwaldSplit
    real_images: np.ndarray
    recip_images: np.ndarray
    lattice: np.ndarray
    k_e: float = COULOMB_CONSTANT

    @property
    def alpha(self) -> float:
        return self.split.alpha

    @property
    def volume(self) -> float:
        return lat.volume(self.lattice)


@dataclass(frozen=True)
class EnergyBreakdown:
    coul_short: float
    coul_long: float
    coul_self: float
    buck_short: float
    buck_long: float
    buck_self: float

    TERMS = ("coul_short", "coul_long", "coul_self", "buck_short", "buck_long", "buck_self")

    @property
    def coulomb(self) -> float:
        return self.coul_short + self.coul_long + self.coul_self

    @property
    def buckingham(self) -> float:
        return self.buck_short + self.buck_long + self.buck_self

    @property
    def total(self) -> float:
        return math.fsum(self.as_tuple())

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in self.TERMS)

    def as_dict(self) -> dict[str, float]:
        out = dict(zip(self.TERMS, self.as_tuple()))
        out["total"] = self.total
        return out


def build_context(
    structure: Structure,
    accuracy: float = 1e-17,
    *,
    alpha: float | None = None,
    k_e: float = COULOMB_CONSTANT,
) -> EnergyContext:
    """Derive alpha, both cutoffs and both image sets for the current cell."""
    vol = lat.volume(structure.lattice)
    split = lat.ewald_split(structure.n_ions, vol, accuracy, alpha=alpha)
    rec = lat.reciprocal(structure.lattice)
    real = lat.inflated_cell_truncation(structure.lattice, split.r_off_real)
    recip = lat.inflated_cell_truncation(rec, split.r_off_recip)
    return EnergyContext(split=split, real_images=real, recip_images=recip,
                         lattice=np.array(structure.lattice), k_e=k_e)


@dataclass(frozen=True)
class PairTables:
    """Per-ion-pair constants: charge products and Buckingham parameters."""

    qq: np.ndarray
    A: np.ndarray
    rho: np.ndarray
    C: np.ndarray

    @classmethod
    def build(cls, structure: Structure, table: BuckinghamTable | None) -> "PairTables":
        q = structure.charges
        if table is None:
            table = BuckinghamTable()
        A, rho, C = table.matrices(structure.species)
        return cls(qq=np.outer(q, q), A=A, rho=rho, C=C)


@dataclass(frozen=True)
class RealGeometry:
    """Separation vectors ``r_i + L_n - r_j`` for the central cell and every image.

    ``vec`` has shape ``(K + 1, N, N, 3)`` with the central cell first;
    ``mask`` flags the summands actually included.
    """

    vec: np.ndarray
    dist: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class RecipGeometry:
    G: np.ndarray
    G2: np.ndarray
    cos: np.ndarray
    sin: np.ndarray


def real_geometry(structure: Structure, context: EnergyContext) -> RealGeometry:
    pos = structure.positions
    n = len(pos)
    shifts = np.vstack([np.zeros((1, 3)), lat.translations(context.real_images, structure.lattice)])
    vec = (pos[:, None, :] - pos[None, :, :])[None, :, :, :] + shifts[:, None, None, :]
    dist = np.sqrt(np.einsum("kijx,kijx->kij", vec, vec))
    mask = np.ones(dist.shape, dtype=bool)
    mask[0, np.arange(n), np.arange(n)] = False
    if np.any(dist[mask] == 0.0):
        raise CoincidentIonsError("zero separation between an ion and a periodic image")
    dist = np.where(mask, dist, 1.0)
    return RealGeometry(vec=vec, dist=dist, mask=mask)


def recip_geometry(structure: Structure, context: EnergyContext) -> RecipGeometry:
    if len(context.recip_images) == 0:
        raise ValueError("reciprocal image set is empty")
    G = lat.translations(context.recip_images, lat.reciprocal(structure.lattice))
    G2 = np.einsum("mx,mx->m", G, G)
    phase = G @ structure.positions.T
    return RecipGeometry(G=G, G2=G2, cos=np.cos(phase), sin=np.sin(phase))


def _pair_sum(values: np.ndarray, mask: np.ndarray) -> float:
    return float(np.sum(np.where(mask, values, 0.0)))


def _pair_form(weights: np.ndarray, rg: RecipGeometry) -> np.ndarray:
    """``sum_ij w_ij cos(G_m . (r_i - r_j))`` for every m."""
    return (np.einsum("mi,ij,mj->m", rg.cos, weights, rg.cos)
            + np.einsum("mi,ij,mj->m", rg.sin, weights, rg.sin))


# Energy kernels on precomputed geometry -------------------------------------

def _coulomb_short(pt: PairTables, geo: RealGeometry, alpha: float, k_e: float) -> float:
    kernel = pt.qq[None] * erfc(alpha * geo.dist) / geo.dist
    return 0.5 * k_e * _pair_sum(kernel, geo.mask)


def _coulomb_long(pt: PairTables, rg: RecipGeometry, alpha: float, vol: float, k_e: float) -> float:
    weight = np.exp(-rg.G2 / (4.0 * alpha**2)) / rg.G2
    return 2.0 * math.pi * k_e / vol * float(np.sum(weight * _pair_form(pt.qq, rg)))


def _coulomb_self(q: np.ndarray, alpha: float, k_e: float) -> float:
    return -k_e * alpha / SQRT_PI * float(np.sum(q * q))


def dispersion_damping(x: np.ndarray) -> np.ndarray:
    """``(1 + x^2 + x^4/2) exp(-x^2)``, the real-space screening of ``1/r^6``."""
    x2 = x * x
    return (1.0 + x2 + 0.5 * x2 * x2) * np.exp(-x2)


def _buckingham_short(pt: PairTables, geo: RealGeometry, alpha: float) -> float:
    r = geo.dist
    rep = pt.A[None] * np.exp(-r / pt.rho[None])
    disp = pt.C[None] * dispersion_damping(alpha * r) / r**6
    return 0.5 * _pair_sum(rep - disp, geo.mask)


def dispersion_recip_kernel(G: np.ndarray, alpha: float) -> np.ndarray:
    """``[sqrt(pi) erfc(G/2a) + (4a^3/G^3 - 2a/G) exp(-G^2/4a^2)] G^3``."""
    b = G / (2.0 * alpha)
    return SQRT_PI * G**3 * erfc(b) + (4.0 * alpha**3 - 2.0 * alpha * G**2) * np.exp(-b * b)


def _buckingham_long(pt: PairTables, rg: RecipGeometry, alpha: float, vol: float) -> float:
    if not np.any(pt.C):
        return 0.0
    H = dispersion_recip_kernel(np.sqrt(rg.G2), alpha)
    return -PI_3_2 / (24.0 * vol) * float(np.sum(H * _pair_form(pt.C, rg)))


def _buckingham_self(pt: PairTables, alpha: float, vol: float) -> float:
    return (-PI_3_2 * alpha**3 / (6.0 * vol) * float(np.sum(pt.C))
            + alpha**6 / 12.0 * float(np.trace(pt.C)))


# Public per-term API --------------------------------------------------------

def coulomb_short(structure: Structure, context: EnergyContext) -> float:
    pt = PairTables.build(structure, None)
    return _coulomb_short(pt, real_geometry(structure, context), context.alpha, context.k_e)


def coulomb_long(structure: Structure, context: EnergyContext) -> float:
    pt = PairTables.build(structure, None)
    return _coulomb_long(pt, recip_geometry(structure, context), context.alpha,
                         lat.volume(structure.lattice), context.k_e)


def coulomb_self(structure: Structure, context: EnergyContext) -> float:
    return _coulomb_self(structure.charges, context.alpha, context.k_e)


def buckingham_short(structure: Structure, context: EnergyContext, table: BuckinghamTable) -> float:
    pt = PairTables.build(structure, table)
    return _buckingham_short(pt, real_geometry(structure, context), context.alpha)


def buckingham_long(structure: Structure, context: EnergyContext, table: BuckinghamTable) -> float:
    pt = PairTables.build(structure, table)
    return _buckingham_long(pt, recip_geometry(structure, context), context.alpha,
                            lat.volume(structure.lattice))


def buckingham_self(structure: Structure, context: EnergyContext, table: BuckinghamTable) -> float:
    pt = PairTables.build(structure, table)
    return _buckingham_self(pt, context.alpha, lat.volume(structure.lattice))


def breakdown_from_geometry(
    pt: PairTables,
    geo: RealGeometry,
    rg: RecipGeometry,
    charges: np.ndarray,
    context: EnergyContext,
    vol: float,
) -> EnergyBreakdown:
    a, k_e = context.alpha, context.k_e
    return EnergyBreakdown(
        coul_short=_coulomb_short(pt, geo, a, k_e),
        coul_long=_coulomb_long(pt, rg, a, vol, k_e),
        coul_self=_coulomb_self(charges, a, k_e),
        buck_short=_buckingham_short(pt, geo, a),
        buck_long=_buckingham_long(pt, rg, a, vol),
        buck_self=_buckingham_self(pt, a, vol),
    )


def total_energy(
    structure: Structure,
    table: BuckinghamTable | None = None,
    accuracy: float = 1e-17,
    *,
    context: EnergyContext | None = None,
    pair_tables: PairTables | None = None,
) -> EnergyBreakdown:
    """All six Ewald terms for ``structure``.

    A context is built from the structure's cell unless one is supplied.
    """
    if abs(structure.total_charge) > 1e-8:
        warnings.warn(f"structure carries net charge {structure.total_charge:+.6g} e",
                      ChargeNeutralityWarning, stacklevel=2)
    if context is None:
        context = build_context(structure, accuracy)
    pt = pair_tables if pair_tables is not None else PairTables.build(structure, table)
    geo = real_geometry(structure, context)
    rg = recip_geometry(structure, context)
    return breakdown_from_geometry(pt, geo, rg, structure.charges, context,
                                   lat.volume(structure.lattice))


def direct_sum_sequence(
    structure: Structure,
    shell_count: int,
    table: BuckinghamTable | None = None,
    k_e: float = COULOMB_CONSTANT,
) -> np.ndarray:
    """Undamped Coulomb + Buckingham sum over growing cubes of whole cells.

    Entry ``s`` of the returned sequence holds the energy with every image
    ``max|n_i| <= s`` included. Whole cells are neutral, so each shell adds
    a neutral layer. The Coulomb part is only conditionally convergent and
    depends on the cell's dipole moment; this is a test oracle, not an
    energy method.
    """
    if structure.n_ions > 16 or shell_count > 30:
        raise ValueError("direct sums are limited to N <= 16 and shell_count <= 30")
    pt = PairTables.build(structure, table)
    pos = structure.positions
    n = len(pos)
    rij = pos[:, None, :] - pos[None, :, :]
    offdiag = ~np.eye(n, dtype=bool)
    out = np.empty(shell_count + 1)
    acc = 0.0
    for s in range(shell_count + 1):
        rng = range(-s, s + 1)
        shell = [(a, b, c) for a in rng for b in rng for c in rng
                 if max(abs(a), abs(b), abs(c)) == s]
        shifts = np.array(shell, dtype=float) @ structure.lattice
        vec = rij[None] + shifts[:, None, None, :]
        r = np.linalg.norm(vec, axis=-1)
        mask = np.broadcast_to(offdiag, r.shape) if s == 0 else np.ones(r.shape, dtype=bool)
        r = np.where(mask, r, 1.0)
        terms = (k_e * pt.qq[None] / r + pt.A[None] * np.exp(-r / pt.rho[None])
                 - pt.C[None] / r**6)
        acc += 0.5 * float(np.sum(np.where(mask, terms, 0.0)))
        out[s] = acc
    return out


def direct_sum_reference(
    structure: Structure,
    shell_count: int,
    table: BuckinghamTable | None = None,
    k_e: float = COULOMB_CONSTANT,
) -> float:
    """Last value of :func:`direct_sum_sequence`."""
    return float(direct_sum_sequence(structure, shell_count, table, k_e)[-1])
