"""Analytic first derivatives of the Ewald energy.

Position derivatives are returned as ``dPhi/dr_t`` (the negative of the
force). Strain derivatives ``dPhi/d eps`` are returned in Voigt order
``(xx, yy, zz, yz, xz, xy)``; an off-diagonal component is the derivative
with respect to one tensor entry, so a symmetric probe ``eps_yz = eps_zy = h/2``
changes the energy by ``h * dPhi/d eps_yz``.

Under a homogeneous deformation ``I + eps`` every separation vector maps to
``(I + eps) r``, reciprocal vectors map to ``(I - eps^T) G``, the volume
grows by ``tr(eps) V`` and hence ``alpha`` changes by ``alpha'(V) V tr(eps)``.
The products ``G . r`` are invariant, so reciprocal sums only see the change
in ``|G|``, ``V`` and ``alpha``. The ``alpha_strain_terms`` switch drops the
``alpha'(V)`` contributions to reproduce the common constant-alpha
approximation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from . import lattice as lat
from .energy import (
    PI_3_2,
    SQRT_PI,
    EnergyBreakdown,
    EnergyContext,
    PairTables,
    RealGeometry,
    RecipGeometry,
    breakdown_from_geometry,
    build_context,
    dispersion_recip_kernel,
    real_geometry,
    recip_geometry,
    total_energy,
)
from .structure import BuckinghamTable, Structure

VOIGT = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))
_DIAG = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class GradientVector:
    """``dPhi/dr`` (N, 3) in eV/Å and ``dPhi/d eps`` (6,) in eV."""

    positions: np.ndarray
    strain: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.positions), self.strain])

    @classmethod
    def from_flat(cls, vec: np.ndarray) -> "GradientVector":
        vec = np.asarray(vec, dtype=float)
        return cls(positions=vec[:-6].reshape(-1, 3), strain=vec[-6:].copy())

    def __add__(self, other: "GradientVector") -> "GradientVector":
        return GradientVector(self.positions + other.positions, self.strain + other.strain)

    @property
    def size(self) -> int:
        return self.positions.size + 6


@dataclass(frozen=True)
class TermDerivative:
    energy: float
    positions: np.ndarray
    strain: np.ndarray


def voigt_to_tensor(voigt) -> np.ndarray:
    v = np.asarray(voigt, dtype=float)
    return np.array([[v[0], v[5], v[4]],
                     [v[5], v[1], v[3]],
                     [v[4], v[3], v[2]]])


def tensor_to_voigt(tensor) -> np.ndarray:
    t = np.asarray(tensor, dtype=float)
    return np.array([t[a, b] for a, b in VOIGT])


def stress_tensor(strain_derivative, vol: float) -> np.ndarray:
    """Symmetric stress ``sigma = (1/V) dPhi/d eps`` in eV/Å^3."""
    return voigt_to_tensor(strain_derivative) / vol


def alpha_strain_derivative(n_ions: int, vol: float) -> float:
    """d(alpha)/dV; the strain derivative of alpha is this times ``V delta``."""
    return lat.ewald_alpha_derivative(n_ions, vol)


def gradient_norm(g, n_ions: int | None = None) -> float:
    """Root-sum-square of all ``3N + 6`` components divided by ``3N + 6``."""
    vec = g.flat() if isinstance(g, GradientVector) else np.asarray(g, dtype=float)
    if n_ions is not None and vec.size != 3 * n_ions + 6:
        raise ValueError(f"expected {3 * n_ions + 6} components, got {vec.size}")
    return float(np.sqrt(np.dot(vec, vec)) / vec.size)


# Shared reductions ----------------------------------------------------------

def _real_reduce(coef: np.ndarray, geo: RealGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and virial of ``sum coef * |r|^2 / 2``-type pair terms.

    ``coef`` is ``(1/2) phi'(r) / r`` per summand; the pair term depends on
    ``r_i - r_j`` so ion ``t`` collects ``+`` from its row and ``-`` from its
    column.
    """
    coef = np.where(geo.mask, coef, 0.0)
    F = coef[..., None] * geo.vec
    grad = F.sum(axis=(0, 2)) - F.sum(axis=(0, 1))
    virial = np.einsum("kija,kijb->ab", F, geo.vec)
    return grad, tensor_to_voigt(virial)


def _recip_position_grad(weight_m: np.ndarray, W: np.ndarray, rg: RecipGeometry) -> np.ndarray:
    """``d/dr_t sum_m weight_m sum_ij W_ij cos(G_m . r_ij)``."""
    Wc = rg.cos @ W
    Ws = rg.sin @ W
    inner = rg.sin * Wc - rg.cos * Ws
    return -2.0 * (weight_m[:, None] * inner).T @ rg.G


def _gg_voigt(weight_m: np.ndarray, G: np.ndarray) -> np.ndarray:
    return tensor_to_voigt(np.einsum("m,ma,mb->ab", weight_m, G, G))


def _pair_form(W: np.ndarray, rg: RecipGeometry) -> np.ndarray:
    return (np.einsum("mi,ij,mj->m", rg.cos, W, rg.cos)
            + np.einsum("mi,ij,mj->m", rg.sin, W, rg.sin))


# Per-term kernels -----------------------------------------------------------

def coulomb_short_terms(pt, geo, alpha, k_e, dalpha_V, alpha_terms=True) -> TermDerivative:
    r = geo.dist
    screened = erfc(alpha * r)
    gauss = np.exp(-(alpha * r) ** 2)
    phi = pt.qq[None] * screened / r
    dphi = pt.qq[None] * (-(2.0 * alpha / SQRT_PI) * gauss / r - screened / r**2)
    energy = 0.5 * k_e * float(np.sum(np.where(geo.mask, phi, 0.0)))
    grad, strain = _real_reduce(0.5 * k_e * dphi / r, geo)
    if alpha_terms:
        dE_dalpha = 0.5 * k_e * float(np.sum(np.where(geo.mask, pt.qq[None] * gauss, 0.0)))
        strain = strain + _DIAG * (-2.0 / SQRT_PI) * dE_dalpha * dalpha_V
    return TermDerivative(energy, grad, strain)


def coulomb_long_terms(pt, rg, alpha, vol, k_e, dalpha_V, alpha_terms=True) -> TermDerivative:
    F = 2.0 * math.pi * k_e / vol * np.exp(-rg.G2 / (4.0 * alpha**2)) / rg.G2
    S = _pair_form(pt.qq, rg)
    FS = F * S
    energy = float(np.sum(FS))
    grad = _recip_position_grad(F, pt.qq, rg)
    strain = _gg_voigt(FS * (0.5 / alpha**2 + 2.0 / rg.G2), rg.G) - _DIAG * energy
    if alpha_terms:
        strain = strain + _DIAG * float(np.sum(FS * rg.G2)) / (2.0 * alpha**3) * dalpha_V
    return TermDerivative(energy, grad, strain)


def coulomb_self_terms(q, alpha, k_e, dalpha_V, alpha_terms=True) -> TermDerivative:
    qsq = float(np.sum(q * q))
    energy = -k_e * alpha / SQRT_PI * qsq
    strain = np.zeros(6)
    if alpha_terms:
        strain = _DIAG * (-k_e / SQRT_PI * qsq * dalpha_V)
    return TermDerivative(energy, np.zeros((len(q), 3)), strain)


def buckingham_short_terms(pt, geo, alpha, dalpha_V, alpha_terms=True) -> TermDerivative:
    r = geo.dist
    a2 = alpha * alpha
    x2 = a2 * r * r
    gauss = np.exp(-x2)
    rep = pt.A[None] * np.exp(-r / pt.rho[None])
    C = pt.C[None]
    disp = C * (1.0 + x2 + 0.5 * x2 * x2) * gauss / r**6
    energy = 0.5 * float(np.sum(np.where(geo.mask, rep - disp, 0.0)))
    ddisp = C * gauss / r**5 * (6.0 / r**2 + 6.0 * a2 + 3.0 * a2 * a2 * r**2 + a2**3 * r**4)
    dpsi = -rep / pt.rho[None] + ddisp
    grad, strain = _real_reduce(0.5 * dpsi / r, geo)
    if alpha_terms:
        dE_dalpha = 0.5 * alpha**5 * float(np.sum(np.where(geo.mask, C * gauss, 0.0)))
        strain = strain + _DIAG * dE_dalpha * dalpha_V
    return TermDerivative(energy, grad, strain)


def buckingham_long_terms(pt, rg, alpha, vol, dalpha_V, alpha_terms=True) -> TermDerivative:
    n = pt.C.shape[0]
    if not np.any(pt.C):
        return TermDerivative(0.0, np.zeros((n, 3)), np.zeros(6))
    G = np.sqrt(rg.G2)
    b = G / (2.0 * alpha)
    gauss = np.exp(-b * b)
    H = dispersion_recip_kernel(G, alpha)
    dH_dG = 3.0 * SQRT_PI * G**2 * erfc(b) - 6.0 * alpha * G * gauss
    D = _pair_form(pt.C, rg)
    pref = -PI_3_2 / (24.0 * vol)
    energy = pref * float(np.sum(H * D))
    grad = _recip_position_grad(pref * H, pt.C, rg)
    # d|G|/d eps_lm = -G_l G_m / |G|
    strain = _gg_voigt(-pref * D * dH_dG / G, rg.G) - _DIAG * energy
    if alpha_terms:
        strain = strain + _DIAG * pref * float(np.sum(D * 12.0 * alpha**2 * gauss)) * dalpha_V
    return TermDerivative(energy, grad, strain)


def buckingham_self_terms(pt, alpha, vol, dalpha_V, alpha_terms=True) -> TermDerivative:
    n = pt.C.shape[0]
    csum = float(np.sum(pt.C))
    ctr = float(np.trace(pt.C))
    energy = -PI_3_2 * alpha**3 / (6.0 * vol) * csum + alpha**6 / 12.0 * ctr
    dvol = PI_3_2 * alpha**3 / (6.0 * vol) * csum
    strain = _DIAG * dvol
    if alpha_terms:
        dE_dalpha = -PI_3_2 * alpha**2 / (2.0 * vol) * csum + alpha**5 / 2.0 * ctr
        strain = strain + _DIAG * dE_dalpha * dalpha_V
    return TermDerivative(energy, np.zeros((n, 3)), strain)


@dataclass(frozen=True)
class Evaluation:
    """Energy breakdown, per-term derivatives and the assembled gradient."""

    breakdown: EnergyBreakdown
    terms: dict[str, TermDerivative]
    gradient: GradientVector
    min_distance: float = float("nan")

    @property
    def energy(self) -> float:
        return self.breakdown.total


def evaluate(
    structure: Structure,
    table: BuckinghamTable | None = None,
    accuracy: float = 1e-17,
    *,
    context: EnergyContext | None = None,
    pair_tables: PairTables | None = None,
    alpha_strain_terms: bool = True,
) -> Evaluation:
    """Energy and full ``3N + 6`` gradient in one pass over the image sets."""
    if context is None:
        context = build_context(structure, accuracy)
    pt = pair_tables if pair_tables is not None else PairTables.build(structure, table)
    vol = lat.volume(structure.lattice)
    a, k_e = context.alpha, context.k_e
    dalpha_V = alpha_strain_derivative(structure.n_ions, vol) * vol
    geo = real_geometry(structure, context)
    rg = recip_geometry(structure, context)
    flag = alpha_strain_terms
    terms = {
        "coul_short": coulomb_short_terms(pt, geo, a, k_e, dalpha_V, flag),
        "coul_long": coulomb_long_terms(pt, rg, a, vol, k_e, dalpha_V, flag),
        "coul_self": coulomb_self_terms(structure.charges, a, k_e, dalpha_V, flag),
        "buck_short": buckingham_short_terms(pt, geo, a, dalpha_V, flag),
        "buck_long": buckingham_long_terms(pt, rg, a, vol, dalpha_V, flag),
        "buck_self": buckingham_self_terms(pt, a, vol, dalpha_V, flag),
    }
    breakdown = EnergyBreakdown(**{k: v.energy for k, v in terms.items()})
    positions = sum(t.positions for t in terms.values())
    strain = sum(t.strain for t in terms.values())
    dmin = float(geo.dist[geo.mask].min()) if geo.mask.any() else float("inf")
    return Evaluation(breakdown, terms, GradientVector(positions, strain), dmin)


def _sum_terms(ev: Evaluation, names) -> GradientVector:
    return GradientVector(sum(ev.terms[k].positions for k in names),
                          sum(ev.terms[k].strain for k in names))


_COUL = ("coul_short", "coul_long", "coul_self")
_BUCK = ("buck_short", "buck_long", "buck_self")


def coulomb_forces(structure: Structure, context: EnergyContext) -> np.ndarray:
    """``dPhi_Coul/dr_t`` for every ion, shape (N, 3); negate for forces."""
    return _sum_terms(evaluate(structure, None, context=context), _COUL).positions


def buckingham_forces(structure: Structure, context: EnergyContext,
                      table: BuckinghamTable) -> np.ndarray:
    return _sum_terms(evaluate(structure, table, context=context), _BUCK).positions


def coulomb_stress(structure: Structure, context: EnergyContext, *,
                   alpha_strain_terms: bool = True) -> np.ndarray:
    """Voigt ``dPhi_Coul/d eps`` in eV; divide by V for stress."""
    ev = evaluate(structure, None, context=context, alpha_strain_terms=alpha_strain_terms)
    return _sum_terms(ev, _COUL).strain


def buckingham_stress(structure: Structure, context: EnergyContext, table: BuckinghamTable,
                      *, alpha_strain_terms: bool = True) -> np.ndarray:
    ev = evaluate(structure, table, context=context, alpha_strain_terms=alpha_strain_terms)
    return _sum_terms(ev, _BUCK).strain


def assemble_gradient(structure: Structure, context: EnergyContext, table: BuckinghamTable | None,
                      *, alpha_strain_terms: bool = True) -> GradientVector:
    return evaluate(structure, table, context=context,
                    alpha_strain_terms=alpha_strain_terms).gradient


# Finite-difference oracle ---------------------------------------------------

def strain_probe(structure: Structure, component: int, h: float) -> Structure:
    """Deform cell and ions by ``I + h E`` with ``E`` the symmetric Voigt unit."""
    a, b = VOIGT[component]
    E = np.zeros((3, 3))
    if a == b:
        E[a, a] = 1.0
    else:
        E[a, b] = E[b, a] = 0.5
    D = np.eye(3) + h * E
    return structure.with_geometry(lattice=structure.lattice @ D.T,
                                   positions=structure.positions @ D.T)


def finite_difference_gradient(
    structure: Structure,
    table: BuckinghamTable | None = None,
    h: float = 1e-5,
    h_strain: float = 1e-6,
    accuracy: float = 1e-17,
    *,
    term: str | None = None,
    one_sided: bool = False,
) -> GradientVector:
    """Central (or forward) differences of the energy, or of a single term.

    Every probe recomputes alpha and the cutoffs from its own volume, but
    keeps the image triplets of the unperturbed cell so that a probe never
    straddles a change in the image set.
    """
    base = build_context(structure, accuracy)
    pt = PairTables.build(structure, table)

    def energy(s: Structure) -> float:
        vol = lat.volume(s.lattice)
        split = lat.ewald_split(s.n_ions, vol, accuracy)
        ctx = EnergyContext(split=split, real_images=base.real_images,
                            recip_images=base.recip_images, lattice=np.array(s.lattice),
                            k_e=base.k_e)
        geo = real_geometry(s, ctx)
        rg = recip_geometry(s, ctx)
        bd = breakdown_from_geometry(pt, geo, rg, s.charges, ctx, vol)
        return bd.total if term is None else getattr(bd, term)

    e0 = energy(structure) if one_sided else 0.0
    pos = np.array(structure.positions)
    dpos = np.zeros_like(pos)
    for t in range(len(pos)):
        for x in range(3):
            plus = pos.copy()
            plus[t, x] += h
            e_plus = energy(structure.with_geometry(positions=plus))
            if one_sided:
                dpos[t, x] = (e_plus - e0) / h
            else:
                minus = pos.copy()
                minus[t, x] -= h
                dpos[t, x] = (e_plus - energy(structure.with_geometry(positions=minus))) / (2 * h)
    dstrain = np.zeros(6)
    for k in range(6):
        e_plus = energy(strain_probe(structure, k, h_strain))
        if one_sided:
            dstrain[k] = (e_plus - e0) / h_strain
        else:
            e_minus = energy(strain_probe(structure, k, -h_strain))
            dstrain[k] = (e_plus - e_minus) / (2 * h_strain)
    return GradientVector(dpos, dstrain)


def gradient_mismatch(analytic, numeric, rel_tol: float = 1e-4, abs_floor: float = 1e-8):
    """Worst-case mismatch ratio against ``max(rel_tol |numeric|, abs_floor)``.

    A ratio <= 1 means every component agrees within tolerance. Components
    whose magnitude falls below ``abs_floor / rel_tol`` are effectively
    compared absolutely.
    """
    a = analytic.flat() if isinstance(analytic, GradientVector) else np.asarray(analytic)
    n = numeric.flat() if isinstance(numeric, GradientVector) else np.asarray(numeric)
    allowed = np.maximum(rel_tol * np.abs(n), abs_floor)
    ratio = np.abs(a - n) / allowed
    return float(ratio.max()), int(np.argmax(ratio))
