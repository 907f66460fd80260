"""Compiled single-pass energy and gradient kernel.

Evaluates exactly the same image sets and formulas as :mod:`ionrelax.derivatives`
in one loop, which removes the per-call array overhead that dominates
small cells. The numpy implementation stays the reference; the test suite
checks the two agree.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from . import lattice as lat
from .energy import COULOMB_CONSTANT

_SQRT_PI = math.sqrt(math.pi)
_PI_3_2 = math.pi ** 1.5
_VA = (0, 1, 2, 1, 0, 0)
_VB = (0, 1, 2, 2, 2, 1)


@njit(cache=True)
def _voigt_add(out, w, x, y):
    out[0] += w * x[0] * y[0]
    out[1] += w * x[1] * y[1]
    out[2] += w * x[2] * y[2]
    out[3] += w * x[1] * y[2]
    out[4] += w * x[0] * y[2]
    out[5] += w * x[0] * y[1]


@njit(cache=True)
def ewald_kernel(positions, charges, A, rho, C, shifts, G, alpha, vol, k_e, dalpha_V,
                 alpha_terms):
    """Return (six term energies, dPhi/dr (N,3), dPhi/d eps (6,), min separation).

    ``shifts`` holds the real-space translations with the zero vector first.
    """
    n = positions.shape[0]
    terms = np.zeros(6)
    grad = np.zeros((n, 3))
    strain = np.zeros(6)
    a = alpha
    a2 = a * a
    two_a_sqpi = 2.0 * a / _SQRT_PI
    dEa_cs = 0.0
    dEa_bs = 0.0
    dmin = np.inf
    vec = np.empty(3)
    has_disp = False
    for i in range(n):
        for j in range(n):
            if C[i, j] != 0.0:
                has_disp = True

    # real space
    for k in range(shifts.shape[0]):
        for i in range(n):
            for j in range(n):
                if k == 0 and i == j:
                    continue
                vec[0] = positions[i, 0] - positions[j, 0] + shifts[k, 0]
                vec[1] = positions[i, 1] - positions[j, 1] + shifts[k, 1]
                vec[2] = positions[i, 2] - positions[j, 2] + shifts[k, 2]
                r2 = vec[0] * vec[0] + vec[1] * vec[1] + vec[2] * vec[2]
                r = math.sqrt(r2)
                if r < dmin:
                    dmin = r
                qq = charges[i] * charges[j]
                x2 = a2 * r2
                gauss = math.exp(-x2)
                screened = math.erfc(a * r)
                terms[0] += 0.5 * k_e * qq * screened / r
                coef = 0.5 * k_e * qq * (-two_a_sqpi * gauss / r - screened / r2) / r
                dEa_cs += 0.5 * k_e * qq * gauss
                Aij = A[i, j]
                Cij = C[i, j]
                if Aij != 0.0 or Cij != 0.0:
                    rep = Aij * math.exp(-r / rho[i, j])
                    r6 = r2 * r2 * r2
                    disp = Cij * (1.0 + x2 + 0.5 * x2 * x2) * gauss / r6
                    terms[3] += 0.5 * (rep - disp)
                    ddisp = Cij * gauss / (r6 / r) * (
                        6.0 / r2 + 6.0 * a2 + 3.0 * a2 * a2 * r2 + a2 * a2 * a2 * r2 * r2)
                    coef += 0.5 * (-rep / rho[i, j] + ddisp) / r
                    dEa_bs += 0.5 * a2 * a2 * a * Cij * gauss
                for x in range(3):
                    f = coef * vec[x]
                    grad[i, x] += f
                    grad[j, x] -= f
                _voigt_add(strain, coef, vec, vec)

    # reciprocal space
    cs = np.empty(n)
    sn = np.empty(n)
    cC = np.empty(n)
    sC = np.empty(n)
    four_a2 = 4.0 * a2
    pref_c = 2.0 * math.pi * k_e / vol
    pref_d = -_PI_3_2 / (24.0 * vol)
    long_c_strain = np.zeros(6)
    long_d_strain = np.zeros(6)
    sum_fs_g2 = 0.0
    sum_d_gauss = 0.0
    for m in range(G.shape[0]):
        gx = G[m, 0]
        gy = G[m, 1]
        gz = G[m, 2]
        g2 = gx * gx + gy * gy + gz * gz
        Sc = 0.0
        Ss = 0.0
        for t in range(n):
            ph = gx * positions[t, 0] + gy * positions[t, 1] + gz * positions[t, 2]
            cs[t] = math.cos(ph)
            sn[t] = math.sin(ph)
            Sc += charges[t] * cs[t]
            Ss += charges[t] * sn[t]
        F = pref_c * math.exp(-g2 / four_a2) / g2
        FS = F * (Sc * Sc + Ss * Ss)
        terms[1] += FS
        sum_fs_g2 += FS * g2
        w = FS * (0.5 / a2 + 2.0 / g2)
        long_c_strain[0] += w * gx * gx
        long_c_strain[1] += w * gy * gy
        long_c_strain[2] += w * gz * gz
        long_c_strain[3] += w * gy * gz
        long_c_strain[4] += w * gx * gz
        long_c_strain[5] += w * gx * gy
        for t in range(n):
            inner = -2.0 * F * charges[t] * (sn[t] * Sc - cs[t] * Ss)
            grad[t, 0] += inner * gx
            grad[t, 1] += inner * gy
            grad[t, 2] += inner * gz
        if has_disp:
            D = 0.0
            for t in range(n):
                cc = 0.0
                ss = 0.0
                for i in range(n):
                    cc += cs[i] * C[i, t]
                    ss += sn[i] * C[i, t]
                cC[t] = cc
                sC[t] = ss
                D += cs[t] * cc + sn[t] * ss
            g = math.sqrt(g2)
            b = g / (2.0 * a)
            gb = math.exp(-b * b)
            eb = math.erfc(b)
            H = _SQRT_PI * g2 * g * eb + (4.0 * a2 * a - 2.0 * a * g2) * gb
            dH = 3.0 * _SQRT_PI * g2 * eb - 6.0 * a * g * gb
            terms[4] += pref_d * H * D
            sum_d_gauss += D * gb
            w = -pref_d * D * dH / g
            long_d_strain[0] += w * gx * gx
            long_d_strain[1] += w * gy * gy
            long_d_strain[2] += w * gz * gz
            long_d_strain[3] += w * gy * gz
            long_d_strain[4] += w * gx * gz
            long_d_strain[5] += w * gx * gy
            for t in range(n):
                inner = -2.0 * pref_d * H * (sn[t] * cC[t] - cs[t] * sC[t])
                grad[t, 0] += inner * gx
                grad[t, 1] += inner * gy
                grad[t, 2] += inner * gz

    # self terms
    qsq = 0.0
    for t in range(n):
        qsq += charges[t] * charges[t]
    csum = 0.0
    ctr = 0.0
    for i in range(n):
        ctr += C[i, i]
        for j in range(n):
            csum += C[i, j]
    terms[2] = -k_e * a / _SQRT_PI * qsq
    terms[5] = -_PI_3_2 * a2 * a / (6.0 * vol) * csum + a2 * a2 * a2 / 12.0 * ctr

    diag = -terms[1] - terms[4] + _PI_3_2 * a2 * a / (6.0 * vol) * csum
    if alpha_terms:
        diag += (-2.0 / _SQRT_PI) * dEa_cs * dalpha_V
        diag += sum_fs_g2 / (2.0 * a2 * a) * dalpha_V
        diag += -k_e / _SQRT_PI * qsq * dalpha_V
        diag += dEa_bs * dalpha_V
        if has_disp:
            diag += pref_d * 12.0 * a2 * sum_d_gauss * dalpha_V
        diag += (-_PI_3_2 * a2 / (2.0 * vol) * csum + a2 * a2 * a / 2.0 * ctr) * dalpha_V
    for v in range(6):
        strain[v] += long_c_strain[v] + long_d_strain[v]
    for v in range(3):
        strain[v] += diag
    return terms, grad, strain, dmin


_TRIPLETS: dict = {}


def _triplets(counts):
    t = _TRIPLETS.get(counts)
    if t is None:
        t = lat._box_triplets(counts)
        _TRIPLETS[counts] = t
    return t


def _cell_layers(lattice, n, accuracy):
    """Volume, reciprocal rows, split and both layer counts in one pass.

    Face heights of the lattice are ``V / |l_j x l_k|`` and those of the
    reciprocal lattice are ``2 pi / |l_i|``. Cells that need clamping fall
    back to :func:`ionrelax.lattice.layer_counts` so the warning is the same.
    """
    L = np.asarray(lattice, dtype=float)
    crosses = np.cross(np.roll(L, -1, axis=0), np.roll(L, -2, axis=0))
    vol = float(L[0] @ crosses[0])
    if not math.isfinite(vol) or vol <= 0.0:
        lat.volume(L)
    rec = (2.0 * math.pi / vol) * crosses
    split = lat.ewald_split(n, vol, accuracy)
    lengths = np.sqrt(np.einsum("ij,ij->i", L, L))
    h_real = vol / np.sqrt(np.einsum("ij,ij->i", crosses, crosses))
    h_recip = 2.0 * math.pi / lengths
    counts = []
    for heights, r_off, basis in ((h_real, split.r_off_real, L),
                                  (h_recip, split.r_off_recip, rec)):
        t = tuple(int(math.ceil((r_off - h / 2.0) / h)) for h in heights)
        longest = float(np.max(np.sqrt(np.einsum("ij,ij->i", basis, basis))))
        if min(t) < 1 or r_off < longest:
            t = lat.layer_counts(basis, r_off)
        counts.append(t)
    return vol, rec, split, counts[0], counts[1]


def fast_evaluate(lattice, positions, charges, A, rho, C, accuracy=1e-17,
                  k_e=COULOMB_CONSTANT, alpha_terms=True):
    """Energy terms, flat ``3N + 6`` gradient and minimum separation.

    Builds alpha, cutoffs and both image sets from ``lattice`` the same way
    :func:`ionrelax.energy.build_context` does.
    """
    n = len(positions)
    vol, rec, split, t_real, t_recip = _cell_layers(lattice, n, accuracy)
    real_t = _triplets(t_real)
    recip_t = _triplets(t_recip)
    shifts = np.vstack([np.zeros((1, 3)), real_t @ lattice])
    G = recip_t @ rec
    dalpha_V = -split.alpha / 3.0
    terms, grad, strain, dmin = ewald_kernel(
        np.ascontiguousarray(positions, dtype=float), np.ascontiguousarray(charges, dtype=float),
        A, rho, C, shifts, G, split.alpha, vol, k_e, dalpha_V, bool(alpha_terms))
    return terms, np.concatenate([grad.ravel(), strain]), dmin
