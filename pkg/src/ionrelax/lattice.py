"""Unit-cell geometry and periodic image enumeration.

Lattice matrices hold the lattice vectors as rows, ``lattice[i] == l_{i+1}``.
Every module in the package shares this convention.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np


class DegenerateCellError(ValueError):
    """Raised when a cell has a non-positive or non-finite volume."""


class CutoffWarning(UserWarning):
    """The cutoff sphere does not contain a whole unit cell."""


@dataclass(frozen=True)
class EwaldSplit:
    """Splitting parameter and the real/reciprocal cutoffs derived from it."""

    alpha: float
    accuracy: float
    r_off_real: float
    r_off_recip: float


def as_lattice(lattice) -> np.ndarray:
    lat = np.asarray(lattice, dtype=float)
    if lat.shape != (3, 3):
        raise ValueError(f"lattice must be 3x3, got shape {lat.shape}")
    return lat


def _cross(u, v) -> np.ndarray:
    return np.array([u[1] * v[2] - u[2] * v[1],
                     u[2] * v[0] - u[0] * v[2],
                     u[0] * v[1] - u[1] * v[0]])


def volume(lattice) -> float:
    """Signed cell volume ``det(L^T)``; must be positive."""
    lat = as_lattice(lattice)
    vol = float(np.linalg.det(lat))
    if not math.isfinite(vol) or vol <= 0.0:
        raise DegenerateCellError(f"cell volume {vol!r} is not positive")
    lengths = np.linalg.norm(lat, axis=1)
    if not np.all(np.isfinite(lengths)) or np.any(lengths == 0.0):
        raise DegenerateCellError("lattice vectors must have finite, nonzero length")
    return vol


def reciprocal(lattice) -> np.ndarray:
    """Reciprocal vectors as rows, ``k_i . l_j = 2 pi delta_ij``."""
    lat = as_lattice(lattice)
    vol = volume(lat)
    rec = np.empty((3, 3))
    for t in range(3):
        cross = _cross(lat[(t + 1) % 3], lat[(t + 2) % 3])
        rec[t] = 2.0 * math.pi * cross / vol
    return rec


def ewald_alpha(n_ions: int, vol: float) -> float:
    """Splitting parameter ``N^(1/6) sqrt(pi) / V^(1/3)``."""
    if n_ions < 1:
        raise ValueError("n_ions must be >= 1")
    if not vol > 0.0:
        raise ValueError("volume must be positive")
    return n_ions ** (1.0 / 6.0) * math.sqrt(math.pi) / vol ** (1.0 / 3.0)


def ewald_alpha_derivative(n_ions: int, vol: float) -> float:
    """d(alpha)/dV, equal to ``-alpha / (3 V)``."""
    if not vol > 0.0:
        raise ValueError("volume must be positive")
    return -(n_ions ** (1.0 / 6.0)) * math.sqrt(math.pi) / (3.0 * vol ** (4.0 / 3.0))


def cutoffs(alpha: float, accuracy: float) -> tuple[float, float]:
    """Real- and reciprocal-space cutoffs for a target accuracy ``0 < A < 1``."""
    if not 0.0 < accuracy < 1.0:
        raise ValueError(f"accuracy must lie in (0, 1), got {accuracy!r}")
    if not alpha > 0.0:
        raise ValueError("alpha must be positive")
    root = math.sqrt(-math.log(accuracy))
    return root / alpha, 2.0 * alpha * root


def ewald_split(n_ions: int, vol: float, accuracy: float, alpha: float | None = None) -> EwaldSplit:
    if alpha is None:
        alpha = ewald_alpha(n_ions, vol)
    r_real, r_recip = cutoffs(alpha, accuracy)
    return EwaldSplit(alpha=alpha, accuracy=accuracy, r_off_real=r_real, r_off_recip=r_recip)


def layer_counts(lattice, r_off: float, *, strict: bool = False) -> tuple[int, int, int]:
    """Number of image layers per axis that fit in the inflated cell.

    Axis ``i`` is bounded by the pair of faces spanned by the other two
    vectors; its layer height is ``V / |l_{i+1} x l_{i+2}|``.
    """
    lat = as_lattice(lattice)
    vol = volume(lat)
    counts = []
    for i in range(3):
        normal = _cross(lat[(i + 1) % 3], lat[(i + 2) % 3])
        height = vol / float(np.linalg.norm(normal))
        counts.append(math.ceil((r_off - height / 2.0) / height))
    if r_off < float(np.max(np.linalg.norm(lat, axis=1))) or min(counts) < 1:
        msg = (
            f"cutoff {r_off:.6g} is shorter than the longest cell vector; "
            "clamping image layers to at least 1"
        )
        if strict:
            raise ValueError(msg)
        warnings.warn(msg, CutoffWarning, stacklevel=2)
    return tuple(max(1, c) for c in counts)


def inflated_cell_truncation(lattice, r_off: float, *, strict: bool = False) -> np.ndarray:
    """Integer image triplets inside the inflated cell, origin excluded.

    Returns an ``(K, 3)`` integer array in lexicographic order, with
    ``K = (2 t0 + 1)(2 t1 + 1)(2 t2 + 1) - 1``.
    """
    t = layer_counts(lattice, r_off, strict=strict)
    return _box_triplets(t)


def _box_triplets(t) -> np.ndarray:
    axes = [range(-ti, ti + 1) for ti in t]
    trip = [n for n in itertools.product(*axes) if n != (0, 0, 0)]
    return np.array(trip, dtype=np.int64).reshape(-1, 3)


def translations(triplets: np.ndarray, lattice) -> np.ndarray:
    """Cartesian lattice translations ``n^T L`` for each triplet."""
    return np.asarray(triplets, dtype=float) @ as_lattice(lattice)
