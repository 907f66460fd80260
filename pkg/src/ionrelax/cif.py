"""Reading and writing a small subset of CIF.

Supported: ``_cell_length_*`` and ``_cell_angle_*`` items, an ``_atom_site``
loop with fractional coordinates, and an optional ``_atom_type`` loop whose
``_atom_type_oxidation_number`` column supplies ionic charges.
"""

from __future__ import annotations

import math
import re
import shlex
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import lattice as lat
from .structure import Structure


class CifError(ValueError):
    """Malformed or incomplete CIF input."""

    def __init__(self, message: str, line: int | None = None, source: str = "<cif>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


_CELL_TAGS = ("_cell_length_a", "_cell_length_b", "_cell_length_c",
              "_cell_angle_alpha", "_cell_angle_beta", "_cell_angle_gamma")
_NUMBER = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)(?:\(\d+\))?$")
_SYMBOL = re.compile(r"^([A-Z][a-z]?)(\d*)([+-]?)$")


@dataclass
class CifDocument:
    """Cell parameters (Å, degrees) and ion sites in fractional coordinates."""

    cell: tuple[float, float, float, float, float, float]
    labels: list[str]
    species: list[str]
    fractional: np.ndarray
    charges: dict[str, float]
    name: str = ""

    def lattice(self) -> np.ndarray:
        return cell_to_lattice(*self.cell)


def cell_to_lattice(a, b, c, alpha, beta, gamma) -> np.ndarray:
    """Lattice rows in standard orientation: ``a`` along x, ``b`` in the xy plane."""
    al, be, ga = (math.radians(x) for x in (alpha, beta, gamma))
    cos_a, cos_b, cos_g = math.cos(al), math.cos(be), math.cos(ga)
    sin_g = math.sin(ga)
    cx = c * cos_b
    cy = c * (cos_a - cos_b * cos_g) / sin_g
    cz2 = c * c - cx * cx - cy * cy
    if not cz2 > 0 or not sin_g > 0:
        raise lat.DegenerateCellError("cell parameters do not describe a 3D cell")
    return np.array([[a, 0.0, 0.0],
                     [b * cos_g, b * sin_g, 0.0],
                     [cx, cy, math.sqrt(cz2)]])


def lattice_to_cell(lattice) -> tuple[float, float, float, float, float, float]:
    L = lat.as_lattice(lattice)
    a, b, c = (float(np.linalg.norm(v)) for v in L)

    def angle(u, v):
        cosv = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
        return math.degrees(math.acos(max(-1.0, min(1.0, cosv))))

    return a, b, c, angle(L[1], L[2]), angle(L[0], L[2]), angle(L[0], L[1])


def _number(token: str, line: int, source: str) -> float:
    m = _NUMBER.match(token)
    if not m:
        raise CifError(f"expected a number, got {token!r}", line, source)
    return float(m.group(1))


def _split(text: str, line: int, source: str) -> list[str]:
    lex = shlex.shlex(text, posix=True)
    lex.whitespace_split = True
    lex.commenters = "#"
    lex.escape = ""
    try:
        return list(lex)
    except ValueError as exc:
        raise CifError(str(exc), line, source) from None


def _species_from(label: str) -> tuple[str, float | None]:
    """Element and optional charge from labels like ``Sr1``, ``O2-`` or ``Ti4+``."""
    m = _SYMBOL.match(label)
    if m and m.group(3):
        value = float(m.group(2) or 1)
        return m.group(1), value if m.group(3) == "+" else -value
    m = re.match(r"^([A-Z][a-z]?)", label)
    return (m.group(1) if m else label), None


def parse_cif(text: str, source: str = "<cif>") -> CifDocument:
    items: dict[str, tuple[str, int]] = {}
    loops: list[tuple[list[str], list[tuple[list[str], int]]]] = []
    name = ""
    lines = text.splitlines()
    k = 0
    while k < len(lines):
        lineno = k + 1
        tokens = _split(lines[k], lineno, source)
        k += 1
        if not tokens:
            continue
        head = tokens[0]
        low = head.lower()
        if low.startswith("data_"):
            name = head[5:]
        elif low == "loop_":
            tags: list[str] = []
            rows: list[tuple[list[str], int]] = []
            while k < len(lines):
                toks = _split(lines[k], k + 1, source)
                if toks and toks[0].startswith("_") and not rows:
                    tags.append(toks[0].lower())
                    k += 1
                    continue
                if not toks:
                    k += 1
                    if rows:
                        break
                    continue
                if toks[0].startswith("_") or toks[0].lower() in ("loop_",) \
                        or toks[0].lower().startswith("data_"):
                    break
                rows.append((toks, k + 1))
                k += 1
            if not tags:
                raise CifError("loop_ without tags", lineno, source)
            for toks, ln in rows:
                if len(toks) != len(tags):
                    raise CifError(f"loop row has {len(toks)} values, expected {len(tags)}",
                                   ln, source)
            loops.append((tags, rows))
        elif head.startswith("_"):
            if len(tokens) < 2:
                nxt = lines[k].lstrip().lower() if k < len(lines) else ""
                if nxt and not nxt.startswith(("_", "loop_", "data_")):
                    tokens = tokens + _split(lines[k], k + 1, source)
                    k += 1
                else:
                    raise CifError(f"tag {head} has no value", lineno, source)
            items[low] = (tokens[1], lineno)
        else:
            raise CifError(f"unexpected token {head!r}", lineno, source)

    cell = []
    for tag in _CELL_TAGS:
        if tag not in items:
            raise CifError(f"missing {tag}", None, source)
        value, ln = items[tag]
        cell.append(_number(value, ln, source))
    if min(cell[:3]) <= 0:
        raise CifError("cell lengths must be positive", items[_CELL_TAGS[0]][1], source)

    site = next((lp for lp in loops if "_atom_site_fract_x" in lp[0]), None)
    if site is None:
        raise CifError("no _atom_site loop with fractional coordinates", None, source)
    tags, rows = site
    for tag in ("_atom_site_fract_y", "_atom_site_fract_z"):
        if tag not in tags:
            raise CifError(f"atom_site loop lacks {tag}", None, source)
    if not rows:
        raise CifError("atom_site loop has no rows", None, source)
    ix, iy, iz = (tags.index(f"_atom_site_fract_{a}") for a in "xyz")
    i_type = tags.index("_atom_site_type_symbol") if "_atom_site_type_symbol" in tags else None
    i_label = tags.index("_atom_site_label") if "_atom_site_label" in tags else None
    if i_type is None and i_label is None:
        raise CifError("atom_site loop needs _atom_site_type_symbol or _atom_site_label",
                       None, source)
    labels, species, frac = [], [], []
    charges: dict[str, float] = {}
    for k_row, (toks, ln) in enumerate(rows):
        sym = toks[i_type] if i_type is not None else toks[i_label]
        element, q = _species_from(sym)
        if q is not None:
            charges.setdefault(element, q)
        species.append(element)
        labels.append(toks[i_label] if i_label is not None else f"{element}{k_row + 1}")
        frac.append([_number(toks[i], ln, source) for i in (ix, iy, iz)])

    types = next((lp for lp in loops if "_atom_type_oxidation_number" in lp[0]), None)
    if types is not None:
        ttags, trows = types
        if "_atom_type_symbol" not in ttags:
            raise CifError("atom_type loop lacks _atom_type_symbol", None, source)
        i_sym = ttags.index("_atom_type_symbol")
        i_ox = ttags.index("_atom_type_oxidation_number")
        for toks, ln in trows:
            element, _ = _species_from(toks[i_sym])
            charges[element] = _number(toks[i_ox], ln, source)
    return CifDocument(cell=tuple(cell), labels=labels, species=species,
                       fractional=np.array(frac, dtype=float), charges=charges, name=name)


def read_structure(path, charges: Mapping[str, float] | None = None) -> Structure:
    """Structure from a CIF file; ``charges`` overrides any charges in the file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"could not read {path}: {exc.strerror or exc}") from exc
    doc = parse_cif(text, source=str(path))
    qmap = dict(doc.charges)
    if charges:
        qmap.update({str(k): float(v) for k, v in charges.items()})
    missing = sorted(set(doc.species) - set(qmap))
    if missing:
        raise CifError(f"no charge known for species {missing}; pass a charge map", None,
                       str(path))
    L = doc.lattice()
    return Structure(L, doc.fractional @ L, [qmap[s] for s in doc.species],
                     tuple(doc.species), label=doc.name or path.stem)


def wrap_fractional(frac) -> np.ndarray:
    f = np.asarray(frac, dtype=float)
    w = f - np.floor(f)
    w[w >= 1.0] = 0.0
    return w


def format_structure(structure: Structure, name: str | None = None) -> str:
    """CIF text with cell parameters, wrapped fractional coordinates and charges."""
    a, b, c, al, be, ga = lattice_to_cell(structure.lattice)
    frac = wrap_fractional(structure.fractional())
    block = re.sub(r"\s+", "_", name or structure.label or "structure")
    out = [f"data_{block}"]
    for tag, value in zip(_CELL_TAGS, (a, b, c, al, be, ga)):
        out.append(f"{tag} {float(value)!r}")
    out.append("_symmetry_space_group_name_H-M 'P 1'")
    out.append("")
    charges: dict[str, float] = {}
    for s, q in zip(structure.species, structure.charges):
        charges.setdefault(s, float(q))
    out += ["loop_", "_atom_type_symbol", "_atom_type_oxidation_number"]
    out += [f"{s} {float(q)!r}" for s, q in charges.items()]
    out.append("")
    out += ["loop_", "_atom_site_label", "_atom_site_type_symbol",
            "_atom_site_fract_x", "_atom_site_fract_y", "_atom_site_fract_z"]
    for k, (s, f) in enumerate(zip(structure.species, frac), start=1):
        out.append(f"{s}{k} {s} {float(f[0])!r} {float(f[1])!r} {float(f[2])!r}")
    return "\n".join(out) + "\n"


def write_structure(structure: Structure, path, name: str | None = None) -> Path:
    path = Path(path)
    try:
        path.write_text(format_structure(structure, name))
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc.strerror or exc}") from exc
    return path
