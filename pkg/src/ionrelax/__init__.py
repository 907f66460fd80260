"""Ewald-summed Coulomb and Buckingham energies, analytic gradients and
first-order relaxation of periodic ionic structures."""

__version__ = "0.1.0"

from .structure import BuckinghamTable, Structure  # noqa: E402,F401
