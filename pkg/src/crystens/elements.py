"""Periodic-table symbol lookup for atomic numbers 1..118."""

from __future__ import annotations

from .errors import DataError

SYMBOLS = (
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne",
    "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca",
    "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr",
    "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb",
    "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg",
    "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm",
    "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds",
    "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og",
)

MAX_Z = len(SYMBOLS)

_Z_OF = {sym: z for z, sym in enumerate(SYMBOLS, start=1)}


def normalize_symbol(raw: str) -> str:
    """Strip oxidation-state suffixes and fix case: ``"FE2+"`` -> ``"Fe"``."""
    letters = ""
    for ch in raw.strip():
        if ch.isalpha():
            letters += ch
        else:
            break
    if not letters:
        raise DataError(f"cannot read an element symbol from {raw!r}")
    return letters[0].upper() + letters[1:].lower()


def atomic_number(species: "str | int | float") -> int:
    """Resolve an element symbol or a raw atomic number to Z in 1..118."""
    if isinstance(species, str):
        sym = normalize_symbol(species)
        try:
            return _Z_OF[sym]
        except KeyError:
            raise DataError(f"unknown element symbol {species!r}") from None
    z = int(species)
    if z != species or not 1 <= z <= MAX_Z:
        raise DataError(f"atomic number must be an integer in 1..{MAX_Z}, got {species!r}")
    return z


def symbol(z: int) -> str:
    """Element symbol for atomic number ``z``."""
    if not 1 <= z <= MAX_Z:
        raise DataError(f"atomic number must be in 1..{MAX_Z}, got {z}")
    return SYMBOLS[z - 1]
