"""Multi-patch isogeometric neural solver.

NURBS patches, boundary- and interface-conforming network ansatz, energy
training for scalar Poisson/magnetostatics and hyperelastic contact.
"""
from pathlib import Path

__version__ = "0.1.0"

CASES_DIR = Path(__file__).with_name("cases")


def case_path(name: str) -> Path:
    """Path of a shipped geometry or configuration file, e.g. ``"lshape.json"``."""
    p = CASES_DIR / name
    if not p.is_file():
        raise FileNotFoundError(f"no shipped case {name!r}")
    return p
