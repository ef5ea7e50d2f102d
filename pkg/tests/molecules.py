"""STO-3G FCIDUMP fixtures for the molecular acceptance runs.

The runs read ``tests/data/molecules/<name>_<bond>.fcidump`` with
``parse_fcidump`` and take full-CI references from ``references.json``.
pyscf is needed only to (re)build those files:

    uv run --extra chemistry python tests/molecules.py
"""

import json
import logging
import sys
from pathlib import Path

import pytest

from ptvqe.integrals import IntegralSet, parse_fcidump

logger = logging.getLogger(__name__)

MOLECULES = Path(__file__).parent / "data" / "molecules"
REFERENCES = MOLECULES / "references.json"

ATOMS = {"hf": ("H", "F"), "n2": ("N", "N"), "f2": ("F", "F")}
HF_BONDS = [0.7, 0.9, 1.1, 1.3, 1.5, 1.8, 2.1, 2.5]
N2_BONDS = [0.9, 1.0, 1.1, 1.2, 1.4, 1.6, 1.9, 2.2]
F2_BONDS = [1.2, 1.4, 1.6, 1.8, 2.0, 2.2]
BONDS = {"hf": HF_BONDS, "n2": N2_BONDS, "f2": F2_BONDS}


def fixture_name(molecule: str, bond_length: float) -> str:
    return f"{molecule}_{bond_length:.2f}.fcidump"


def fixture_path(molecule: str, bond_length: float) -> Path:
    """Committed FCIDUMP for one geometry; skips the calling test when it is absent."""
    path = MOLECULES / fixture_name(molecule, bond_length)
    if not path.is_file() or not REFERENCES.is_file():
        pytest.skip(f"{path.name} is missing; build it with `python tests/molecules.py`")
    return path


def load(molecule: str, bond_length: float) -> tuple[Path, IntegralSet, float]:
    """(path, integrals, full-CI energy) of one committed geometry."""
    path = fixture_path(molecule, bond_length)
    references = json.loads(REFERENCES.read_text())
    return path, parse_fcidump(path.read_text()), float(references[path.name])


def regenerate(molecules=tuple(ATOMS)) -> Path:
    from pyscf import fci, gto, scf
    from pyscf.tools import fcidump

    MOLECULES.mkdir(parents=True, exist_ok=True)
    references = json.loads(REFERENCES.read_text()) if REFERENCES.is_file() else {}
    for molecule in molecules:
        first, second = ATOMS[molecule]
        for bond_length in BONDS[molecule]:
            structure = gto.M(atom=f"{first} 0 0 0; {second} 0 0 {bond_length}", basis="sto-3g", verbose=0)
            mean_field = scf.RHF(structure).run()
            name = fixture_name(molecule, bond_length)
            fcidump.from_scf(mean_field, str(MOLECULES / name))
            references[name] = float(fci.FCI(mean_field).kernel()[0])
            logger.info("Wrote fixture", extra={"fixture": name, "e_fci": references[name]})
    REFERENCES.write_text(json.dumps(references, indent=2, sort_keys=True) + "\n")
    return REFERENCES


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    regenerate(sys.argv[1:] or tuple(ATOMS))
