from pathlib import Path

import numpy as np
import pytest

from ptvqe.fermion import sector_basis
from ptvqe.integrals import IntegralSet, parse_fcidump, partition_orbitals
from ptvqe.qsim import Statevector

DATA = Path(__file__).parent / "data"

EIGHT_FOLD = (
    (0, 1, 2, 3),
    (1, 0, 2, 3),
    (0, 1, 3, 2),
    (1, 0, 3, 2),
    (2, 3, 0, 1),
    (3, 2, 0, 1),
    (2, 3, 1, 0),
    (3, 2, 1, 0),
)


def random_integrals(n_orbitals: int, n_electrons: int, seed: int = 7, coupling: float = 0.05) -> IntegralSet:
    """Molecule-like integrals: ordered orbital energies, Coulomb diagonal, weak random coupling."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=(n_orbitals, n_orbitals))
    h1 = np.diag(np.linspace(-2.0, 1.0, n_orbitals)) + coupling * (noise + noise.T) / 2
    raw = rng.normal(size=(n_orbitals,) * 4)
    h2 = coupling * sum(raw.transpose(axes) for axes in EIGHT_FOLD) / len(EIGHT_FOLD)
    for p in range(n_orbitals):
        for q in range(n_orbitals):
            h2[p, p, q, q] += 0.3
    return IntegralSet(n_orbitals=n_orbitals, n_electrons=n_electrons, h1=h1, h2=h2, core=0.5)


def random_sector_state(n_qubits: int, n_electrons: int, seed: int = 11, complex_valued: bool = False) -> Statevector:
    rng = np.random.default_rng(seed)
    sector = sector_basis(n_qubits, n_electrons)
    values = rng.normal(size=sector.size)
    if complex_valued:
        values = values + 1j * rng.normal(size=sector.size)
    amplitudes = np.zeros(1 << n_qubits, dtype=complex)
    amplitudes[sector] = values / np.linalg.norm(values)
    return Statevector(n_qubits, amplitudes)


def determinant_state(n_qubits: int, occupied) -> Statevector:
    amplitudes = np.zeros(1 << n_qubits, dtype=complex)
    amplitudes[sum(1 << q for q in occupied)] = 1.0
    return Statevector(n_qubits, amplitudes)


@pytest.fixture
def h2_integrals():
    return parse_fcidump((DATA / "h2_sto3g.fcidump").read_text())


@pytest.fixture
def hf_like():
    """One inactive, three active (four electrons) and one virtual orbital."""
    integrals = random_integrals(5, 6)
    partition = partition_orbitals(5, inactive=[0], active=[1, 2, 3])
    return integrals, partition


@pytest.fixture
def f2_like():
    """One inactive orbital, a (2e, 2o) active space and one virtual orbital."""
    integrals = random_integrals(4, 4, seed=3)
    partition = partition_orbitals(4, inactive=[0], active=[1, 2])
    return integrals, partition
