import numpy as np
import pytest
from conftest import random_integrals

from ptvqe.errors import OperatorError, RegisterTooLargeError
from ptvqe.integrals import IntegralSet, fold_core, partition_orbitals, spin_orbital_terms
from ptvqe.oracle import DeterminantSpace, casci, fci_sector_check
from ptvqe.qsim import PauliSum, jw_map


def test_single_orbital_closed_form():
    h1 = np.array([[-1.3]])
    h2 = np.array([[[[0.6]]]])
    integrals = IntegralSet(n_orbitals=1, n_electrons=2, h1=h1, h2=h2, core=0.25)

    result = casci(integrals)

    assert result.energy == pytest.approx(2 * -1.3 + 0.6 + 0.25)
    assert result.space.dimension == 1


def test_h2_two_configuration_energy(h2_integrals):
    h1, h2 = h2_integrals.h1, h2_integrals.h2
    ground = 2 * h1[0, 0] + h2[0, 0, 0, 0]
    excited = 2 * h1[1, 1] + h2[1, 1, 1, 1]
    coupling = h2[0, 1, 0, 1]
    matrix = np.array([[ground, coupling], [coupling, excited]])

    result = casci(h2_integrals)

    assert result.energy == pytest.approx(np.linalg.eigvalsh(matrix)[0] + h2_integrals.core, abs=1e-10)
    assert result.residual < 1e-9


def test_sector_check_matches_casci(hf_like):
    integrals, partition = hf_like
    hamiltonian = fold_core(integrals, partition)
    h_qubit = jw_map(spin_orbital_terms(hamiltonian), 2 * hamiltonian.n_orbitals)

    assert fci_sector_check(h_qubit, hamiltonian.n_electrons) == pytest.approx(
        casci(hamiltonian, ms2=None).energy, abs=1e-9
    )


def test_empty_particle_sector_constant():
    integrals = random_integrals(2, 2)
    h_qubit = jw_map(spin_orbital_terms(integrals), 4)

    assert fci_sector_check(h_qubit, 0) == pytest.approx(integrals.core)


def test_sector_check_rejects_impossible_sector():
    with pytest.raises(OperatorError):
        fci_sector_check(PauliSum.identity(2), 3)


def test_sector_check_size_limit():
    with pytest.raises(RegisterTooLargeError):
        fci_sector_check(PauliSum.identity(18), 2)


def test_casci_rejects_empty_sector():
    with pytest.raises(OperatorError):
        casci(random_integrals(2, 2), n_electrons=2, ms2=1)


def test_casci_is_invariant_to_orbital_relabeling():
    integrals = random_integrals(4, 4)
    permutation = [1, 0, 2, 3]
    swapped = IntegralSet(
        n_orbitals=4,
        n_electrons=4,
        h1=integrals.h1[np.ix_(permutation, permutation)],
        h2=integrals.h2[np.ix_(permutation, permutation, permutation, permutation)],
        core=integrals.core,
    )

    assert casci(swapped).energy == pytest.approx(casci(integrals).energy, abs=1e-9)


def test_determinant_space_index():
    space = DeterminantSpace(4, 2, ms2=0)
    positions, member = space.index(np.array([0b0011, 0b0101]))

    assert member.tolist() == [True, False]
    assert space.determinants[positions[0]] == 0b0011


def test_casci_on_partitioned_system(f2_like):
    integrals, partition = f2_like
    active = casci(fold_core(integrals, partition)).energy
    full = casci(fold_core(integrals, partition_orbitals(4, active=[0, 1, 2, 3]))).energy

    assert full <= active + 1e-12
