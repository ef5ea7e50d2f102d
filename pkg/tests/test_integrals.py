import io

import numpy as np
import pytest
from conftest import random_integrals

from ptvqe.errors import FcidumpError, PartitionError
from ptvqe.fermion import operator_matrix, sector_basis
from ptvqe.integrals import (
    closed_shell_energy,
    fold_core,
    parse_fcidump,
    partition_orbitals,
    spin_orbital_terms,
    write_fcidump,
)

H2_HF_ENERGY = -1.1166843870


def test_parse_h2_fixture(h2_integrals):
    assert h2_integrals.n_orbitals == 2
    assert h2_integrals.n_electrons == 2
    assert h2_integrals.ms2 == 0
    assert h2_integrals.core == pytest.approx(0.7137539936)
    assert h2_integrals.h1[0, 0] == pytest.approx(-1.2524635735)
    assert h2_integrals.h2[0, 1, 0, 1] == pytest.approx(0.1812875358)
    assert h2_integrals.h2[1, 0, 0, 1] == pytest.approx(0.1812875358)
    assert h2_integrals.h2[0, 0, 1, 1] == pytest.approx(0.6636340479)


def test_parse_accepts_file_objects(h2_integrals):
    text = write_fcidump(h2_integrals)
    parsed = parse_fcidump(io.StringIO(text))

    np.testing.assert_array_equal(parsed.h1, h2_integrals.h1)


def test_write_then_parse_keeps_integrals():
    integrals = random_integrals(4, 4)
    parsed = parse_fcidump(write_fcidump(integrals))

    np.testing.assert_array_equal(parsed.h1, integrals.h1)
    np.testing.assert_array_equal(parsed.h2, integrals.h2)
    assert parsed.core == integrals.core


def test_parse_rejects_missing_header_end():
    with pytest.raises(FcidumpError):
        parse_fcidump(" &FCI NORB=1,NELEC=2,\n 1.0 1 1 1 1\n")


def test_parse_rejects_index_out_of_range():
    text = " &FCI NORB=1,NELEC=2,MS2=0,\n &END\n 1.0 2 1 1 1\n"
    with pytest.raises(FcidumpError):
        parse_fcidump(text)


def test_parse_rejects_inconsistent_duplicates():
    text = " &FCI NORB=2,NELEC=2,MS2=0,\n &END\n 0.5 1 1 2 2\n 0.6 2 2 1 1\n"
    with pytest.raises(FcidumpError):
        parse_fcidump(text)


def test_parse_ignores_orbital_energies():
    text = " &FCI NORB=1,NELEC=2,MS2=0,\n &END\n 0.7 1 1 1 1\n -0.3 1 0 0 0\n -1.1 1 1 0 0\n"
    integrals = parse_fcidump(text)

    assert integrals.h1[0, 0] == pytest.approx(-1.1)
    assert integrals.core == 0.0


def test_closed_shell_energy_h2(h2_integrals):
    assert closed_shell_energy(h2_integrals, [0]) == pytest.approx(H2_HF_ENERGY, abs=1e-8)


def test_partition_rejects_overlap():
    with pytest.raises(PartitionError):
        partition_orbitals(4, inactive=[0, 1], active=[1, 2])


def test_partition_rejects_out_of_range():
    with pytest.raises(PartitionError):
        partition_orbitals(3, active=[0, 3])


def test_partition_virtuals_and_electrons():
    partition = partition_orbitals(6, frozen=[0], inactive=[1], active=[2, 3])

    assert partition.virtual == (4, 5)
    assert partition.active_electrons(6) == 2
    assert partition.active_spin_orbitals() == [4, 5, 6, 7]
    with pytest.raises(PartitionError):
        partition.active_electrons(10)


def test_fold_core_reproduces_closed_shell_energy():
    integrals = random_integrals(5, 6)
    partition = partition_orbitals(5, inactive=[0], active=[1, 2, 3])
    hamiltonian = fold_core(integrals, partition)

    folded = hamiltonian.e_core + 2 * hamiltonian.f1[0, 0] + hamiltonian.v2[0, 0, 0, 0]

    assert hamiltonian.n_electrons == 4
    assert folded == pytest.approx(closed_shell_energy(integrals, [0, 1]), abs=1e-12)


def test_spin_orbital_terms_reference_energy():
    integrals = random_integrals(4, 4)
    terms = spin_orbital_terms(integrals)
    basis = sector_basis(8, 4)
    matrix = operator_matrix(terms, basis)
    reference = int(np.flatnonzero(basis == 0b1111)[0])

    energy = matrix[reference, reference].real

    assert energy == pytest.approx(closed_shell_energy(integrals, [0, 1]), abs=1e-12)


def test_folded_hamiltonian_matches_full_space_block():
    integrals = random_integrals(4, 4)
    partition = partition_orbitals(4, inactive=[0], active=[1, 2, 3])
    full = operator_matrix(spin_orbital_terms(integrals), sector_basis(8, 4)).toarray()
    active = operator_matrix(spin_orbital_terms(fold_core(integrals, partition)), sector_basis(6, 2)).toarray()

    # full-space determinants with orbital 0 doubly occupied, in the same order
    keep = [index for index, state in enumerate(sector_basis(8, 4)) if state & 0b11 == 0b11]

    np.testing.assert_allclose(full[np.ix_(keep, keep)], active, atol=1e-12)
