from itertools import combinations
from math import comb

import numpy as np
import pytest
from conftest import determinant_state, random_sector_state

from ptvqe.errors import MissingRdmOrderError, OperatorError
from ptvqe.integrals import fold_core, spin_orbital_terms
from ptvqe.qsim import PauliString, expectation, jw_map, outcome_distribution, sample_counts
from ptvqe.rdm import (
    CumulantRdms,
    Rdm,
    RdmSet,
    StatevectorRdms,
    assemble_rdm,
    compute_rdm,
    connected_rdm,
    cumulant_3rdm,
    estimate_rdm,
    exact_pauli_expectations,
    group_qwc,
    one_rdm_from_two,
    rdm_energy,
    rdm_pauli_terms,
    read_rdm,
    wedge,
    write_rdm,
)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_trace_counts_particle_subsets(order):
    state = random_sector_state(6, 3)

    assert compute_rdm(state, order).trace() == pytest.approx(comb(3, order))


def test_order_above_particle_number_vanishes():
    rdm = compute_rdm(random_sector_state(6, 3), 4)

    assert rdm.vanishes
    assert not np.any(rdm.matrix)


def test_order_out_of_range():
    with pytest.raises(OperatorError):
        compute_rdm(random_sector_state(4, 2), 5)


def test_matrix_shape_is_checked():
    with pytest.raises(OperatorError):
        Rdm(2, 4, np.zeros((3, 3)))


def test_rdm_is_hermitian_for_complex_state():
    rdm = compute_rdm(random_sector_state(6, 3, complex_valued=True), 2)

    assert rdm.is_hermitian()


def test_tensor_is_antisymmetric():
    d2 = compute_rdm(random_sector_state(5, 2, seed=4), 2)
    tensor = d2.to_tensor()

    np.testing.assert_allclose(tensor, -tensor.transpose(1, 0, 2, 3), atol=1e-14)
    np.testing.assert_allclose(tensor, -tensor.transpose(0, 1, 3, 2), atol=1e-14)
    np.testing.assert_allclose(Rdm.from_tensor(tensor).matrix, d2.matrix)


def test_statevector_source_agrees_with_compressed_rdm():
    state = random_sector_state(6, 3, complex_valued=True)
    source = StatevectorRdms(state)
    d2 = compute_rdm(state, 2)

    for upper, lower in [((0, 1), (0, 1)), ((1, 4), (2, 5)), ((0, 5), (3, 4))]:
        assert source.element(upper, lower) == pytest.approx(2 * d2.element(upper, lower))
        # swapping one pair of creators flips the sign
        assert d2.element(upper[::-1], lower) == pytest.approx(-d2.element(upper, lower))
    assert source.access_counts[2] == 3


def test_one_rdm_from_two():
    state = random_sector_state(6, 3, complex_valued=True)

    implied = one_rdm_from_two(compute_rdm(state, 2))

    np.testing.assert_allclose(implied.matrix, compute_rdm(state, 1).matrix, atol=1e-12)


def test_one_rdm_from_two_needs_two_electrons():
    with pytest.raises(OperatorError):
        one_rdm_from_two(compute_rdm(random_sector_state(4, 1), 2))


def test_wedge_is_symmetric_for_one_body_tensors():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(4, 4))
    b = rng.normal(size=(4, 4))

    np.testing.assert_allclose(wedge(a, b).matrix, wedge(b, a).matrix, atol=1e-14)


def test_determinant_has_no_cumulant():
    state = determinant_state(6, [0, 2, 3])
    d1, d2, d3 = (compute_rdm(state, k) for k in (1, 2, 3))

    np.testing.assert_allclose(wedge(d1, d1).matrix, d2.matrix, atol=1e-14)
    assert not np.any(np.abs(connected_rdm(d1, d2).matrix) > 1e-14)
    np.testing.assert_allclose(cumulant_3rdm(d1, d2).matrix, d3.matrix, atol=1e-14)


def test_cumulant_3rdm_misses_only_the_connected_part():
    state = random_sector_state(6, 3, seed=8)
    d1, d2, d3 = (compute_rdm(state, k) for k in (1, 2, 3))

    approximate = cumulant_3rdm(d1, d2)

    assert approximate.is_hermitian()
    np.testing.assert_allclose((approximate + connected_rdm(d1, d2, d3)).matrix, d3.matrix, atol=1e-12)


def test_qwc_groups_are_compatible():
    measurement = rdm_pauli_terms(2, 4)
    plan = group_qwc(measurement.strings)

    seen = [string for group in plan.groups for string in group.members]
    assert sorted(seen, key=lambda s: s.letters) == measurement.strings
    for group in plan.groups:
        for left, right in combinations(group.members, 2):
            assert left.qubit_wise_commutes(right)
        for string in group.members:
            assert all(letter in ("I", basis) for letter, basis in zip(string.letters, group.basis))


def test_qwc_grouping_of_small_sets():
    diagonal = group_qwc([PauliString.from_letters(letters) for letters in ("ZI", "IZ", "ZZ")])
    clashing = group_qwc([PauliString.from_letters("X"), PauliString.from_letters("Z")])
    measurement = rdm_pauli_terms(2, 4)

    assert [group.basis for group in diagonal.groups] == ["ZZ"]
    assert sorted(group.basis for group in clashing.groups) == ["X", "Z"]
    assert len(group_qwc(measurement.strings).groups) < len(measurement.strings)


def test_estimate_error_shrinks_with_shots():
    state = random_sector_state(4, 2, seed=5)
    measurement = rdm_pauli_terms(1, 4)
    plan = group_qwc(measurement.strings)
    exact = compute_rdm(state, 1).matrix
    rng = np.random.default_rng(12)

    rms = []
    for shots in (100, 1_000, 10_000):
        errors = []
        for _ in range(30):
            counts = [sample_counts(state, group.basis, shots, rng=rng) for group in plan.groups]
            errors.append(np.linalg.norm(estimate_rdm(plan, counts, measurement).matrix - exact))
        rms.append(np.sqrt(np.mean(np.square(errors))))

    # error ~ 1/sqrt(shots), so each tenfold step divides it by about 3.16
    for coarse, fine in zip(rms, rms[1:]):
        assert 2.0 < coarse / fine < 5.0


def test_noiseless_distribution_estimate_is_exact():
    state = random_sector_state(4, 2, seed=5)
    measurement = rdm_pauli_terms(1, 4)
    plan = group_qwc(measurement.strings)

    distributions = [outcome_distribution(state, group.basis) for group in plan.groups]
    estimated = estimate_rdm(plan, distributions, measurement, n_electrons=2)

    np.testing.assert_allclose(estimated.matrix, compute_rdm(state, 1).matrix, atol=1e-10)


def test_assembled_two_rdm_from_exact_expectations():
    state = random_sector_state(4, 2, seed=6, complex_valued=True)
    measurement = rdm_pauli_terms(2, 4)

    assembled = assemble_rdm(measurement, exact_pauli_expectations(state, measurement.strings))

    np.testing.assert_allclose(assembled.matrix, compute_rdm(state, 2).matrix, atol=1e-10)


def test_estimate_needs_one_table_per_group():
    measurement = rdm_pauli_terms(1, 2)
    plan = group_qwc(measurement.strings)

    with pytest.raises(OperatorError):
        estimate_rdm(plan, [], measurement)


def test_write_then_read(tmp_path):
    d2 = compute_rdm(random_sector_state(5, 3, complex_valued=True), 2)

    manifest = write_rdm(d2, tmp_path / "d2.txt")
    restored = read_rdm(manifest)

    assert manifest.name == "d2.json"
    assert restored.order == 2 and restored.n_modes == 5
    np.testing.assert_array_equal(restored.matrix, d2.matrix)


def test_rdm_set_reports_missing_order():
    state = random_sector_state(6, 3)
    source = RdmSet({1: compute_rdm(state, 1)}, n_electrons=3)

    assert source.element((0, 1, 2, 3), (0, 1, 2, 3)) == 0.0
    with pytest.raises(MissingRdmOrderError):
        source.element((0, 1), (0, 1))
    assert source.access_counts[4] == 1


def test_rdm_energy_matches_expectation(hf_like):
    integrals, partition = hf_like
    hamiltonian = fold_core(integrals, partition)
    state = random_sector_state(6, 4, seed=13, complex_valued=True)
    h_qubit = jw_map(spin_orbital_terms(hamiltonian), 6)

    energy = rdm_energy(hamiltonian, compute_rdm(state, 1), compute_rdm(state, 2))

    assert energy == pytest.approx(expectation(state, h_qubit), abs=1e-10)


def test_cumulant_source_matches_cumulant_3rdm():
    state = random_sector_state(6, 3, seed=8, complex_valued=True)
    d1, d2 = compute_rdm(state, 1), compute_rdm(state, 2)
    source = CumulantRdms({1: d1, 2: d2}, n_electrons=3)
    approximate = cumulant_3rdm(d1, d2)

    for upper in [(0, 1, 2), (1, 3, 5), (2, 0, 4)]:
        for lower in [(0, 1, 2), (5, 3, 1), (0, 2, 4)]:
            assert source.element(upper, lower) == pytest.approx(6 * approximate.element(upper, lower), abs=1e-12)
    assert source.stored_counts.keys() <= {1, 2}
    assert source.access_counts[3] == 9


def test_cumulant_source_is_exact_for_a_determinant():
    state = determinant_state(8, [0, 3, 4, 6])
    source = CumulantRdms({1: compute_rdm(state, 1), 2: compute_rdm(state, 2)}, n_electrons=4)
    d4 = compute_rdm(state, 4)

    for upper in [(0, 3, 4, 6), (6, 4, 3, 0), (0, 1, 3, 4)]:
        for lower in [(0, 3, 4, 6), (3, 0, 4, 6), (0, 1, 2, 3)]:
            assert source.element(upper, lower) == pytest.approx(24 * d4.element(upper, lower), abs=1e-12)


def test_cumulant_source_reads_stored_orders_directly():
    state = random_sector_state(6, 4, seed=3)
    rdms = {k: compute_rdm(state, k) for k in (1, 2, 3)}
    source = CumulantRdms(rdms, n_electrons=4)

    assert source.element((0, 2, 5), (1, 2, 5)) == pytest.approx(6 * rdms[3].element((0, 2, 5), (1, 2, 5)))
    assert source.element((0, 1), (0, 1)) == pytest.approx(2 * rdms[2].element((0, 1), (0, 1)))
    assert source.element((), ()) == 1.0
    assert source.element((0, 1, 2, 3, 4), (0, 1, 2, 3, 4)) == 0.0

    source.element((0, 1, 2, 3), (0, 1, 2, 4))
    assert 4 not in source.stored_counts
    assert source.access_counts[4] == 1


def test_cumulant_source_needs_the_one_rdm():
    d2 = compute_rdm(random_sector_state(6, 3), 2)

    with pytest.raises(MissingRdmOrderError):
        CumulantRdms({2: d2}, n_electrons=3)
