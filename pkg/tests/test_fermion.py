import numpy as np
import pytest

from ptvqe.fermion import (
    adjoint,
    apply_ops,
    canonical_terms,
    normal_order,
    operator_matrix,
    permutation_sign,
    sector_basis,
)
from ptvqe.qsim import jw_map


def test_normal_order_anticommutator():
    expansion = dict(normal_order(((0, False), (0, True))))

    assert expansion == {((), ()): 1, ((0,), (0,)): -1}


def test_normal_order_sorts_with_sign():
    expansion = dict(normal_order(((3, True), (1, True), (0, False), (2, False))))

    # a†3 a†1 a0 a2 = -a†1 a†3 a0 a2 = a†1 a†3 a2 a0
    assert expansion == {((1, 3), (0, 2)): 1}


def test_normal_order_pauli_exclusion():
    assert normal_order(((2, True), (2, True))) == ()


def test_permutation_sign():
    assert permutation_sign((0, 1, 2)) == 1
    assert permutation_sign((1, 0, 2)) == -1
    assert permutation_sign((2, 0, 1)) == 1
    assert permutation_sign((1, 1)) == 0


def test_adjoint_reverses_and_flips():
    assert adjoint(((3, True), (1, False))) == ((1, True), (3, False))


def test_sector_basis_sizes():
    assert sector_basis(4, 2).size == 6
    assert sector_basis(4, 2, ms2=0).size == 4
    assert sector_basis(4, 5).size == 0
    assert sector_basis(4, 1, ms2=0).size == 0


def test_apply_ops_signs():
    # a†1 on |q0⟩ passes one occupied mode below it
    states, signs = apply_ops(((1, True),), np.array([0b01, 0b10]))
    assert states[0] == 0b11 and signs[0] == -1
    assert signs[1] == 0


def test_operator_matrix_matches_jordan_wigner():
    rng = np.random.default_rng(5)
    terms = []
    for p, q in [(0, 2), (1, 3), (0, 0), (3, 1)]:
        terms.append((rng.normal(), ((p, True), (q, False))))
    terms.append((0.7, ((0, True), (1, True), (3, False), (2, False))))
    terms += [(np.conj(c), adjoint(ops)) for c, ops in terms]

    basis = sector_basis(4, 2)
    sector_matrix = operator_matrix(terms, basis).toarray()
    full = jw_map(terms, 4).matrix.toarray()

    np.testing.assert_allclose(sector_matrix, full[np.ix_(basis, basis)], atol=1e-12)
    np.testing.assert_allclose(sector_matrix, sector_matrix.conj().T, atol=1e-12)


def test_canonical_terms_cancel():
    terms = [(1.0, ((0, True), (1, False))), (-1.0, ((0, True), (1, False)))]

    assert canonical_terms(terms) == []


def test_operator_matrix_projects_onto_output_basis():
    basis_in = sector_basis(4, 2)
    basis_out = sector_basis(4, 1)
    matrix = operator_matrix([(1.0, ((0, False),))], basis_in, basis_out)

    assert matrix.shape == (basis_out.size, basis_in.size)
    assert matrix.nnz == 3


@pytest.mark.parametrize("n_modes", [4, 6])
def test_number_operator_is_diagonal(n_modes):
    terms = [(1.0, ((p, True), (p, False))) for p in range(n_modes)]
    basis = sector_basis(n_modes, 3)

    matrix = operator_matrix(terms, basis).toarray()

    np.testing.assert_allclose(matrix, 3 * np.eye(basis.size))
