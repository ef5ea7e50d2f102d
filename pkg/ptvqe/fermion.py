"""Fermionic operator strings, normal ordering and determinant bit action.

An operator string is a tuple of ``(mode, dagger)`` pairs read left to right,
so ``((2, True), (0, False))`` stands for a†_2 a_0. A term list is a sequence
of ``(coefficient, ops)`` pairs; the empty string is the identity.

Basis states are integers whose bit ``p`` is the occupation of mode ``p``. The
determinant for a bit pattern is the product of its creators in ascending mode
order acting on the vacuum, which is the ordering the Jordan-Wigner parity
strings reproduce.
"""

from collections.abc import Iterable, Sequence
from functools import lru_cache
from itertools import combinations

import numpy as np
from scipy import sparse

Op = tuple[int, bool]
Ops = tuple[Op, ...]
Term = tuple[complex, Ops]
NormalKey = tuple[tuple[int, ...], tuple[int, ...]]

COEFFICIENT_TOLERANCE = 1e-14


def adjoint(ops: Ops) -> Ops:
    return tuple((mode, not dagger) for mode, dagger in reversed(ops))


def adjoint_terms(terms: Iterable[Term]) -> list[Term]:
    return [(np.conj(coefficient), adjoint(ops)) for coefficient, ops in terms]


def permutation_sign(values: Sequence[int]) -> int:
    """Sign of the permutation sorting ``values`` ascending, 0 on repeats."""
    sign = 1
    for i in range(len(values)):
        for j in range(i + 1, len(values)):
            if values[i] == values[j]:
                return 0
            if values[i] > values[j]:
                sign = -sign
    return sign


def key_to_ops(key: NormalKey) -> Ops:
    creators, annihilators = key
    return tuple((mode, True) for mode in creators) + tuple(
        (mode, False) for mode in reversed(annihilators)
    )


@lru_cache(maxsize=1 << 20)
def normal_order(ops: Ops) -> tuple[tuple[NormalKey, int], ...]:
    """Expand ``ops`` into canonical normal-ordered strings.

    Each entry is ``((creators, annihilators), coefficient)`` with both index
    tuples ascending; the key stands for a†_{c1}…a†_{ck} a_{qk}…a_{q1}, the
    index order used by RDM elements.
    """
    for i in range(len(ops) - 1):
        (left_mode, left_dagger), (right_mode, right_dagger) = ops[i], ops[i + 1]
        if left_dagger or not right_dagger:
            continue
        expansion: dict[NormalKey, int] = {}
        swapped = ops[:i] + (ops[i + 1], ops[i]) + ops[i + 2:]
        for key, coefficient in normal_order(swapped):
            expansion[key] = expansion.get(key, 0) - coefficient
        if left_mode == right_mode:
            for key, coefficient in normal_order(ops[:i] + ops[i + 2:]):
                expansion[key] = expansion.get(key, 0) + coefficient
        return tuple((key, value) for key, value in expansion.items() if value)

    creators = tuple(mode for mode, dagger in ops if dagger)
    annihilators = tuple(mode for mode, dagger in ops if not dagger)
    sign = permutation_sign(creators) * permutation_sign(annihilators[::-1])
    if sign == 0:
        return ()
    return (((tuple(sorted(creators)), tuple(sorted(annihilators))), sign),)


def canonical_terms(terms: Iterable[Term], tolerance: float = COEFFICIENT_TOLERANCE) -> list[Term]:
    """Merge a term list into distinct normal-ordered strings."""
    merged: dict[NormalKey, complex] = {}
    for coefficient, ops in terms:
        for key, sign in normal_order(tuple(ops)):
            merged[key] = merged.get(key, 0.0) + sign * coefficient
    return [
        (coefficient, key_to_ops(key))
        for key, coefficient in merged.items()
        if abs(coefficient) > tolerance
    ]


def particle_rank(ops: Ops) -> int:
    """Net number of particles created by ``ops``."""
    return sum(1 if dagger else -1 for _, dagger in ops)


def apply_ops(ops: Ops, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Act with ``ops`` on an array of basis states.

    Returns the resulting states and the Jordan-Wigner signs; a sign of 0 marks
    states annihilated by the string.
    """
    states = np.array(states, dtype=np.int64, copy=True)
    signs = np.ones(states.shape, dtype=np.int64)
    for mode, dagger in reversed(ops):
        bit = np.int64(1) << np.int64(mode)
        occupied = (states & bit) != 0
        signs[occupied == dagger] = 0
        parity = np.bitwise_count(states & (bit - 1)).astype(np.int64) & 1
        signs *= 1 - 2 * parity
        states ^= bit
    return states, signs


def sector_basis(n_modes: int, n_electrons: int, ms2: int | None = None) -> np.ndarray:
    """Sorted bit patterns with ``n_electrons`` set bits.

    With ``ms2`` given, even modes count as spin up and odd modes as spin down
    and only patterns with ``n_up - n_down == ms2`` are kept.
    """
    if n_electrons < 0 or n_electrons > n_modes:
        return np.zeros(0, dtype=np.int64)
    if ms2 is None:
        patterns = [sum(1 << mode for mode in occupied) for occupied in combinations(range(n_modes), n_electrons)]
        return np.array(sorted(patterns), dtype=np.int64)

    if (n_electrons + ms2) % 2:
        return np.zeros(0, dtype=np.int64)
    n_up = (n_electrons + ms2) // 2
    n_down = n_electrons - n_up
    up_modes = range(0, n_modes, 2)
    down_modes = range(1, n_modes, 2)
    up_patterns = [sum(1 << mode for mode in occupied) for occupied in combinations(up_modes, n_up)]
    down_patterns = [sum(1 << mode for mode in occupied) for occupied in combinations(down_modes, n_down)]
    if not up_patterns or not down_patterns:
        return np.zeros(0, dtype=np.int64)
    grid = np.add.outer(np.array(up_patterns, dtype=np.int64), np.array(down_patterns, dtype=np.int64))
    return np.sort(grid.ravel())


def locate(basis: np.ndarray, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positions of ``states`` in the sorted ``basis`` and a membership mask."""
    if basis.size == 0:
        return np.zeros(states.shape, dtype=np.int64), np.zeros(states.shape, dtype=bool)
    position = np.minimum(np.searchsorted(basis, states), basis.size - 1)
    return position, basis[position] == states


def operator_matrix(
    terms: Iterable[Term], basis: np.ndarray, basis_out: np.ndarray | None = None
) -> sparse.csr_matrix:
    """Sparse matrix of a term list from ``basis`` to ``basis_out``.

    Both bases are sorted determinant lists; ``basis_out`` defaults to
    ``basis``. Terms mapping a state outside ``basis_out`` are dropped, so the
    result is the projection of the operator onto the span of ``basis_out``.
    """
    basis = np.asarray(basis, dtype=np.int64)
    basis_out = basis if basis_out is None else np.asarray(basis_out, dtype=np.int64)
    columns = np.arange(basis.size)
    rows_out, columns_out, data_out = [], [], []
    for coefficient, ops in terms:
        targets, signs = apply_ops(ops, basis)
        position, member = locate(basis_out, targets)
        keep = member & (signs != 0)
        rows_out.append(position[keep])
        columns_out.append(columns[keep])
        data_out.append(coefficient * signs[keep].astype(complex))

    shape = (basis_out.size, basis.size)
    if not data_out:
        return sparse.csr_matrix(shape, dtype=complex)
    matrix = sparse.coo_matrix(
        (np.concatenate(data_out), (np.concatenate(rows_out), np.concatenate(columns_out))), shape=shape
    )
    return matrix.tocsr()


def apply_terms(
    terms: Iterable[Term], basis: np.ndarray, vector: np.ndarray, basis_out: np.ndarray | None = None
) -> np.ndarray:
    """Apply a term list to ``vector`` expressed over the sorted ``basis``."""
    basis = np.asarray(basis, dtype=np.int64)
    basis_out = basis if basis_out is None else np.asarray(basis_out, dtype=np.int64)
    result = np.zeros(basis_out.size, dtype=complex)
    for coefficient, ops in terms:
        targets, signs = apply_ops(ops, basis)
        position, member = locate(basis_out, targets)
        keep = member & (signs != 0)
        np.add.at(result, position[keep], coefficient * signs[keep] * vector[keep])
    return result
