"""Reduced density matrices of the active register.

A k-RDM element is D^{p1..pk}_{q1..qk} = (1/k!)⟨a†p1…a†pk a_qk…a_q1⟩. Only
strictly increasing index tuples are stored; :meth:`Rdm.element` restores the
antisymmetric signs and :meth:`Rdm.to_tensor` expands to a dense tensor.
"""

import json
import logging
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations, permutations
from math import factorial
from pathlib import Path
from typing import Protocol

import networkx as nx
import numpy as np
from scipy import sparse

from .errors import MissingRdmOrderError, OperatorError
from .fermion import Term, normal_order, permutation_sign
from .integrals import ActiveHamiltonian, spin_orbital_terms
from .qsim import PauliString, PauliSum, Statevector, counts_to_arrays, expectation, jw_map
from .schemas import RdmManifest

logger = logging.getLogger(__name__)

MAX_RDM_ORDER = 4


@lru_cache(maxsize=None)
def increasing_tuples(n_modes: int, order: int) -> tuple[tuple[int, ...], ...]:
    return tuple(combinations(range(n_modes), order))


@lru_cache(maxsize=None)
def tuple_index(n_modes: int, order: int) -> dict[tuple[int, ...], int]:
    return {indices: position for position, indices in enumerate(increasing_tuples(n_modes, order))}


class Rdm:
    """Compressed k-RDM over increasing index tuples."""

    def __init__(self, order: int, n_modes: int, matrix: np.ndarray, n_electrons: float | None = None):
        size = len(increasing_tuples(n_modes, order))
        matrix = np.asarray(matrix, dtype=complex)
        if matrix.shape != (size, size):
            raise OperatorError(f"A {order}-RDM on {n_modes} modes needs a {size}x{size} matrix")
        self.order = order
        self.n_modes = n_modes
        self.matrix = matrix
        self.n_electrons = n_electrons

    @property
    def tuples(self) -> tuple[tuple[int, ...], ...]:
        return increasing_tuples(self.n_modes, self.order)

    @property
    def vanishes(self) -> bool:
        """True when the order exceeds the particle number."""
        return self.n_electrons is not None and self.order > round(self.n_electrons)

    def element(self, upper: Sequence[int], lower: Sequence[int]) -> complex:
        sign = permutation_sign(upper) * permutation_sign(lower)
        if sign == 0:
            return 0.0
        index = tuple_index(self.n_modes, self.order)
        return sign * self.matrix[index[tuple(sorted(upper))], index[tuple(sorted(lower))]]

    def trace(self) -> float:
        """Sum over all ordered diagonal elements, C(N, k) for a valid RDM."""
        return float(factorial(self.order) * np.trace(self.matrix).real)

    def is_hermitian(self, tolerance: float = 1e-10) -> bool:
        return bool(np.allclose(self.matrix, self.matrix.conj().T, atol=tolerance))

    def _like(self, matrix: np.ndarray) -> "Rdm":
        return type(self)(self.order, self.n_modes, matrix, self.n_electrons)

    def __add__(self, other: "Rdm") -> "Rdm":
        return self._like(self.matrix + other.matrix)

    def __sub__(self, other: "Rdm") -> "Rdm":
        return self._like(self.matrix - other.matrix)

    def scale(self, factor: complex) -> "Rdm":
        return self._like(factor * self.matrix)

    def to_tensor(self) -> np.ndarray:
        k, n = self.order, self.n_modes
        tensor = np.zeros((n,) * (2 * k), dtype=complex)
        if k == 0:
            return self.matrix.reshape(())
        tuples = np.array(self.tuples, dtype=np.int64).reshape(-1, k)
        for upper in permutations(range(k)):
            upper_sign = permutation_sign(upper)
            upper_index = tuple(tuples[:, axis][:, None] for axis in upper)
            for lower in permutations(range(k)):
                lower_index = tuple(tuples[:, axis][None, :] for axis in lower)
                tensor[upper_index + lower_index] = upper_sign * permutation_sign(lower) * self.matrix
        return tensor

    @classmethod
    def from_tensor(cls, tensor: np.ndarray, n_electrons: float | None = None) -> "Rdm":
        order = tensor.ndim // 2
        n_modes = tensor.shape[0]
        tuples = np.array(increasing_tuples(n_modes, order), dtype=np.int64).reshape(-1, order)
        index = tuple(tuples[:, axis][:, None] for axis in range(order)) + tuple(
            tuples[:, axis][None, :] for axis in range(order)
        )
        return cls(order, n_modes, tensor[index], n_electrons)


class ConnectedRdm(Rdm):
    """Cumulant (connected) part of an RDM."""


def _nonzero_support(state: Statevector) -> tuple[np.ndarray, np.ndarray]:
    support = np.flatnonzero(state.amplitudes)
    return support.astype(np.int64), state.amplitudes[support]


def _annihilate(support: np.ndarray, values: np.ndarray, mode: int) -> tuple[np.ndarray, np.ndarray]:
    bit = np.int64(1) << np.int64(mode)
    mask = (support & bit) != 0
    kept = support[mask]
    parity = np.bitwise_count(kept & (bit - 1)).astype(np.int64) & 1
    return kept ^ bit, values[mask] * (1 - 2 * parity)


class AnnihilatedStates:
    """Cache of χ_T = a_{tk}…a_{t1}|ψ⟩ for increasing tuples T, kept sparse."""

    def __init__(self, state: Statevector):
        self.n_modes = state.n_qubits
        self._cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray]] = {(): _nonzero_support(state)}

    def get(self, indices: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        cached = self._cache.get(indices)
        if cached is None:
            support, values = self.get(indices[:-1])
            cached = _annihilate(support, values, indices[-1])
            self._cache[indices] = cached
        return cached

    def inner(self, left: tuple[int, ...], right: tuple[int, ...]) -> complex:
        left_support, left_values = self.get(left)
        right_support, right_values = self.get(right)
        _, left_at, right_at = np.intersect1d(left_support, right_support, assume_unique=True, return_indices=True)
        return complex(np.vdot(left_values[left_at], right_values[right_at]))

    def stacked(self, order: int) -> sparse.csr_matrix:
        tuples = increasing_tuples(self.n_modes, order)
        rows, cols, data = [], [], []
        for row, indices in enumerate(tuples):
            support, values = self.get(indices)
            rows.append(np.full(support.size, row))
            cols.append(support)
            data.append(values)
        shape = (len(tuples), 1 << self.n_modes)
        if not tuples:
            return sparse.csr_matrix(shape, dtype=complex)
        return sparse.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=shape)


def particle_number(state: Statevector) -> float:
    counts = np.bitwise_count(np.arange(1 << state.n_qubits, dtype=np.int64))
    return float(np.dot(state.probabilities(), counts))


def compute_rdm(state: Statevector, order: int) -> Rdm:
    """Exact k-RDM by applying annihilators to the statevector."""
    if not 1 <= order <= MAX_RDM_ORDER:
        raise OperatorError(f"RDM order must lie in [1, {MAX_RDM_ORDER}]")
    n_electrons = particle_number(state)
    size = len(increasing_tuples(state.n_qubits, order))
    if order > round(n_electrons):
        logger.warning("RDM order exceeds the particle number", extra={"order": order, "n_electrons": n_electrons})
        return Rdm(order, state.n_qubits, np.zeros((size, size)), n_electrons)
    stacked = AnnihilatedStates(state).stacked(order)
    matrix = (stacked.conj() @ stacked.T).toarray() / factorial(order)
    return Rdm(order, state.n_qubits, matrix, n_electrons)


def contract(rdm: Rdm) -> Rdm:
    """Partial trace Σ_r D^{p..r}_{q..r}, equal to (N−k+1)/k times the (k−1)-RDM."""
    if rdm.order < 2:
        raise OperatorError("Only RDMs of order 2 or more can be contracted")
    tensor = rdm.to_tensor()
    k = rdm.order
    traced = np.trace(tensor, axis1=k - 1, axis2=2 * k - 1)
    return Rdm.from_tensor(traced, rdm.n_electrons)


def one_rdm_from_two(d2: Rdm) -> Rdm:
    """1-RDM implied by a 2-RDM through the contraction relation."""
    n_electrons = d2.n_electrons
    if n_electrons is None or n_electrons < 2:
        raise OperatorError("The 1-RDM follows from the 2-RDM only for N >= 2")
    return contract(d2).scale(2.0 / (n_electrons - 1))


def _as_tensor(value: Rdm | np.ndarray) -> np.ndarray:
    return value.to_tensor() if isinstance(value, Rdm) else np.asarray(value, dtype=complex)


def _antisymmetrize(tensor: np.ndarray, start: int, count: int) -> np.ndarray:
    axes = list(range(tensor.ndim))
    result = np.zeros_like(tensor)
    for permutation in permutations(range(count)):
        order = axes[:start] + [start + p for p in permutation] + axes[start + count:]
        result += permutation_sign(permutation) * np.transpose(tensor, order)
    return result


def wedge_tensors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ka, kb = a.ndim // 2, b.ndim // 2
    k = ka + kb
    product = np.multiply.outer(a, b)
    upper = list(range(ka)) + list(range(2 * ka, 2 * ka + kb))
    lower = list(range(ka, 2 * ka)) + list(range(2 * ka + kb, 2 * k))
    product = np.transpose(product, upper + lower)
    product = _antisymmetrize(_antisymmetrize(product, 0, k), k, k)
    return product / factorial(k) ** 2


def wedge(a: Rdm | np.ndarray, b: Rdm | np.ndarray) -> Rdm:
    """Grassmann product with the normalization that makes ¹D∧¹D the 2-RDM of a determinant."""
    tensor = wedge_tensors(_as_tensor(a), _as_tensor(b))
    n_electrons = a.n_electrons if isinstance(a, Rdm) else None
    return Rdm.from_tensor(tensor, n_electrons)


def connected_rdm(d1: Rdm, d2: Rdm, d3: Rdm | None = None) -> ConnectedRdm:
    """²Δ = ²D − ¹Δ∧¹Δ, or ³Δ when the 3-RDM is supplied."""
    t1 = d1.to_tensor()
    w11 = wedge_tensors(t1, t1)
    delta2 = d2.to_tensor() - w11
    if d3 is None:
        return ConnectedRdm.from_tensor(delta2, d2.n_electrons)
    delta3 = d3.to_tensor() - 3.0 * wedge_tensors(delta2, t1) - wedge_tensors(w11, t1)
    return ConnectedRdm.from_tensor(delta3, d3.n_electrons)


def cumulant_3rdm(d1: Rdm, d2: Rdm) -> Rdm:
    """³D ≈ 3·²Δ∧¹Δ + ¹Δ∧¹Δ∧¹Δ, dropping the connected three-body part."""
    t1 = d1.to_tensor()
    w11 = wedge_tensors(t1, t1)
    delta2 = d2.to_tensor() - w11
    tensor = 3.0 * wedge_tensors(delta2, t1) + wedge_tensors(w11, t1)
    return Rdm.from_tensor(tensor, d2.n_electrons)


@dataclass(frozen=True)
class RdmMeasurement:
    """Pauli expansions of the upper-triangle elements of a k-RDM."""

    order: int
    n_qubits: int
    elements: dict[tuple[int, int], PauliSum]

    @property
    def strings(self) -> list[PauliString]:
        unique = {string for expansion in self.elements.values() for string, _ in expansion}
        return sorted((s for s in unique if not s.is_identity), key=lambda s: s.letters)


def rdm_pauli_terms(order: int, n_qubits: int) -> RdmMeasurement:
    tuples = increasing_tuples(n_qubits, order)
    elements = {}
    for row, upper in enumerate(tuples):
        for col in range(row, len(tuples)):
            lower = tuples[col]
            ops = tuple((mode, True) for mode in upper) + tuple((mode, False) for mode in reversed(lower))
            elements[(row, col)] = jw_map([(1.0 / factorial(order), ops)], n_qubits)
    return RdmMeasurement(order, n_qubits, elements)


@dataclass(frozen=True)
class MeasurementGroup:
    basis: str
    members: tuple[PauliString, ...]


@dataclass(frozen=True)
class MeasurementPlan:
    n_qubits: int
    groups: tuple[MeasurementGroup, ...]
    shots_per_group: int = 10_000


def group_qwc(strings: Iterable[PauliString], shots_per_group: int = 10_000) -> MeasurementPlan:
    """Qubit-wise commuting groups from a largest-first greedy coloring of the conflict graph."""
    unique = sorted({s.unsigned() for s in strings if not s.is_identity}, key=lambda s: s.letters)
    if not unique:
        return MeasurementPlan(0, (), shots_per_group)
    n_qubits = unique[0].n_qubits

    conflicts = nx.Graph()
    conflicts.add_nodes_from(range(len(unique)))
    for i, j in combinations(range(len(unique)), 2):
        if not unique[i].qubit_wise_commutes(unique[j]):
            conflicts.add_edge(i, j)
    colors = nx.greedy_color(conflicts, strategy="largest_first")

    members: dict[int, list[PauliString]] = {}
    for node in sorted(colors):
        members.setdefault(colors[node], []).append(unique[node])
    groups = []
    for color in sorted(members):
        basis = ["Z"] * n_qubits
        for string in members[color]:
            for qubit, letter in enumerate(string.letters):
                if letter != "I":
                    basis[qubit] = letter
        groups.append(MeasurementGroup("".join(basis), tuple(members[color])))
    return MeasurementPlan(n_qubits, tuple(groups), shots_per_group)


def estimate_pauli_expectations(
    plan: MeasurementPlan, counts_per_group: Sequence[Mapping[str, int]]
) -> dict[PauliString, float]:
    """Parity averages over each string's support from per-group counts."""
    if len(counts_per_group) != len(plan.groups):
        raise OperatorError("One counts table is needed per measurement group")
    estimates = {}
    for group, counts in zip(plan.groups, counts_per_group):
        outcomes, weights = counts_to_arrays(counts)
        total = weights.sum()
        if total <= 0:
            raise OperatorError(f"No shots recorded for group {group.basis}")
        for string in group.members:
            parity = np.bitwise_count(outcomes & string.support).astype(np.int64) & 1
            estimates[string] = float(np.dot(weights, 1 - 2 * parity) / total)
    return estimates


def exact_pauli_expectations(state: Statevector, strings: Iterable[PauliString]) -> dict[PauliString, float]:
    return {s: expectation(state, PauliSum(state.n_qubits, {s: 1.0})) for s in strings}


def assemble_rdm(
    measurement: RdmMeasurement, expectations: Mapping[PauliString, float], n_electrons: float | None = None
) -> Rdm:
    size = len(increasing_tuples(measurement.n_qubits, measurement.order))
    matrix = np.zeros((size, size), dtype=complex)
    for (row, col), expansion in measurement.elements.items():
        value = sum(
            coefficient * (1.0 if string.is_identity else expectations[string]) for string, coefficient in expansion
        )
        matrix[row, col] = value
        matrix[col, row] = np.conj(value)
    return Rdm(measurement.order, measurement.n_qubits, matrix, n_electrons)


def estimate_rdm(
    plan: MeasurementPlan,
    counts_per_group: Sequence[Mapping[str, int]],
    measurement: RdmMeasurement,
    n_electrons: float | None = None,
) -> Rdm:
    return assemble_rdm(measurement, estimate_pauli_expectations(plan, counts_per_group), n_electrons)


def write_rdm(rdm: Rdm, path: str | Path) -> Path:
    """Write ``k p.. q.. real imag`` lines and a JSON manifest next to them."""
    path = Path(path)
    lines = []
    for row, upper in enumerate(rdm.tuples):
        for col, lower in enumerate(rdm.tuples):
            value = rdm.matrix[row, col]
            if value != 0:
                indices = " ".join(str(i) for i in upper + lower)
                lines.append(f"{rdm.order} {indices} {value.real!r} {value.imag!r}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    manifest = RdmManifest(
        order=rdm.order, n_modes=rdm.n_modes, trace=rdm.trace(), n_electrons=rdm.n_electrons, data=path.name
    )
    manifest_path = path.with_suffix(".json")
    manifest_path.write_text(manifest.model_dump_json(indent=2))
    return manifest_path


def read_rdm(manifest_path: str | Path) -> Rdm:
    manifest_path = Path(manifest_path)
    manifest = RdmManifest.model_validate(json.loads(manifest_path.read_text()))
    size = len(increasing_tuples(manifest.n_modes, manifest.order))
    index = tuple_index(manifest.n_modes, manifest.order)
    matrix = np.zeros((size, size), dtype=complex)
    k = manifest.order
    for line in (manifest_path.parent / manifest.data).read_text().splitlines():
        fields = line.split()
        if not fields:
            continue
        indices = [int(token) for token in fields[1:1 + 2 * k]]
        matrix[index[tuple(indices[:k])], index[tuple(indices[k:])]] = complex(float(fields[-2]), float(fields[-1]))
    return Rdm(k, manifest.n_modes, matrix, manifest.n_electrons)


class RdmSource(Protocol):
    """Unnormalized RDM elements ⟨a†c1…a†ck a_qk…a_q1⟩ for ascending tuples."""

    n_electrons: float
    access_counts: Counter

    def element(self, creators: tuple[int, ...], annihilators: tuple[int, ...]) -> complex: ...


class RdmSet:
    """RDM source backed by stored tensors; orders above N read as zero."""

    def __init__(self, rdms: Mapping[int, Rdm], n_electrons: float):
        self.rdms = dict(rdms)
        self.n_electrons = n_electrons
        self.access_counts: Counter = Counter()

    def element(self, creators: tuple[int, ...], annihilators: tuple[int, ...]) -> complex:
        order = len(creators)
        self.access_counts[order] += 1
        if order == 0:
            return 1.0
        if order > round(self.n_electrons):
            return 0.0
        rdm = self.rdms.get(order)
        if rdm is None:
            raise MissingRdmOrderError(f"The {order}-RDM is required but was not provided")
        return factorial(order) * rdm.element(creators, annihilators)


@lru_cache(maxsize=None)
def _block_pairings(order: int) -> tuple[tuple[int, tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]], ...]:
    """Every way to split upper and lower positions into matched blocks of equal size.

    Each entry is ``(sign, ((upper_block, lower_block), ...))``; the sign is
    that of the upper concatenation times that of the lower concatenation.
    """

    def split(upper: tuple[int, ...], lower: tuple[int, ...]):
        if not upper:
            yield ()
            return
        first, rest = upper[0], upper[1:]
        for size in range(1, len(upper) + 1):
            for others in combinations(rest, size - 1):
                block = (first,) + others
                remaining_upper = tuple(i for i in rest if i not in others)
                for partner in combinations(lower, size):
                    remaining_lower = tuple(i for i in lower if i not in partner)
                    for tail in split(remaining_upper, remaining_lower):
                        yield ((block, partner),) + tail

    positions = tuple(range(order))
    pairings = []
    for blocks in split(positions, positions):
        upper = [i for block, _ in blocks for i in block]
        lower = [i for _, partner in blocks for i in partner]
        pairings.append((permutation_sign(upper) * permutation_sign(lower), blocks))
    return tuple(pairings)


class CumulantRdms:
    """RDM source over measured low orders; higher orders come from the cumulant expansion.

    ⟨a†P a_Q⟩ is the signed sum, over matched block splits of P and Q, of
    products of connected parts. Connected parts above the highest stored
    order are dropped, which for stored 1- and 2-RDMs reproduces
    :func:`cumulant_3rdm` at order three.
    """

    def __init__(self, rdms: Mapping[int, Rdm], n_electrons: float):
        self.rdms = {order: rdm for order, rdm in rdms.items() if order > 0}
        if not self.rdms or min(self.rdms) != 1 or sorted(self.rdms) != list(range(1, max(self.rdms) + 1)):
            raise MissingRdmOrderError("The cumulant expansion needs every RDM order from 1 up")
        self.n_electrons = n_electrons
        self.max_stored = max(self.rdms)
        self.access_counts: Counter = Counter()
        self.stored_counts: Counter = Counter()
        self._connected: dict[tuple[tuple[int, ...], tuple[int, ...]], complex] = {}

    def _stored(self, creators: tuple[int, ...], annihilators: tuple[int, ...]) -> complex:
        order = len(creators)
        self.stored_counts[order] += 1
        return factorial(order) * self.rdms[order].element(creators, annihilators)

    def connected(self, creators: tuple[int, ...], annihilators: tuple[int, ...]) -> complex:
        order = len(creators)
        if order > self.max_stored:
            return 0.0
        sign = permutation_sign(creators) * permutation_sign(annihilators)
        if sign == 0:
            return 0.0
        key = (tuple(sorted(creators)), tuple(sorted(annihilators)))
        if key not in self._connected:
            value = self._stored(*key)
            if order > 1:
                value -= self._expand(*key, disconnected_only=True)
            self._connected[key] = value
        return sign * self._connected[key]

    def _expand(self, creators, annihilators, disconnected_only: bool = False) -> complex:
        total = 0.0
        for sign, blocks in _block_pairings(len(creators)):
            if disconnected_only and len(blocks) == 1:
                continue
            product = sign
            for block, partner in blocks:
                product *= self.connected(
                    tuple(creators[i] for i in block), tuple(annihilators[i] for i in partner)
                )
                if product == 0:
                    break
            total += product
        return total

    def element(self, creators: tuple[int, ...], annihilators: tuple[int, ...]) -> complex:
        order = len(creators)
        self.access_counts[order] += 1
        if order == 0:
            return 1.0
        if order > round(self.n_electrons):
            return 0.0
        if order <= self.max_stored:
            return self._stored(creators, annihilators)
        return self._expand(creators, annihilators)


class StatevectorRdms:
    """RDM source that evaluates elements of any order from a statevector."""

    def __init__(self, state: Statevector):
        self.state = state
        self.n_electrons = particle_number(state)
        self.access_counts: Counter = Counter()
        self._annihilated = AnnihilatedStates(state)

    def element(self, creators: tuple[int, ...], annihilators: tuple[int, ...]) -> complex:
        order = len(creators)
        self.access_counts[order] += 1
        if order > round(self.n_electrons):
            return 0.0
        return self._annihilated.inner(creators, annihilators)

    def rdm(self, order: int) -> Rdm:
        return compute_rdm(self.state, order)


def source_expectation(source: RdmSource, terms: Iterable[Term]) -> complex:
    """⟨Σ c·ops⟩ reduced to RDM elements by normal ordering."""
    total = 0.0
    for coefficient, ops in terms:
        for (creators, annihilators), sign in normal_order(tuple(ops)):
            if len(creators) == len(annihilators):
                total += coefficient * sign * source.element(creators, annihilators)
    return total


def rdm_energy(hamiltonian: ActiveHamiltonian, d1: Rdm, d2: Rdm) -> float:
    """Active-space energy (including the folded core) from 1- and 2-RDMs."""
    source = RdmSet({1: d1, 2: d2}, hamiltonian.n_electrons)
    return float(source_expectation(source, spin_orbital_terms(hamiltonian)).real)
