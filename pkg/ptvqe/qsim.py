"""Statevector simulation of the active-space register.

Qubit ``q`` is bit ``q`` of a basis index and bitstrings are written qubit 0
first. Pauli strings are stored in symplectic form: bit ``q`` of ``x`` and
``z`` selects X, Z or (both set) Y on qubit ``q``, so a string acts as

    P |b⟩ = phase · i^{#Y} (−1)^{|b & z|} |b ⊕ x⟩.
"""

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import expm_multiply

from .errors import OperatorError
from .fermion import Term

logger = logging.getLogger(__name__)

HERMITICITY_TOLERANCE = 1e-10
NORM_TOLERANCE = 1e-12
PRUNE_TOLERANCE = 1e-14

_LETTER_BITS = {"I": (0, 0), "X": (1, 0), "Y": (1, 1), "Z": (0, 1)}
_PHASES = (1, 1j, -1, -1j)


def _popcount(value: int) -> int:
    return value.bit_count()


@dataclass(frozen=True)
class PauliString:
    n_qubits: int
    x: int = 0
    z: int = 0
    phase: complex = 1

    @classmethod
    def from_letters(cls, letters: str, phase: complex = 1) -> "PauliString":
        x = z = 0
        for qubit, letter in enumerate(letters.upper()):
            if letter not in _LETTER_BITS:
                raise OperatorError(f"Unknown Pauli letter {letter!r}")
            x_bit, z_bit = _LETTER_BITS[letter]
            x |= x_bit << qubit
            z |= z_bit << qubit
        return cls(len(letters), x, z, phase)

    @classmethod
    def identity(cls, n_qubits: int) -> "PauliString":
        return cls(n_qubits)

    @property
    def letters(self) -> str:
        return "".join("IZXY"[((self.x >> q) & 1) * 2 + ((self.z >> q) & 1)] for q in range(self.n_qubits))

    @property
    def support(self) -> int:
        return self.x | self.z

    @property
    def is_identity(self) -> bool:
        return self.support == 0

    @property
    def is_diagonal(self) -> bool:
        return self.x == 0

    def unsigned(self) -> "PauliString":
        return PauliString(self.n_qubits, self.x, self.z)

    def __mul__(self, other: "PauliString") -> "PauliString":
        if self.n_qubits != other.n_qubits:
            raise OperatorError("Pauli strings act on registers of different size")
        x, z = self.x ^ other.x, self.z ^ other.z
        exponent = (
            _popcount(self.x & self.z)
            + _popcount(other.x & other.z)
            - _popcount(x & z)
            + 2 * _popcount(self.z & other.x)
        )
        return PauliString(self.n_qubits, x, z, self.phase * other.phase * _PHASES[exponent % 4])

    def commutes_with(self, other: "PauliString") -> bool:
        return (_popcount(self.x & other.z) + _popcount(self.z & other.x)) % 2 == 0

    def qubit_wise_commutes(self, other: "PauliString") -> bool:
        shared = self.support & other.support
        return ((self.x ^ other.x) | (self.z ^ other.z)) & shared == 0

    def __str__(self) -> str:
        sign = {1: "+", -1: "-", 1j: "+i", -1j: "-i"}.get(self.phase, str(self.phase))
        return f"{sign}{self.letters}"


class PauliSum:
    """Linear combination of phase-free Pauli strings."""

    def __init__(self, n_qubits: int, terms: Mapping[PauliString, complex] | None = None):
        self.n_qubits = n_qubits
        self._terms: dict[PauliString, complex] = {}
        for string, coefficient in (terms or {}).items():
            self._add(string, coefficient)
        self._terms = {s: c for s, c in self._terms.items() if abs(c) > PRUNE_TOLERANCE}

    def _add(self, string: PauliString, coefficient: complex):
        if string.n_qubits != self.n_qubits:
            raise OperatorError("Pauli string size differs from the register size")
        key = string.unsigned()
        self._terms[key] = self._terms.get(key, 0.0) + coefficient * string.phase

    @classmethod
    def from_strings(cls, n_qubits: int, pairs: Iterable[tuple[str, complex]]) -> "PauliSum":
        result = cls(n_qubits)
        for letters, coefficient in pairs:
            result._add(PauliString.from_letters(letters), coefficient)
        return cls(n_qubits, result._terms)

    @classmethod
    def identity(cls, n_qubits: int, coefficient: complex = 1.0) -> "PauliSum":
        return cls(n_qubits, {PauliString.identity(n_qubits): coefficient})

    @property
    def terms(self) -> dict[PauliString, complex]:
        return dict(self._terms)

    def __len__(self) -> int:
        return len(self._terms)

    def __iter__(self):
        return iter(self._terms.items())

    def __add__(self, other: "PauliSum") -> "PauliSum":
        merged = PauliSum(self.n_qubits, self._terms)
        for string, coefficient in other:
            merged._add(string, coefficient)
        return PauliSum(self.n_qubits, merged._terms)

    def __sub__(self, other: "PauliSum") -> "PauliSum":
        return self + other.scale(-1.0)

    def scale(self, factor: complex) -> "PauliSum":
        return PauliSum(self.n_qubits, {s: factor * c for s, c in self._terms.items()})

    def __mul__(self, other: "PauliSum") -> "PauliSum":
        product = PauliSum(self.n_qubits)
        for left, a in self._terms.items():
            for right, b in other._terms.items():
                product._add(left * right, a * b)
        return PauliSum(self.n_qubits, product._terms)

    def adjoint(self) -> "PauliSum":
        return PauliSum(self.n_qubits, {s: np.conj(c) for s, c in self._terms.items()})

    def norm(self) -> float:
        return float(np.sqrt(sum(abs(c) ** 2 for c in self._terms.values())))

    def is_hermitian(self, tolerance: float = HERMITICITY_TOLERANCE) -> bool:
        return all(abs(complex(c).imag) <= tolerance for c in self._terms.values())

    def is_anti_hermitian(self, tolerance: float = HERMITICITY_TOLERANCE) -> bool:
        return all(abs(complex(c).real) <= tolerance for c in self._terms.values())

    def strings(self) -> list[PauliString]:
        return list(self._terms)

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        """Matrix over the full 2^n space, assembled per X-mask."""
        dim = 1 << self.n_qubits
        basis = np.arange(dim, dtype=np.int64)
        by_flip: dict[int, np.ndarray] = {}
        for string, coefficient in self._terms.items():
            parity = np.bitwise_count(basis & string.z).astype(np.int64) & 1
            values = coefficient * (1j ** _popcount(string.x & string.z)) * (1 - 2 * parity)
            by_flip[string.x] = by_flip.get(string.x, 0) + values

        rows, cols, data = [], [], []
        for flip, values in by_flip.items():
            keep = np.abs(values) > 0
            rows.append(basis[keep] ^ flip)
            cols.append(basis[keep])
            data.append(values[keep])
        if not data:
            return sparse.csr_matrix((dim, dim), dtype=complex)
        return sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim)
        ).tocsr()

    def to_sparse(self) -> sparse.csr_matrix:
        return self.matrix


@lru_cache(maxsize=None)
def _ladder(n_qubits: int, mode: int, dagger: bool) -> PauliSum:
    below = (1 << mode) - 1
    bit = 1 << mode
    x_part = PauliString(n_qubits, bit, below)
    y_part = PauliString(n_qubits, bit, below | bit)
    return PauliSum(n_qubits, {x_part: 0.5, y_part: -0.5j if dagger else 0.5j})


def jw_map(terms: Iterable[Term], n_qubits: int) -> PauliSum:
    """Jordan-Wigner image of a fermionic term list."""
    total: dict[PauliString, complex] = {}
    for coefficient, ops in terms:
        image = PauliSum.identity(n_qubits, coefficient)
        for mode, dagger in ops:
            if not 0 <= mode < n_qubits:
                raise OperatorError(f"Mode {mode} outside a {n_qubits}-qubit register")
            image = image * _ladder(n_qubits, mode, dagger)
        for string, value in image:
            total[string] = total.get(string, 0.0) + value
    return PauliSum(n_qubits, total)


@dataclass
class Statevector:
    n_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=complex)
        if self.amplitudes.shape != (1 << self.n_qubits,):
            raise OperatorError("Amplitude array length must be 2**n_qubits")

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def copy(self) -> "Statevector":
        return Statevector(self.n_qubits, self.amplitudes.copy())

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2


def prepare_reference(n_qubits: int, occupied: Iterable[int]) -> Statevector:
    occupied = list(occupied)
    if len(set(occupied)) != len(occupied):
        raise OperatorError("Occupied qubits must be distinct")
    amplitudes = np.zeros(1 << n_qubits, dtype=complex)
    amplitudes[sum(1 << q for q in occupied)] = 1.0
    return Statevector(n_qubits, amplitudes)


def apply_exp_generator(state: Statevector, generator: PauliSum, theta: float) -> Statevector:
    """Return exp(θ G)|state⟩ for an anti-Hermitian generator ``G``."""
    if not generator.is_anti_hermitian():
        raise OperatorError("Generator must have purely imaginary Pauli coefficients")
    if theta == 0.0 or len(generator) == 0:
        return state.copy()
    amplitudes = expm_multiply(theta * generator.matrix, state.amplitudes)
    return Statevector(state.n_qubits, amplitudes)


def apply_pauli(state: Statevector, string: PauliString) -> Statevector:
    basis = np.arange(1 << state.n_qubits, dtype=np.int64)
    parity = np.bitwise_count(basis & string.z).astype(np.int64) & 1
    factor = string.phase * (1j ** _popcount(string.x & string.z)) * (1 - 2 * parity)
    amplitudes = np.empty_like(state.amplitudes)
    amplitudes[basis ^ string.x] = factor * state.amplitudes
    return Statevector(state.n_qubits, amplitudes)


def apply_cnot(state: Statevector, control: int, target: int) -> Statevector:
    basis = np.arange(1 << state.n_qubits, dtype=np.int64)
    flipped = np.where((basis >> control) & 1, basis ^ (1 << target), basis)
    amplitudes = np.empty_like(state.amplitudes)
    amplitudes[flipped] = state.amplitudes
    return Statevector(state.n_qubits, amplitudes)


def _apply_single_qubit(amplitudes: np.ndarray, n_qubits: int, qubit: int, gate: np.ndarray) -> np.ndarray:
    axis = n_qubits - 1 - qubit
    tensor = np.moveaxis(amplitudes.reshape((2,) * n_qubits), axis, 0)
    rotated = np.tensordot(gate, tensor, axes=(1, 0))
    return np.moveaxis(rotated, 0, axis).reshape(-1)


_HADAMARD = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
_S_DAGGER = np.diag([1, -1j])
_ROTATIONS = {"X": _HADAMARD, "Y": _HADAMARD @ _S_DAGGER}


def rotate_to_basis(state: Statevector, basis: Sequence[str]) -> Statevector:
    """Rotate so that a Z-basis readout measures ``basis`` letters per qubit."""
    if len(basis) != state.n_qubits:
        raise OperatorError("Basis rotation must list one letter per qubit")
    amplitudes = state.amplitudes
    for qubit, letter in enumerate(basis):
        letter = letter.upper()
        if letter in _ROTATIONS:
            amplitudes = _apply_single_qubit(amplitudes, state.n_qubits, qubit, _ROTATIONS[letter])
        elif letter not in ("Z", "I"):
            raise OperatorError(f"Unknown measurement letter {letter!r}")
    return Statevector(state.n_qubits, amplitudes)


def expectation(state: Statevector, operator: PauliSum) -> float:
    if not operator.is_hermitian():
        raise OperatorError("Expectation values need a Hermitian PauliSum")
    if len(operator) == 0:
        return 0.0
    return float(np.vdot(state.amplitudes, operator.matrix @ state.amplitudes).real)


@dataclass(frozen=True)
class NoiseModel:
    depol_p: float = 0.0
    readout_p01: float = 0.0
    readout_p10: float = 0.0

    def __post_init__(self):
        for name in ("depol_p", "readout_p01", "readout_p10"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise OperatorError(f"{name} must lie in [0, 1]")

    @property
    def is_noiseless(self) -> bool:
        return self.depol_p == 0.0 and self.readout_p01 == 0.0 and self.readout_p10 == 0.0


def depolarize(state: Statevector, probability: float, rng: np.random.Generator) -> Statevector:
    """Insert an independent uniformly random X, Y or Z error on each qubit."""
    x = z = 0
    for qubit in range(state.n_qubits):
        if rng.random() < probability:
            letter = rng.choice(("X", "Y", "Z"))
            x_bit, z_bit = _LETTER_BITS[letter]
            x |= x_bit << qubit
            z |= z_bit << qubit
    if x == 0 and z == 0:
        return state
    return apply_pauli(state, PauliString(state.n_qubits, x, z))


@dataclass(frozen=True)
class ExpLayer:
    generator: PauliSum
    theta: float


@dataclass(frozen=True)
class CnotLayer:
    pairs: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class Circuit:
    """Reference preparation followed by layers applied in list order."""

    n_qubits: int
    occupied: tuple[int, ...] = ()
    layers: tuple[ExpLayer | CnotLayer, ...] = field(default_factory=tuple)

    def run(self, depol_p: float = 0.0, rng: np.random.Generator | None = None) -> Statevector:
        state = prepare_reference(self.n_qubits, self.occupied)
        for layer in self.layers:
            if isinstance(layer, CnotLayer):
                for control, target in layer.pairs:
                    state = apply_cnot(state, control, target)
                continue
            state = apply_exp_generator(state, layer.generator, layer.theta)
            if depol_p > 0.0:
                state = depolarize(state, depol_p, rng)
        return state


def _format_bits(outcome: int, n_qubits: int) -> str:
    return "".join(str((outcome >> q) & 1) for q in range(n_qubits))


def sample_counts(
    program: Statevector | Circuit,
    basis: Sequence[str],
    shots: int,
    noise: NoiseModel | None = None,
    rng: np.random.Generator | None = None,
    trajectories: int = 64,
) -> dict[str, int]:
    """Sample measurement outcomes of ``program`` in the rotated ``basis``.

    With depolarizing noise the shots are split over independent noisy
    executions of the circuit; a bare statevector counts as a single layer.
    """
    if shots <= 0:
        raise OperatorError("shots must be positive")
    noise = noise or NoiseModel()
    rng = rng if rng is not None else np.random.default_rng()
    n_qubits = program.n_qubits

    if noise.depol_p > 0.0:
        batches = np.array_split(np.arange(shots), min(shots, max(1, trajectories)))
        batch_sizes = [batch.size for batch in batches]
    else:
        batch_sizes = [shots]

    outcomes = []
    for size in batch_sizes:
        if isinstance(program, Circuit):
            state = program.run(noise.depol_p, rng)
        else:
            state = depolarize(program, noise.depol_p, rng) if noise.depol_p > 0.0 else program
        probabilities = rotate_to_basis(state, basis).probabilities()
        probabilities = probabilities / probabilities.sum()
        counts = rng.multinomial(size, probabilities)
        outcomes.append(np.repeat(np.arange(probabilities.size, dtype=np.int64), counts))
    outcomes = np.concatenate(outcomes)

    if noise.readout_p01 > 0.0 or noise.readout_p10 > 0.0:
        for qubit in range(n_qubits):
            bits = (outcomes >> qubit) & 1
            flip_probability = np.where(bits == 1, noise.readout_p10, noise.readout_p01)
            flips = rng.random(outcomes.size) < flip_probability
            outcomes = outcomes ^ (flips.astype(np.int64) << qubit)

    values, counts = np.unique(outcomes, return_counts=True)
    return {_format_bits(int(value), n_qubits): int(count) for value, count in zip(values, counts)}


def counts_to_arrays(counts: Mapping[str, int]) -> tuple[np.ndarray, np.ndarray]:
    """Convert bitstring counts to integer outcomes and weights."""
    outcomes = np.array([sum(int(bit) << q for q, bit in enumerate(bits)) for bits in counts], dtype=np.int64)
    weights = np.array(list(counts.values()), dtype=float)
    return outcomes, weights


def _readout_channel(probabilities: np.ndarray, n_qubits: int, noise: NoiseModel) -> np.ndarray:
    channel = np.array([[1.0 - noise.readout_p01, noise.readout_p10], [noise.readout_p01, 1.0 - noise.readout_p10]])
    for qubit in range(n_qubits):
        probabilities = _apply_single_qubit(probabilities, n_qubits, qubit, channel).real
    return probabilities


def outcome_distribution(
    program: Statevector | Circuit,
    basis: Sequence[str],
    noise: NoiseModel | None = None,
    rng: np.random.Generator | None = None,
    trajectories: int = 64,
) -> dict[str, float]:
    """Infinite-shot outcome probabilities of ``program`` measured in ``basis``.

    Depolarizing noise is averaged over ``trajectories`` noisy executions and
    readout flips are applied as a per-qubit stochastic channel. The result
    can stand in for counts wherever weights are normalized.
    """
    noise = noise or NoiseModel()
    rng = rng if rng is not None else np.random.default_rng()
    n_qubits = program.n_qubits
    runs = max(1, trajectories) if noise.depol_p > 0.0 else 1

    probabilities = np.zeros(1 << n_qubits)
    for _ in range(runs):
        if isinstance(program, Circuit):
            state = program.run(noise.depol_p, rng)
        else:
            state = depolarize(program, noise.depol_p, rng) if noise.depol_p > 0.0 else program
        probabilities += rotate_to_basis(state, basis).probabilities()
    probabilities /= probabilities.sum()
    if noise.readout_p01 > 0.0 or noise.readout_p10 > 0.0:
        probabilities = _readout_channel(probabilities.astype(complex), n_qubits, noise)
    return {
        _format_bits(outcome, n_qubits): float(probabilities[outcome])
        for outcome in np.flatnonzero(probabilities > 0.0)
    }
