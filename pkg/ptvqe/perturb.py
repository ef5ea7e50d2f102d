"""Second-order perturbation theory on top of an active-space reference.

The reference is |Ψ0⟩ = |inactive⟩ ⊗ |Ψ_act⟩ ⊗ |virtual vacuum⟩ over the full
set of spin orbitals. Brackets ⟨Ψ0|B† H K|Ψ0⟩ are reduced to the active
register: every operator string is split into an external part, which acts on
a determinant of the frozen, inactive and virtual spin orbitals, and an active
part left for the register. The Hamiltonian is folded into effective register
operators between pairs of external determinants, and what remains is read
from RDM elements or, when the active state is at hand, from register vectors.

Embedding convention: |c, φ⟩ = (Π_{e ∈ c, ascending} a†_e) φ(a†_act)|vac⟩,
where φ is a polynomial in the register creators.
"""

import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from functools import cached_property
from itertools import combinations_with_replacement, product
from math import comb, fsum
from typing import Literal

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from .errors import (
    IntruderStateError,
    OperatorError,
    OrthonormalizationError,
    PartitionError,
    RegisterTooLargeError,
)
from .fermion import (
    NormalKey,
    Op,
    Ops,
    Term,
    adjoint,
    apply_ops,
    apply_terms,
    canonical_terms,
    key_to_ops,
    locate,
    normal_order,
    operator_matrix,
    permutation_sign,
    sector_basis,
)
from .integrals import IntegralSet, OrbitalPartition, spin_orbital_terms
from .qsim import Statevector
from .rdm import CumulantRdms, Rdm, RdmSet, RdmSource, StatevectorRdms
from .schemas import PtReportRecord, PtTermRecord

logger = logging.getLogger(__name__)

OVERLAP_CUTOFF = 1e-8
INTRUDER_TOLERANCE = 1e-8
NEGLIGIBLE_NUMERATOR = 1e-12
DEGENERACY_TOLERANCE = 1e-10
HERMITICITY_TOLERANCE = 1e-8
MAX_BRUTE_MODES = 24
MAX_BRUTE_DIMENSION = 200_000

Backend = Literal["auto", "statevector", "rdm"]


class ExcitationClass(StrEnum):
    R_I_U = "r_i^u"
    R_I_A = "r_i^a"
    R_U_A = "r_u^a"
    R_V_U = "r_v^u"
    R_IJ_UV = "r_ij^uv"
    R_IJ_AB = "r_ij^ab"
    R_UV_AB = "r_uv^ab"
    R_WI_UV = "r_wi^uv"
    R_VI_AU = "r_vi^au"
    R_VW_AU = "r_vw^au"
    R_IJ_AU = "r_ij^au"
    R_UI_AB = "r_ui^ab"
    R_WX_UV = "r_wx^uv"


class AdaptType(StrEnum):
    TYPE1 = "type1"
    TYPE2 = "type2"


class HermitianForm(StrEnum):
    ANTI_HERMITIAN = "antiHermitian"
    PLAIN = "plain"


# Orbital spaces of the upper (created) and lower (annihilated) indices.
CLASS_SPACES: dict[ExcitationClass, tuple[tuple[str, ...], tuple[str, ...]]] = {
    ExcitationClass.R_I_U: (("active",), ("inactive",)),
    ExcitationClass.R_I_A: (("virtual",), ("inactive",)),
    ExcitationClass.R_U_A: (("virtual",), ("active",)),
    ExcitationClass.R_V_U: (("active",), ("active",)),
    ExcitationClass.R_IJ_UV: (("active", "active"), ("inactive", "inactive")),
    ExcitationClass.R_IJ_AB: (("virtual", "virtual"), ("inactive", "inactive")),
    ExcitationClass.R_UV_AB: (("virtual", "virtual"), ("active", "active")),
    ExcitationClass.R_WI_UV: (("active", "active"), ("active", "inactive")),
    ExcitationClass.R_VI_AU: (("virtual", "active"), ("active", "inactive")),
    ExcitationClass.R_VW_AU: (("virtual", "active"), ("active", "active")),
    ExcitationClass.R_IJ_AU: (("virtual", "active"), ("inactive", "inactive")),
    ExcitationClass.R_UI_AB: (("virtual", "virtual"), ("active", "inactive")),
    ExcitationClass.R_WX_UV: (("active", "active"), ("active", "active")),
}
ACTIVE_ONLY_CLASSES = frozenset({ExcitationClass.R_V_U, ExcitationClass.R_WX_UV})
_CLASS_ORDER = {kind: position for position, kind in enumerate(ExcitationClass)}


@dataclass(frozen=True)
class ExcitationOp:
    """Spin-adapted excitation r = E or r = E − E† over spatial orbitals.

    Singles use E^p_q = Σσ a†_{pσ} a_{qσ}; doubles use the products
    E^{pq}_{rs} = E^p_r E^q_s ± E^p_s E^q_r (type1 +, type2 −). Expanded over spin
    orbitals, E^p_r E^q_s = Σστ a†_{pσ} a†_{qτ} a_{sτ} a_{rσ} + δ_{rq} E^p_s; the
    contraction term is zero unless r and q are the same orbital, which only the
    purely active classes allow.
    """

    kind: ExcitationClass
    upper: tuple[int, ...]
    lower: tuple[int, ...]
    adapt_type: AdaptType | None = None
    hermitian_form: HermitianForm = HermitianForm.ANTI_HERMITIAN

    def __post_init__(self):
        upper_spaces, lower_spaces = CLASS_SPACES[self.kind]
        if len(self.upper) != len(upper_spaces) or len(self.lower) != len(lower_spaces):
            raise OperatorError(f"{self.kind} takes {len(upper_spaces)} upper and {len(lower_spaces)} lower indices")
        if self.is_double and self.adapt_type is None:
            raise OperatorError(f"{self.kind} needs an adaptation type")
        if not self.is_double and self.adapt_type is not None:
            raise OperatorError("Single excitations carry no adaptation type")
        if self.adapt_type is AdaptType.TYPE2 and (self.upper[0] == self.upper[1] or self.lower[0] == self.lower[1]):
            raise OperatorError("type2 needs two distinct upper and two distinct lower orbitals")

    @property
    def is_double(self) -> bool:
        return len(self.upper) == 2

    @property
    def label(self) -> str:
        upper = ",".join(str(p) for p in self.upper)
        lower = ",".join(str(q) for q in self.lower)
        suffix = f" {self.adapt_type}" if self.adapt_type else ""
        return f"{self.kind}[{upper};{lower}]{suffix}"

    def sort_key(self) -> tuple:
        return (_CLASS_ORDER[self.kind], self.upper, self.lower, str(self.adapt_type or ""))


def validate_excitation(excitation: ExcitationOp, partition: OrbitalPartition):
    upper_spaces, lower_spaces = CLASS_SPACES[excitation.kind]
    for index, space in zip(excitation.upper + excitation.lower, upper_spaces + lower_spaces):
        if index not in getattr(partition, space):
            raise OperatorError(f"{excitation.label}: orbital {index} is not {space}")


def _pairs(first: Sequence[int], second: Sequence[int], same_space: bool) -> list[tuple[int, int]]:
    if same_space:
        return list(combinations_with_replacement(first, 2))
    return list(product(first, second))


def enumerate_excitations(partition: OrbitalPartition, restrict_3rdm: bool = True) -> list[ExcitationOp]:
    """All single and double excitation classes for ``partition``.

    With ``restrict_3rdm`` the purely active classes are left out and the
    remaining operators take the plain form r = E.
    """
    form = HermitianForm.PLAIN if restrict_3rdm else HermitianForm.ANTI_HERMITIAN
    excitations = []
    for kind, (upper_spaces, lower_spaces) in CLASS_SPACES.items():
        if restrict_3rdm and kind in ACTIVE_ONLY_CLASSES:
            continue
        upper_orbitals = [getattr(partition, space) for space in upper_spaces]
        lower_orbitals = [getattr(partition, space) for space in lower_spaces]

        if len(upper_spaces) == 1:
            for p, q in product(upper_orbitals[0], lower_orbitals[0]):
                if kind is ExcitationClass.R_V_U and p <= q:
                    continue
                excitations.append(ExcitationOp(kind, (p,), (q,), None, form))
            continue

        uppers = _pairs(*upper_orbitals, upper_spaces[0] == upper_spaces[1])
        lowers = _pairs(*lower_orbitals, lower_spaces[0] == lower_spaces[1])
        for upper, lower in product(uppers, lowers):
            if kind is ExcitationClass.R_WX_UV and upper <= lower:
                continue
            excitations.append(ExcitationOp(kind, upper, lower, AdaptType.TYPE1, form))
            if upper[0] != upper[1] and lower[0] != lower[1]:
                excitations.append(ExcitationOp(kind, upper, lower, AdaptType.TYPE2, form))
    return excitations


def excitation_terms(excitation: ExcitationOp) -> list[Term]:
    """Spin-orbital expansion of r over full-space modes 2p + σ."""
    terms: list[Term] = []
    if not excitation.is_double:
        (p,), (q,) = excitation.upper, excitation.lower
        terms = [(1.0, ((2 * p + spin, True), (2 * q + spin, False))) for spin in (0, 1)]
    else:
        (p, q), (r, s) = excitation.upper, excitation.lower
        exchange = 1.0 if excitation.adapt_type is AdaptType.TYPE1 else -1.0
        for first, second, weight in ((r, s, 1.0), (s, r, exchange)):
            for sigma, tau in product((0, 1), repeat=2):
                ops = (
                    (2 * p + sigma, True),
                    (2 * first + sigma, False),
                    (2 * q + tau, True),
                    (2 * second + tau, False),
                )
                terms.append((weight, ops))
    if excitation.hermitian_form is HermitianForm.ANTI_HERMITIAN:
        terms = terms + [(-np.conj(c), adjoint(ops)) for c, ops in terms]
    return terms


@dataclass
class Reference:
    """Reference state |Ψ0⟩ with the full-space Hamiltonian it is evaluated with.

    ``source`` supplies active-space RDM elements; ``state`` is the register
    statevector when it is available.
    """

    partition: OrbitalPartition
    n_electrons: int
    terms: list[Term]
    source: RdmSource
    state: Statevector | None = None

    def __post_init__(self):
        self.partition.active_electrons(self.n_electrons)
        if self.state is not None and self.state.n_qubits != 2 * self.partition.n_active:
            raise PartitionError(
                f"A {self.state.n_qubits}-qubit state does not fit {self.partition.n_active} active orbitals"
            )

    @classmethod
    def from_state(
        cls,
        integrals: IntegralSet,
        partition: OrbitalPartition,
        state: Statevector,
        terms: list[Term] | None = None,
    ) -> "Reference":
        terms = spin_orbital_terms(integrals) if terms is None else terms
        return cls(partition, integrals.n_electrons, terms, StatevectorRdms(state), state)

    @classmethod
    def from_rdms(
        cls,
        integrals: IntegralSet,
        partition: OrbitalPartition,
        rdms: Mapping[int, Rdm],
        terms: list[Term] | None = None,
        cumulant: bool = False,
    ) -> "Reference":
        """Reference read from stored RDMs; with ``cumulant`` the missing higher orders are expanded."""
        terms = spin_orbital_terms(integrals) if terms is None else terms
        n_active = partition.active_electrons(integrals.n_electrons)
        source = CumulantRdms(rdms, n_active) if cumulant else RdmSet(rdms, n_active)
        return cls(partition, integrals.n_electrons, terms, source)

    @property
    def active_modes(self) -> tuple[int, ...]:
        return tuple(self.partition.active_spin_orbitals())

    @cached_property
    def register(self) -> dict[int, int]:
        """Full-space active mode -> register qubit."""
        return {mode: qubit for qubit, mode in enumerate(self.active_modes)}

    @property
    def n_qubits(self) -> int:
        return 2 * self.partition.n_active

    @property
    def occupied_config(self) -> int:
        return sum(1 << mode for mode in self.partition.occupied_spin_orbitals())

    def active_count(self, config: int) -> int:
        """Register particle number paired with external configuration ``config``."""
        return self.n_electrons - config.bit_count()


def _factorize(ops: Ops, config: int, register: Mapping[int, int]) -> tuple[int, int, Ops] | None:
    """Act with ``ops`` on |config, φ⟩.

    Returns ``(sign, config_out, register_ops)`` with
    ops|config, φ⟩ = sign |config_out, register_ops φ⟩, or None when the
    external part annihilates the configuration.
    """
    sign = 1
    active: list[Op] = []
    for mode, dagger in reversed(ops):
        qubit = register.get(mode)
        if qubit is not None:
            if config.bit_count() & 1:
                sign = -sign
            active.append((qubit, dagger))
            continue
        bit = 1 << mode
        if bool(config & bit) == dagger:
            return None
        if (config & (bit - 1)).bit_count() & 1:
            sign = -sign
        config ^= bit
    return sign, config, tuple(reversed(active))


Factors = dict[int, dict[NormalKey, dict[int, complex]]]


def _factor_columns(columns: Sequence[Sequence[Term]], reference: Reference) -> Factors:
    """config -> register key -> column -> coefficient of r_column|Ψ0⟩."""
    factors: Factors = {}
    start = reference.occupied_config
    for column, terms in enumerate(columns):
        for coefficient, ops in terms:
            split = _factorize(tuple(ops), start, reference.register)
            if split is None:
                continue
            sign, config, active = split
            for key, value in normal_order(active):
                entry = factors.setdefault(config, {}).setdefault(key, {})
                entry[column] = entry.get(column, 0.0) + coefficient * sign * value
    for config in list(factors):
        keys = factors[config]
        for key in list(keys):
            keys[key] = {column: value for column, value in keys[key].items() if value != 0}
            if not keys[key]:
                del keys[key]
        if not keys:
            del factors[config]
    return factors


@dataclass
class EffectiveHamiltonian:
    """Hamiltonian folded onto the register between external configurations.

    ``groups`` holds register term lists sharing one external operator string;
    ``blocks[(c_out, c_in)]`` lists ``(group, sign)`` pairs so that the block
    operator is Σ sign · groups[group].
    """

    groups: list[list[Term]]
    creators: list[int]
    blocks: dict[tuple[int, int], list[tuple[int, int]]]


def fold_hamiltonian(terms: Iterable[Term], configs: Sequence[int], register: Mapping[int, int]) -> EffectiveHamiltonian:
    grouped: dict[Ops, list[Term]] = {}
    for coefficient, ops in canonical_terms(terms):
        external = tuple(op for op in ops if op[0] not in register)
        sign, created, active = 1, 0, []
        for mode, dagger in reversed(ops):
            qubit = register.get(mode)
            if qubit is None:
                created += 1 if dagger else -1
                continue
            if created & 1:
                sign = -sign
            active.append((qubit, dagger))
        grouped.setdefault(external, []).append((coefficient * sign, tuple(reversed(active))))

    ordered = np.array(sorted(configs), dtype=np.int64)
    parity = np.bitwise_count(ordered).astype(np.int64) & 1
    groups, creators = [], []
    blocks: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for external, group_terms in grouped.items():
        targets, signs = apply_ops(external, ordered)
        if len(external) & 1:
            signs = signs * (1 - 2 * parity)
        _, member = locate(ordered, targets)
        valid = np.flatnonzero(member & (signs != 0))
        if valid.size == 0:
            continue
        index = len(groups)
        groups.append(group_terms)
        creators.append(max(sum(1 for _, dagger in ops if dagger) for _, ops in group_terms))
        for position in valid:
            blocks.setdefault((int(targets[position]), int(ordered[position])), []).append(
                (index, int(signs[position]))
            )
    return EffectiveHamiltonian(groups, creators, blocks)


class StatevectorBackend:
    """Brackets from register vectors r|Ψ0⟩ grouped by external configuration."""

    def __init__(self, engine: "ContractionEngine"):
        reference = engine.reference
        if reference.state is None:
            raise OperatorError("The statevector backend needs the active state")
        self.engine = engine
        self.n_qubits = reference.n_qubits
        n_active = reference.partition.active_electrons(reference.n_electrons)
        self._bases: dict[int, np.ndarray] = {}
        amplitudes = reference.state.amplitudes
        full = self.basis(n_active)
        leaked = float(np.linalg.norm(amplitudes)) ** 2 - float(np.linalg.norm(amplitudes[full])) ** 2
        if leaked > 1e-10:
            logger.warning("Active state leaks out of its particle-number sector", extra={"weight": leaked})
        self.psi = amplitudes[full].astype(complex)
        self.n_active = n_active
        self._matrices: dict[tuple[int, int, int], sparse.csr_matrix] = {}

    def basis(self, n_particles: int) -> np.ndarray:
        if n_particles not in self._bases:
            self._bases[n_particles] = sector_basis(self.n_qubits, n_particles)
        return self._bases[n_particles]

    def _group_matrix(self, group: int, n_in: int, n_out: int) -> sparse.csr_matrix:
        key = (group, n_in, n_out)
        if key not in self._matrices:
            self._matrices[key] = operator_matrix(self.engine.hamiltonian.groups[group], self.basis(n_in), self.basis(n_out))
        return self._matrices[key]

    def _vectors(self, config: int, columns: Sequence[int] | None) -> tuple[list[int], np.ndarray] | None:
        keys = self.engine.factors.get(config, {})
        members = sorted({c for coefficients in keys.values() for c in coefficients if columns is None or c in columns})
        n_particles = self.engine.reference.active_count(config)
        if not members or not 0 <= n_particles <= self.n_qubits:
            return None
        slot = {column: position for position, column in enumerate(members)}
        basis_in, basis_out = self.basis(self.n_active), self.basis(n_particles)
        vectors = np.zeros((basis_out.size, len(members)), dtype=complex)
        for key, coefficients in keys.items():
            used = [(slot[c], value) for c, value in coefficients.items() if c in slot]
            if not used:
                continue
            phi = apply_terms([(1.0, key_to_ops(key))], basis_in, self.psi, basis_out)
            for position, value in used:
                vectors[:, position] += value * phi
        return members, vectors

    def matrices(self, ket_columns: Sequence[int] | None) -> tuple[np.ndarray, np.ndarray]:
        engine = self.engine
        n, m = engine.n_columns, engine.n_columns if ket_columns is None else len(ket_columns)
        ket_slot = {c: c for c in range(n)} if ket_columns is None else {c: i for i, c in enumerate(ket_columns)}
        overlap = np.zeros((n, m), dtype=complex)
        hamiltonian = np.zeros((n, m), dtype=complex)

        bras = {config: self._vectors(config, None) for config in engine.factors}
        kets = bras if ket_columns is None else {c: self._vectors(c, ket_columns) for c in engine.factors}
        for config, ket in kets.items():
            bra = bras[config]
            if bra is None or ket is None:
                continue
            rows, left = bra
            cols, right = ket
            overlap[np.ix_(rows, [ket_slot[c] for c in cols])] += left.conj().T @ right

        for (c_out, c_in), entries in engine.hamiltonian.blocks.items():
            bra, ket = bras.get(c_out), kets.get(c_in)
            if bra is None or ket is None:
                continue
            rows, left = bra
            cols, right = ket
            n_in = engine.reference.active_count(c_in)
            n_out = engine.reference.active_count(c_out)
            block = sum(sign * self._group_matrix(group, n_in, n_out) for group, sign in entries)
            hamiltonian[np.ix_(rows, [ket_slot[c] for c in cols])] += left.conj().T @ (block @ right)
        return overlap, hamiltonian


class RdmBackend:
    """Brackets by normal ordering register strings and reading RDM elements."""

    def __init__(self, engine: "ContractionEngine"):
        self.engine = engine
        self.source = engine.reference.source
        self._expectations: dict[Ops, complex] = {}

    def expectation(self, ops: Ops) -> complex:
        if ops not in self._expectations:
            total = 0.0
            for (creators, annihilators), sign in normal_order(ops):
                if len(creators) == len(annihilators):
                    total += sign * self.source.element(creators, annihilators)
            self._expectations[ops] = total
        return self._expectations[ops]

    def _factor_matrix(self, config: int, columns: Sequence[int] | None):
        keys = self.engine.factors.get(config, {})
        members = sorted({c for coefficients in keys.values() for c in coefficients if columns is None or c in columns})
        if not members:
            return None
        slot = {column: position for position, column in enumerate(members)}
        kept, rows = [], []
        for key, coefficients in keys.items():
            row = np.zeros(len(members), dtype=complex)
            for c, value in coefficients.items():
                if c in slot:
                    row[slot[c]] = value
            if np.any(row):
                kept.append(key_to_ops(key))
                rows.append(row)
        return members, kept, np.array(rows)

    def matrices(self, ket_columns: Sequence[int] | None) -> tuple[np.ndarray, np.ndarray]:
        engine = self.engine
        n, m = engine.n_columns, engine.n_columns if ket_columns is None else len(ket_columns)
        ket_slot = {c: c for c in range(n)} if ket_columns is None else {c: i for i, c in enumerate(ket_columns)}
        overlap = np.zeros((n, m), dtype=complex)
        hamiltonian = np.zeros((n, m), dtype=complex)

        bras = {config: self._factor_matrix(config, None) for config in engine.factors}
        kets = bras if ket_columns is None else {c: self._factor_matrix(c, ket_columns) for c in engine.factors}
        for config, ket in kets.items():
            bra = bras[config]
            if bra is None or ket is None:
                continue
            rows, left_ops, left = bra
            cols, right_ops, right = ket
            gram = np.array([[self.expectation(adjoint(a) + b) for b in right_ops] for a in left_ops])
            overlap[np.ix_(rows, [ket_slot[c] for c in cols])] += left.conj().T @ gram @ right

        for (c_out, c_in), entries in engine.hamiltonian.blocks.items():
            bra, ket = bras.get(c_out), kets.get(c_in)
            if bra is None or ket is None:
                continue
            rows, left_ops, left = bra
            cols, right_ops, right = ket
            gram = np.zeros((len(left_ops), len(right_ops)), dtype=complex)
            for group, sign in entries:
                for coefficient, ops in engine.hamiltonian.groups[group]:
                    for i, a in enumerate(left_ops):
                        for j, b in enumerate(right_ops):
                            gram[i, j] += sign * coefficient * self.expectation(adjoint(a) + ops + b)
            hamiltonian[np.ix_(rows, [ket_slot[c] for c in cols])] += left.conj().T @ gram @ right
        return overlap, hamiltonian


class ContractionEngine:
    """Overlap and Hamiltonian brackets between r_j|Ψ0⟩ for a list of term lists."""

    def __init__(self, reference: Reference, columns: Sequence[Sequence[Term]], backend: Backend = "auto"):
        self.reference = reference
        self.columns = list(columns)
        self.factors = _factor_columns(self.columns, reference)
        self.hamiltonian = fold_hamiltonian(reference.terms, list(self.factors), reference.register)
        if backend == "auto":
            backend = "statevector" if reference.state is not None else "rdm"
        self.backend_name = backend
        self.backend = StatevectorBackend(self) if backend == "statevector" else RdmBackend(self)
        self.last_rdm_order = 0

    @property
    def n_columns(self) -> int:
        return len(self.columns)

    @cached_property
    def column_configs(self) -> dict[int, set[int]]:
        """column -> external configurations its vector touches."""
        touched: dict[int, set[int]] = {}
        for config, keys in self.factors.items():
            for coefficients in keys.values():
                for column in coefficients:
                    touched.setdefault(column, set()).add(config)
        return touched

    def structural_rdm_order(self, ket_columns: Sequence[int] | None = None) -> int:
        """Highest RDM order the brackets can reach, from operator ranks alone."""

        def ranks(config: int, columns) -> tuple[int, int] | None:
            keys = [key for key, c in self.factors.get(config, {}).items() if columns is None or set(c) & set(columns)]
            if not keys:
                return None
            return max(len(key[1]) for key in keys), max(len(key[0]) for key in keys)

        order = 0
        for config in self.factors:
            bra, ket = ranks(config, None), ranks(config, ket_columns)
            if bra and ket:
                order = max(order, bra[0] + ket[1])
        for (c_out, c_in), entries in self.hamiltonian.blocks.items():
            bra, ket = ranks(c_out, None), ranks(c_in, ket_columns)
            if bra and ket:
                order = max(order, bra[0] + max(self.hamiltonian.creators[g] for g, _ in entries) + ket[1])
        return order

    def matrices(self, ket_columns: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(S, H) with rows over all columns and columns over ``ket_columns``."""
        before = dict(getattr(self.reference.source, "access_counts", {}))
        overlap, hamiltonian = self.backend.matrices(ket_columns)
        if self.backend_name == "rdm":
            after = self.reference.source.access_counts
            touched = [order for order, count in after.items() if count > before.get(order, 0)]
            self.last_rdm_order = max(touched, default=0)
        else:
            self.last_rdm_order = self.structural_rdm_order(ket_columns)
        return overlap, hamiltonian


IDENTITY: list[Term] = [(1.0, ())]


def _excitation_or_identity(excitation: ExcitationOp | None, partition: OrbitalPartition) -> list[Term]:
    if excitation is None:
        return IDENTITY
    validate_excitation(excitation, partition)
    return excitation_terms(excitation)


def bracket(
    bra: Sequence[Term], ket: Sequence[Term], reference: Reference, backend: Backend = "auto"
) -> tuple[complex, complex]:
    """(⟨Ψ0|B†K|Ψ0⟩, ⟨Ψ0|B† H K|Ψ0⟩) through the contraction engine."""
    engine = ContractionEngine(reference, [bra, ket], backend)
    overlap, hamiltonian = engine.matrices(ket_columns=[1])
    return complex(overlap[0, 0]), complex(hamiltonian[0, 0])


def matrix_element(
    mu: ExcitationOp | None, nu: ExcitationOp | None, reference: Reference, backend: Backend = "auto"
) -> complex:
    """⟨Ψ0|r_μ† H r_ν|Ψ0⟩; None stands for the identity."""
    bra = _excitation_or_identity(mu, reference.partition)
    ket = _excitation_or_identity(nu, reference.partition)
    return bracket(bra, ket, reference, backend)[1]


def overlap_element(
    mu: ExcitationOp | None, nu: ExcitationOp | None, reference: Reference, backend: Backend = "auto"
) -> complex:
    bra = _excitation_or_identity(mu, reference.partition)
    ket = _excitation_or_identity(nu, reference.partition)
    return bracket(bra, ket, reference, backend)[0]


def _embedding_sign(active_modes: Sequence[int], occupied: Sequence[int], bits: int) -> int:
    sequence = list(occupied) + [active_modes[q] for q in range(len(active_modes)) if bits >> q & 1]
    return permutation_sign(sequence)


def embed_reference(reference: Reference) -> tuple[np.ndarray, np.ndarray]:
    """|Ψ0⟩ on the full N-electron determinant sector: (basis, amplitudes)."""
    if reference.state is None:
        raise OperatorError("The full-space reference needs the active state")
    n_modes = 2 * reference.partition.n_orbitals
    dimension = comb(n_modes, reference.n_electrons)
    if n_modes > MAX_BRUTE_MODES or dimension > MAX_BRUTE_DIMENSION:
        raise RegisterTooLargeError(f"A {dimension}-determinant sector over {n_modes} spin orbitals is too large")

    basis = sector_basis(n_modes, reference.n_electrons)
    occupied = reference.partition.occupied_spin_orbitals()
    start = reference.occupied_config
    psi = np.zeros(basis.size, dtype=complex)
    amplitudes = reference.state.amplitudes
    active_modes = reference.active_modes
    for bits in np.flatnonzero(amplitudes):
        determinant = start
        for qubit in range(reference.n_qubits):
            if bits >> qubit & 1:
                determinant |= 1 << active_modes[qubit]
        position, member = locate(basis, np.array([determinant], dtype=np.int64))
        if not member[0]:
            raise OperatorError("The active state has the wrong particle number")
        psi[position[0]] += _embedding_sign(active_modes, occupied, int(bits)) * amplitudes[bits]
    return basis, psi


def brute_bracket(bra: Sequence[Term], ket: Sequence[Term], reference: Reference) -> tuple[complex, complex]:
    """Same brackets as :func:`bracket`, evaluated on the explicit full-space state."""
    basis, psi = embed_reference(reference)
    left = apply_terms(canonical_terms(bra), basis, psi)
    right = apply_terms(canonical_terms(ket), basis, psi)
    h_right = apply_terms(canonical_terms(reference.terms), basis, right)
    return complex(np.vdot(left, right)), complex(np.vdot(left, h_right))


def brute_matrix_element(mu: ExcitationOp | None, nu: ExcitationOp | None, reference: Reference) -> complex:
    bra = _excitation_or_identity(mu, reference.partition)
    ket = _excitation_or_identity(nu, reference.partition)
    return brute_bracket(bra, ket, reference)[1]


def brute_overlap(mu: ExcitationOp | None, nu: ExcitationOp | None, reference: Reference) -> complex:
    bra = _excitation_or_identity(mu, reference.partition)
    ket = _excitation_or_identity(nu, reference.partition)
    return brute_bracket(bra, ket, reference)[0]


def two_body_tensor(terms: Iterable[Term], n_modes: int) -> np.ndarray:
    """Dense h with Σ c a†P a†Q a_R a_S = ½ Σ h_PQRS a†P a†Q a_R a_S over the listed strings."""
    tensor = np.zeros((n_modes,) * 4, dtype=complex)
    for coefficient, ops in terms:
        if len(ops) == 4 and [dagger for _, dagger in ops] == [True, True, False, False]:
            tensor[tuple(mode for mode, _ in ops)] += 2.0 * coefficient
    return tensor


def _unreversed(tensor: np.ndarray) -> np.ndarray:
    """RDM tensor read with annihilators in written order, a_q1…a_qk."""
    k = tensor.ndim // 2
    return tensor * (-1) ** (k * (k - 1) // 2)


def active_double_coupling(h: np.ndarray, tensors: Mapping[int, np.ndarray], active_modes, u, v, w, x) -> complex:
    """⟨Ψ0|(E − E†)† V|Ψ0⟩ for E = a†u a†v a_w a_x with V over active indices only.

    Register indices ``u, v, w, x``; ``h`` is indexed by full-space modes.
    """
    d2, d3, d4 = tensors[2], tensors[3], tensors[4]
    n = len(active_modes)
    delta = np.eye(n)
    total = 0.0
    for y, z, t, m in product(range(n), repeat=4):
        value = h[active_modes[y], active_modes[z], active_modes[t], active_modes[m]]
        if value == 0:
            continue
        total += value * (
            (delta[u, y] * delta[v, z] - delta[v, y] * delta[u, z]) * d2[x, w, m, t]
            - 3 * delta[u, y] * d3[x, w, z, m, t, v]
            + 3 * delta[v, y] * d3[x, w, z, m, t, u]
            + 3 * delta[u, z] * d3[x, w, y, m, t, v]
            - 3 * delta[z, v] * d3[x, w, y, m, t, u]
            + 12 * d4[x, w, y, z, m, t, u, v]
            - (delta[x, y] * delta[w, z] - delta[w, y] * delta[x, z]) * d2[u, v, m, t]
            + 3 * delta[x, y] * d3[u, v, z, m, t, w]
            - 3 * delta[w, y] * d3[u, v, z, m, t, x]
            - 3 * delta[x, z] * d3[u, v, y, m, t, w]
            + 3 * delta[z, w] * d3[u, v, y, m, t, x]
            - 12 * d4[u, v, y, z, m, t, x, w]
        )
    return complex(total)


def semi_internal_coupling(h: np.ndarray, tensors: Mapping[int, np.ndarray], active_modes, u, v, w, i) -> complex:
    """⟨Ψ0|(a†u a†v a_w a_i)† V|Ψ0⟩ for inactive mode ``i``, V over x, y, z active."""
    d1, d2, d3 = (_unreversed(tensors[k]) for k in (1, 2, 3))
    n = len(active_modes)
    delta = np.eye(n)
    total = 0.0
    for x, y, z in product(range(n), repeat=3):
        mx, my, mz = active_modes[x], active_modes[y], active_modes[z]
        value = h[mx, my, mz, i] - h[mx, my, i, mz]
        if value == 0:
            continue
        total += value * (
            0.5 * (delta[u, x] * delta[v, y] - delta[v, x] * delta[u, y]) * d1[w, z]
            - delta[u, x] * d2[w, y, v, z]
            + delta[v, x] * d2[w, y, u, z]
            + delta[u, y] * d2[w, x, v, z]
            - delta[v, y] * d2[w, x, u, z]
            + 3 * d3[w, x, y, v, u, z]
        )
    return complex(total)


def external_active_coupling(h: np.ndarray, tensors: Mapping[int, np.ndarray], active_modes, a, u, v, w) -> complex:
    """⟨Ψ0|(a†a a†u a_v a_w)† V|Ψ0⟩ for virtual mode ``a``, V over x, y, z active."""
    d2, d3 = _unreversed(tensors[2]), _unreversed(tensors[3])
    n = len(active_modes)
    total = 0.0
    for x, y, z in product(range(n), repeat=3):
        mx, my, mz = active_modes[x], active_modes[y], active_modes[z]
        value = h[a, mx, my, mz] - h[mx, a, my, mz]
        if value == 0:
            continue
        total += value * ((1.0 if u == x else 0.0) * d2[w, v, y, z] - 3 * d3[w, v, x, u, y, z])
    return complex(total)


@dataclass
class OrthonormalBasis:
    transform: np.ndarray
    labels: list[int]
    dropped: int
    full_rank: bool


def orthonormalize(overlap: np.ndarray, cutoff: float = OVERLAP_CUTOFF) -> OrthonormalBasis:
    """X with X† S X = 1 on the directions whose overlap eigenvalue reaches ``cutoff``.

    A full-rank block gets the symmetric transform S^{-1/2}, which keeps one
    direction per input vector; otherwise X = U_kept λ^{-1/2} and every
    direction is labeled by its dominant input vector.
    """
    overlap = np.asarray(overlap, dtype=complex)
    if not np.allclose(overlap, overlap.conj().T, atol=HERMITICITY_TOLERANCE):
        raise OperatorError("Overlap matrix is not Hermitian")
    values, vectors = np.linalg.eigh(0.5 * (overlap + overlap.conj().T))
    keep = values >= cutoff
    if not np.any(keep):
        raise OrthonormalizationError(f"Every overlap eigenvalue lies below {cutoff:g}")
    if np.all(keep):
        transform = vectors @ np.diag(values ** -0.5) @ vectors.conj().T
        return OrthonormalBasis(transform, list(range(overlap.shape[0])), 0, True)
    kept = vectors[:, keep]
    transform = kept / np.sqrt(values[keep])
    labels = [int(np.argmax(np.abs(kept[:, j]))) for j in range(kept.shape[1])]
    return OrthonormalBasis(transform, labels, int(np.count_nonzero(~keep)), False)


@dataclass
class Subspace:
    """Perturber space built from the excitations applied to |Ψ0⟩.

    ``overlap`` and ``raw_hamiltonian`` are over the excitation vectors after
    projecting out |Ψ0⟩; ``hamiltonian`` and ``coupling`` are in the
    orthonormal basis given by the columns of ``transform``.
    """

    excitations: list[ExcitationOp]
    overlap: np.ndarray
    raw_hamiltonian: np.ndarray
    raw_coupling: np.ndarray
    transform: np.ndarray
    labels: list[int]
    hamiltonian: np.ndarray
    coupling: np.ndarray
    reference_overlaps: np.ndarray
    e_reference: float
    null_excitations: list[int] = field(default_factory=list)
    dropped_directions: int = 0
    blocks: list[list[int]] = field(default_factory=list)
    rdm_order_used: int = 0
    max_rdm_order_zeroth: int = 0

    @property
    def dimension(self) -> int:
        return self.transform.shape[1]

    def raw_diagonal(self, direction: int) -> float:
        mu = self.labels[direction]
        return float(self.raw_hamiltonian[mu, mu].real / self.overlap[mu, mu].real)


def _hermitian_part(matrix: np.ndarray, name: str) -> np.ndarray:
    scale = max(1.0, float(np.abs(matrix).max(initial=0.0)))
    if not np.allclose(matrix, matrix.conj().T, atol=HERMITICITY_TOLERANCE * scale):
        raise OperatorError(f"{name} matrix is not Hermitian")
    return 0.5 * (matrix + matrix.conj().T)


def build_subspace(
    reference: Reference,
    excitations: Sequence[ExcitationOp],
    overlap_cutoff: float = OVERLAP_CUTOFF,
    backend: Backend = "auto",
) -> Subspace:
    excitations = sorted(excitations, key=lambda excitation: excitation.sort_key())
    for excitation in excitations:
        validate_excitation(excitation, reference.partition)
    columns = [IDENTITY] + [excitation_terms(excitation) for excitation in excitations]
    engine = ContractionEngine(reference, columns, backend)

    if engine.backend_name == "rdm":
        engine.matrices(ket_columns=[0])
        coupling_order = engine.last_rdm_order
    else:
        coupling_order = engine.structural_rdm_order([0])
    overlap, hamiltonian = engine.matrices()
    zeroth_order = engine.last_rdm_order
    overlap = _hermitian_part(overlap, "Overlap")
    hamiltonian = _hermitian_part(hamiltonian, "Hamiltonian")

    norm = overlap[0, 0].real
    if norm < NEGLIGIBLE_NUMERATOR:
        raise OperatorError("The reference state has zero norm")
    project = np.eye(len(columns), dtype=complex)
    project[0, 1:] = -overlap[0, 1:] / norm
    overlap = project.conj().T @ overlap @ project
    hamiltonian = project.conj().T @ hamiltonian @ project
    e_reference = float(hamiltonian[0, 0].real / norm)

    s_x, h_x = overlap[1:, 1:], hamiltonian[1:, 1:]
    norms = np.real(np.diag(s_x))
    live = [mu for mu in range(len(excitations)) if norms[mu] >= overlap_cutoff]
    null = [mu for mu in range(len(excitations)) if norms[mu] < overlap_cutoff]

    config_index = {config: position for position, config in enumerate(engine.factors)}
    rows, cols = [], []
    for row, mu in enumerate(live):
        for config in engine.column_configs.get(mu + 1, ()):
            rows.append(row)
            cols.append(config_index[config])
    incidence = sparse.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(len(live), max(len(config_index), 1))
    )
    n_blocks, block_of = (0, np.zeros(0, dtype=int)) if not live else connected_components(
        incidence @ incidence.T, directed=False
    )

    transform_columns, labels, blocks, dropped = [], [], [], 0
    for block in range(n_blocks):
        members = [live[row] for row in np.flatnonzero(block_of == block)]
        blocks.append(members)
        basis = orthonormalize(s_x[np.ix_(members, members)], overlap_cutoff)
        dropped += basis.dropped
        for j in range(basis.transform.shape[1]):
            column = np.zeros(len(excitations), dtype=complex)
            column[members] = basis.transform[:, j]
            transform_columns.append(column)
            labels.append(members[basis.labels[j]])

    transform = np.array(transform_columns).T if transform_columns else np.zeros((len(excitations), 0), dtype=complex)
    h_bar = _hermitian_part(transform.conj().T @ h_x @ transform, "Orthonormal Hamiltonian")
    subspace = Subspace(
        excitations=excitations,
        overlap=s_x,
        raw_hamiltonian=h_x,
        raw_coupling=hamiltonian[1:, 0],
        transform=transform,
        labels=labels,
        hamiltonian=h_bar,
        coupling=transform.conj().T @ hamiltonian[1:, 0],
        reference_overlaps=transform.conj().T @ overlap[1:, 0],
        e_reference=e_reference,
        null_excitations=null,
        dropped_directions=dropped,
        blocks=blocks,
        rdm_order_used=coupling_order,
        max_rdm_order_zeroth=zeroth_order,
    )
    logger.info(
        "Built perturber subspace",
        extra={
            "excitations": len(excitations),
            "directions": subspace.dimension,
            "blocks": len(blocks),
            "null_excitations": len(null),
            "dropped_directions": dropped,
            "rdm_order_used": coupling_order,
            "backend": engine.backend_name,
        },
    )
    return subspace


@dataclass(frozen=True)
class PtTerm:
    excitation: ExcitationOp
    direction: int
    numerator: float
    denominator: float
    weight: float


@dataclass
class PtReport:
    e_vqe: float
    terms: list[PtTerm]
    e1: float = 0.0
    rdm_order_used: int = 0
    max_rdm_order_zeroth: int = 0
    skipped: list[PtTerm] = field(default_factory=list)

    @property
    def e2(self) -> float:
        return fsum(term.weight for term in self.terms)

    @property
    def e0(self) -> float:
        return self.e_vqe + self.e2

    def to_record(self) -> PtReportRecord:
        return PtReportRecord(
            e_vqe=self.e_vqe,
            e1=self.e1,
            e2=self.e2,
            e0=self.e0,
            rdm_order_used=self.rdm_order_used,
            max_rdm_order_zeroth=self.max_rdm_order_zeroth,
            terms=[
                PtTermRecord(
                    kind=str(term.excitation.kind),
                    upper=list(term.excitation.upper),
                    lower=list(term.excitation.lower),
                    adapt_type=str(term.excitation.adapt_type) if term.excitation.adapt_type else None,
                    numerator=term.numerator,
                    denominator=term.denominator,
                    weight=term.weight,
                )
                for term in self.terms
            ],
        )


def _degenerate_groups(diagonals: np.ndarray) -> list[list[int]]:
    """Directions whose zeroth-order energies agree within DEGENERACY_TOLERANCE."""
    groups: list[list[int]] = []
    for k in np.argsort(diagonals, kind="stable"):
        if groups and diagonals[k] - diagonals[groups[-1][0]] <= DEGENERACY_TOLERANCE * max(1.0, abs(diagonals[k])):
            groups[-1].append(int(k))
        else:
            groups.append([int(k)])
    return groups


def pt2(
    subspace: Subspace,
    orthonormal_diagonals: bool = True,
    intruder_tolerance: float = INTRUDER_TOLERANCE,
) -> PtReport:
    """E0 = E_VQE + Σ |⟨Ψ_μ|H|Ψ0⟩|² / (E_VQE − E_μ) over the orthonormal perturbers.

    Directions with degenerate E_μ share one denominator; the intruder check
    uses the summed numerator of the group, which does not depend on the basis
    chosen inside that eigenspace.
    """
    e_vqe = subspace.e_reference
    diagonals = np.real(np.diag(subspace.hamiltonian))
    if not orthonormal_diagonals:
        diagonals = np.array([subspace.raw_diagonal(k) for k in range(subspace.dimension)])

    terms, skipped = [], []
    for group in _degenerate_groups(diagonals):
        denominator = float(e_vqe - fsum(float(diagonals[k]) for k in group) / len(group))
        numerators = [float(abs(subspace.coupling[k]) ** 2) for k in group]
        excitations = [subspace.excitations[subspace.labels[k]] for k in group]
        if abs(denominator) < intruder_tolerance:
            total = fsum(numerators)
            if total < NEGLIGIBLE_NUMERATOR:
                skipped.extend(
                    PtTerm(excitation, k, numerator, denominator, 0.0)
                    for excitation, k, numerator in zip(excitations, group, numerators)
                )
                logger.warning(
                    "Skipping degenerate perturber",
                    extra={"excitation": excitations[0].label, "directions": len(group), "numerator": total},
                )
                continue
            raise IntruderStateError(
                f"{excitations[0].label}: denominator {denominator:.3e} with numerator {total:.3e}"
                + (f" over {len(group)} degenerate directions" if len(group) > 1 else "")
            )
        terms.extend(
            PtTerm(excitation, k, numerator, denominator, numerator / denominator)
            for excitation, k, numerator in zip(excitations, group, numerators)
        )
    terms.sort(key=lambda term: term.direction)
    skipped.sort(key=lambda term: term.direction)

    e1 = -fsum(float(diagonals[k] * abs(subspace.reference_overlaps[k]) ** 2) for k in range(subspace.dimension))
    report = PtReport(
        e_vqe=e_vqe,
        terms=terms,
        e1=e1,
        rdm_order_used=subspace.rdm_order_used,
        max_rdm_order_zeroth=subspace.max_rdm_order_zeroth,
        skipped=skipped,
    )
    logger.info("Second-order correction", extra={"e_vqe": e_vqe, "e2": report.e2, "terms": len(terms)})
    return report


def _screen_order(term: PtTerm) -> tuple:
    return (-abs(term.weight),) + term.excitation.sort_key()


def screened_terms(report: PtReport, threshold: float) -> list[PtTerm]:
    kept = [term for term in report.terms if abs(term.weight) >= threshold]
    return sorted(kept, key=_screen_order)


def screen(report: PtReport, threshold: float) -> list[ExcitationOp]:
    """Excitations with |W_μ| ≥ ``threshold``, largest contribution first."""
    excitations: list[ExcitationOp] = []
    seen = set()
    for term in screened_terms(report, threshold):
        if term.excitation not in seen:
            seen.add(term.excitation)
            excitations.append(term.excitation)
    return excitations


def screened_energy(report: PtReport, threshold: float) -> float:
    return report.e_vqe + fsum(term.weight for term in screened_terms(report, threshold))


@dataclass
class SubspaceSolution:
    e0: float
    d: np.ndarray
    residual: float


def subspace_solve(subspace: Subspace) -> SubspaceSolution:
    """Lowest eigenpair of H in the basis {|Ψ0⟩, |Ψ_μ⟩}."""
    size = subspace.dimension + 1
    matrix = np.zeros((size, size), dtype=complex)
    matrix[0, 0] = subspace.e_reference
    matrix[1:, 0] = subspace.coupling
    matrix[0, 1:] = subspace.coupling.conj()
    matrix[1:, 1:] = subspace.hamiltonian
    try:
        values, vectors = np.linalg.eigh(matrix)
    except np.linalg.LinAlgError as exc:
        raise OperatorError(f"Subspace diagonalization failed: {exc}") from exc
    d = vectors[:, 0] / np.linalg.norm(vectors[:, 0])
    residual = float(np.linalg.norm(matrix @ d - values[0] * d))
    return SubspaceSolution(float(values[0]), d, residual)
