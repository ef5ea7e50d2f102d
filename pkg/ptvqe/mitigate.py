"""Symmetry verification and N-representability repair of measured RDMs.

The 2-RDM is handled here as the real symmetric pair matrix
T[(pq),(rs)] = ⟨a†p a†q a_s a_r⟩ over p < q, r < s, whose trace is N(N−1)/2.
It relates to the stored :class:`~ptvqe.rdm.Rdm` by a factor of two.
"""

import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from math import sqrt
from typing import Literal

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import factorized

from .errors import OperatorError, SymmetryError
from .integrals import ActiveHamiltonian, spin_orbital_terms
from .qsim import PauliString, PauliSum, counts_to_arrays
from .rdm import Rdm, increasing_tuples
from .schemas import MitigationReport

logger = logging.getLogger(__name__)

COMMUTATOR_TOLERANCE = 1e-10
SECTOR_WEIGHT_TOLERANCE = 1e-9
DISPLACEMENT_TOLERANCE = 1e-9
MAX_SWEEPS = 5000
POSITIVITY_TOLERANCE = 1e-10
ENERGY_ITERATIONS = 50
ENERGY_STEP = 0.05

ReconstructMode = Literal["nearest", "energy_min"]


@dataclass(frozen=True)
class SymmetrySpec:
    """A Pauli symmetry S with S² = 1 and the sector s it should have."""

    operator: PauliString
    sector: int

    def __post_init__(self):
        if self.sector not in (1, -1):
            raise SymmetryError("The symmetry sector must be +1 or -1")
        if self.operator.phase not in (1, -1):
            raise SymmetryError("The symmetry operator must square to the identity")

    @classmethod
    def parity(cls, n_qubits: int, n_electrons: int) -> "SymmetrySpec":
        """Z on every qubit, whose eigenvalue is (−1)^N."""
        return cls(PauliString(n_qubits, 0, (1 << n_qubits) - 1), 1 if n_electrons % 2 == 0 else -1)

    @property
    def is_diagonal(self) -> bool:
        return self.operator.is_diagonal

    def check_commutes(self, hamiltonian: PauliSum, tolerance: float = COMMUTATOR_TOLERANCE) -> float:
        symmetry = PauliSum(hamiltonian.n_qubits, {self.operator: 1.0})
        norm = (hamiltonian * symmetry - symmetry * hamiltonian).norm()
        if norm >= tolerance:
            raise SymmetryError(f"The Hamiltonian does not commute with {self.operator} (norm {norm:.3g})")
        return norm

    def eigenvalue(self, outcomes: np.ndarray) -> np.ndarray:
        """Eigenvalue of a diagonal symmetry on integer-encoded basis states."""
        parity = np.bitwise_count(outcomes & self.operator.z).astype(np.int64) & 1
        return self.operator.phase.real * (1 - 2 * parity)


def sv_expectation(p: float, ps: float, s_expectation: float, sector: int) -> float:
    """(⟨P⟩ + s⟨PS⟩) / (1 + s⟨S⟩), the expectation of P projected onto sector s."""
    denominator = 1.0 + sector * s_expectation
    if abs(denominator) <= SECTOR_WEIGHT_TOLERANCE:
        raise SymmetryError("The measured weight of the symmetry sector vanishes")
    return float((p + sector * ps) / denominator)


def sv_postselect(
    counts: Mapping[str, float], symmetry: SymmetrySpec, basis: str | None = None
) -> tuple[dict[str, float], float]:
    """Drop outcomes outside the symmetry sector; returns (counts, retained fraction)."""
    if not symmetry.is_diagonal:
        raise SymmetryError("Post-selection needs a symmetry that is diagonal in the computational basis")
    if basis is not None:
        for qubit in range(symmetry.operator.n_qubits):
            if (symmetry.operator.z >> qubit) & 1 and basis[qubit] != "Z":
                raise SymmetryError(f"The symmetry is not diagonal in the measured basis {basis}")

    outcomes, weights = counts_to_arrays(counts)
    total = weights.sum()
    if total <= 0:
        raise SymmetryError("No shots to post-select")
    keep = symmetry.eigenvalue(outcomes) == symmetry.sector
    if not keep.any():
        raise SymmetryError("Post-selection retained no shots")
    retained = {bits: value for bits, value, kept in zip(counts, counts.values(), keep) if kept}
    return retained, float(weights[keep].sum() / total)


def augment_with_symmetry(strings: Iterable[PauliString], symmetry: SymmetrySpec) -> list[PauliString]:
    """Strings P together with P·S and S, all without phase."""
    augmented = {symmetry.operator.unsigned()}
    for string in strings:
        augmented.add(string.unsigned())
        product = string.unsigned() * symmetry.operator
        if not product.is_identity:
            augmented.add(product.unsigned())
    augmented.discard(PauliString.identity(symmetry.operator.n_qubits))
    return sorted(augmented, key=lambda s: s.letters)


def verified_expectations(
    estimates: Mapping[PauliString, float], strings: Iterable[PauliString], symmetry: SymmetrySpec
) -> dict[PauliString, float]:
    """Symmetry-verified expectations for every requested string.

    ``estimates`` must hold the phase-free strings of P, P·S and S. Strings
    that anticommute with S have no component inside one sector and read 0.
    """
    s_expectation = symmetry.operator.phase.real * estimates[symmetry.operator.unsigned()]
    verified = {}
    for string in strings:
        string = string.unsigned()
        if not string.commutes_with(symmetry.operator):
            verified[string] = 0.0
            continue
        product = string * symmetry.operator
        ps = product.phase if product.is_identity else product.phase * estimates[product.unsigned()]
        verified[string] = sv_expectation(estimates[string], complex(ps).real, s_expectation, symmetry.sector)
    return verified


def _pair_index(n_modes: int) -> tuple[np.ndarray, np.ndarray]:
    tuples = np.array(increasing_tuples(n_modes, 2), dtype=np.int64).reshape(-1, 2)
    return tuples[:, 0], tuples[:, 1]


def _restrict_to_pairs(tensor: np.ndarray, n_modes: int) -> np.ndarray:
    first, second = _pair_index(n_modes)
    return tensor[first[:, None], second[:, None], first[None, :], second[None, :]]


def _lift(pair_matrix: np.ndarray, n_electrons: float, n_modes: int) -> dict[str, np.ndarray]:
    r = n_modes
    t = Rdm(2, r, pair_matrix).to_tensor().real
    eye = np.eye(r)
    d1 = np.einsum("pqrq->pr", t) / (n_electrons - 1)
    q4 = (
        np.einsum("pr,qs->pqrs", eye, eye)
        - np.einsum("ps,qr->pqrs", eye, eye)
        - np.einsum("qs,rp->pqrs", eye, d1)
        + np.einsum("ps,rq->pqrs", eye, d1)
        + np.einsum("qr,sp->pqrs", eye, d1)
        - np.einsum("pr,sq->pqrs", eye, d1)
        + t.transpose(2, 3, 0, 1)
    )
    g4 = np.einsum("qs,pr->pqrs", eye, d1) - t.transpose(0, 3, 2, 1)
    return {
        "d2": pair_matrix,
        "q2": _restrict_to_pairs(q4, r),
        "g2": g4.reshape(r * r, r * r),
        "d1": d1,
        "q1": eye - d1.T,
        "q4": q4,
    }


@dataclass
class PositivityBundle:
    """Particle, hole and particle-hole matrices derived from one 2-RDM."""

    d2: np.ndarray
    q2: np.ndarray
    g2: np.ndarray
    d1: np.ndarray
    q1: np.ndarray
    n_electrons: float
    n_modes: int
    q4: np.ndarray | None = None

    def min_eigenvalues(self) -> dict[str, float]:
        return {
            name: float(np.linalg.eigvalsh(getattr(self, name))[0]) if getattr(self, name).size else 0.0
            for name in ("d2", "q2", "g2", "d1", "q1")
        }

    def is_positive(self, tolerance: float = POSITIVITY_TOLERANCE) -> bool:
        return all(value >= -tolerance for value in self.min_eigenvalues().values())

    def hole_contraction(self) -> np.ndarray:
        """¹Q from ²Q by the partial trace, defined when r − N − 1 ≠ 0."""
        holes = self.n_modes - self.n_electrons - 1
        if abs(holes) < 1e-12:
            raise OperatorError("The hole contraction is undefined for N = r − 1")
        return np.einsum("pqrq->pr", self.q4) / holes

    def to_rdm(self) -> Rdm:
        return Rdm(2, self.n_modes, self.d2 / 2.0, self.n_electrons)


def _as_pair_matrix(d2: Rdm | np.ndarray) -> np.ndarray:
    matrix = 2.0 * d2.matrix if isinstance(d2, Rdm) else np.asarray(d2)
    return ((matrix + matrix.conj().T) / 2.0).real


def build_bundle(d2: Rdm | np.ndarray, n_electrons: float, n_modes: int | None = None) -> PositivityBundle:
    """Derive ²Q, ²G, ¹D and ¹Q from a Hermitian-symmetrized 2-RDM."""
    pair_matrix = _as_pair_matrix(d2)
    if n_modes is None:
        n_modes = d2.n_modes if isinstance(d2, Rdm) else int(round((1 + sqrt(1 + 8 * pair_matrix.shape[0])) / 2))
    if n_electrons < 2:
        raise OperatorError("A 2-RDM bundle needs at least two electrons")
    expected = len(increasing_tuples(n_modes, 2))
    if pair_matrix.shape != (expected, expected):
        raise OperatorError(f"A 2-RDM on {n_modes} modes needs a {expected}x{expected} matrix")
    blocks = _lift(pair_matrix, n_electrons, n_modes)
    return PositivityBundle(n_electrons=n_electrons, n_modes=n_modes, **blocks)


class _AffineSet:
    """Lifted points (²D, ²Q, ²G) tied by the linear maps and the trace condition."""

    def __init__(self, n_electrons: float, n_modes: int):
        self.n_electrons = n_electrons
        self.n_modes = n_modes
        m = len(increasing_tuples(n_modes, 2))
        self.size = m
        rows, cols = np.triu_indices(m)
        self.rows, self.cols = rows, cols

        self.offset = self.flatten(_lift(np.zeros((m, m)), n_electrons, n_modes))
        data, entries, parameters = [], [], []
        for column, (row, col) in enumerate(zip(rows, cols)):
            basis = np.zeros((m, m))
            basis[row, col] = basis[col, row] = 1.0
            lifted = self.flatten(_lift(basis, n_electrons, n_modes)) - self.offset
            nonzero = np.flatnonzero(lifted)
            data.append(lifted[nonzero])
            entries.append(nonzero)
            parameters.append(np.full(nonzero.size, column))
        self.lift_matrix = sparse.csc_matrix(
            (np.concatenate(data), (np.concatenate(entries), np.concatenate(parameters))),
            shape=(self.offset.size, rows.size),
        )
        trace_row = (rows == cols).astype(float)
        self.target_trace = n_electrons * (n_electrons - 1) / 2.0

        normal = (self.lift_matrix.T @ self.lift_matrix).tocsc()
        kkt = sparse.bmat(
            [[normal, sparse.csc_matrix(trace_row[:, None])], [sparse.csc_matrix(trace_row[None, :]), None]],
            format="csc",
        )
        self._solve = factorized(kkt)

    @staticmethod
    def flatten(blocks: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([blocks["d2"].ravel(), blocks["q2"].ravel(), blocks["g2"].ravel()])

    def split(self, point: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        m, r = self.size, self.n_modes
        d2 = point[: m * m].reshape(m, m)
        q2 = point[m * m : 2 * m * m].reshape(m, m)
        g2 = point[2 * m * m :].reshape(r * r, r * r)
        return d2, q2, g2

    def lift(self, pair_matrix: np.ndarray) -> np.ndarray:
        return self.flatten(_lift(pair_matrix, self.n_electrons, self.n_modes))

    def project(self, point: np.ndarray) -> np.ndarray:
        rhs = np.append(self.lift_matrix.T @ (point - self.offset), self.target_trace)
        parameters = self._solve(rhs)[:-1]
        return self.lift_matrix @ parameters + self.offset


def _project_psd(matrix: np.ndarray) -> np.ndarray:
    symmetric = (matrix + matrix.T) / 2.0
    values, vectors = np.linalg.eigh(symmetric)
    return (vectors * np.clip(values, 0.0, None)) @ vectors.T


def _project_cones(affine: _AffineSet, point: np.ndarray) -> np.ndarray:
    return np.concatenate([_project_psd(block).ravel() for block in affine.split(point)])


def _min_eigenvalue(affine: _AffineSet, pair_matrix: np.ndarray) -> float:
    return min(float(np.linalg.eigvalsh(block)[0]) for block in affine.split(affine.lift(pair_matrix)))


def _dykstra(affine: _AffineSet, target: np.ndarray, max_sweeps: int) -> tuple[np.ndarray, int, bool]:
    """Nearest point of the affine set ∩ PSD cones to ``target``."""
    point = target.copy()
    affine_correction = np.zeros_like(target)
    cone_correction = np.zeros_like(target)
    on_affine, displacement = point, float("inf")
    for sweep in range(1, max_sweeps + 1):
        on_affine = affine.project(point + affine_correction)
        affine_correction = point + affine_correction - on_affine
        on_cones = _project_cones(affine, on_affine + cone_correction)
        cone_correction = on_affine + cone_correction - on_cones
        displacement = float(np.linalg.norm(on_cones - point))
        point = on_cones
        if displacement < DISPLACEMENT_TOLERANCE:
            return affine.split(on_affine)[0], sweep, True
    logger.warning(
        "Reconstruction did not converge", extra={"sweeps": max_sweeps, "displacement": displacement}
    )
    return affine.split(on_affine)[0], max_sweeps, False


def _polish(affine: _AffineSet, pair_matrix: np.ndarray) -> np.ndarray:
    """Mix toward the maximally mixed ensemble until every block is PSD."""
    if _min_eigenvalue(affine, pair_matrix) >= -POSITIVITY_TOLERANCE:
        return pair_matrix
    mixed = np.eye(affine.size) * affine.target_trace / affine.size
    low, high = 0.0, 1.0
    for _ in range(60):
        middle = (low + high) / 2.0
        if _min_eigenvalue(affine, (1 - middle) * pair_matrix + middle * mixed) >= -POSITIVITY_TOLERANCE:
            high = middle
        else:
            low = middle
    return (1 - high) * pair_matrix + high * mixed


def energy_weights(hamiltonian: ActiveHamiltonian) -> np.ndarray:
    """Matrix C with E = E_core + Σ C·T over the pair matrix T of a 2-RDM."""
    r = 2 * hamiltonian.n_orbitals
    n_electrons = hamiltonian.n_electrons
    weights = np.zeros((r,) * 4)
    for coefficient, ops in spin_orbital_terms(hamiltonian, include_constant=False):
        modes = [mode for mode, _ in ops]
        if len(ops) == 2:
            p, q = modes
            weights[p, :, q, :] += coefficient * np.eye(r) / (n_electrons - 1)
        else:
            p, q, r_mode, s = modes
            weights[p, q, s, r_mode] += coefficient
    first, second = _pair_index(r)
    pair = (
        weights[first[:, None], second[:, None], first[None, :], second[None, :]]
        - weights[second[:, None], first[:, None], first[None, :], second[None, :]]
        - weights[first[:, None], second[:, None], second[None, :], first[None, :]]
        + weights[second[:, None], first[:, None], second[None, :], first[None, :]]
    )
    return (pair + pair.T) / 2.0


@dataclass
class ReconstructionResult:
    rdm: Rdm
    before: PositivityBundle
    after: PositivityBundle
    sweeps: int
    converged: bool
    report: MitigationReport


def _nearest(affine: _AffineSet, pair_matrix: np.ndarray, max_sweeps: int) -> tuple[np.ndarray, int, bool]:
    projected, sweeps, converged = _dykstra(affine, affine.lift(pair_matrix), max_sweeps)
    projected = (projected + projected.T) / 2.0
    return _polish(affine, projected), sweeps, converged


def reconstruct_rdm(
    d2: Rdm | np.ndarray,
    n_electrons: float,
    n_modes: int | None = None,
    mode: ReconstructMode = "nearest",
    hamiltonian: ActiveHamiltonian | None = None,
    max_sweeps: int = MAX_SWEEPS,
    iterations: int = ENERGY_ITERATIONS,
) -> ReconstructionResult:
    """Repair a measured 2-RDM so that ²D, ²Q and ²G are positive semidefinite.

    ``nearest`` returns the closest feasible point in the lifted Frobenius
    metric. ``energy_min`` starts there and descends the energy of
    ``hamiltonian`` by projected steps over the same feasible set.
    """
    before = build_bundle(d2, n_electrons, n_modes)
    affine = _AffineSet(n_electrons, before.n_modes)
    pair_matrix, sweeps, converged = _nearest(affine, before.d2, max_sweeps)

    if mode == "energy_min":
        if hamiltonian is None:
            raise OperatorError("Energy-minimizing reconstruction needs a Hamiltonian")
        weights = energy_weights(hamiltonian)
        step = ENERGY_STEP * np.linalg.norm(pair_matrix) / max(np.linalg.norm(weights), 1e-300)
        best, best_energy = pair_matrix, float(np.sum(weights * pair_matrix))
        current = pair_matrix
        for iteration in range(iterations):
            current, used, ok = _nearest(affine, current - step / sqrt(iteration + 1) * weights, max_sweeps)
            sweeps += used
            converged = converged and ok
            energy = float(np.sum(weights * current))
            if energy < best_energy:
                best, best_energy = current, energy
        pair_matrix = best
    elif mode != "nearest":
        raise OperatorError(f"Unknown reconstruction mode {mode!r}")

    after = build_bundle(pair_matrix, n_electrons, before.n_modes)
    report = MitigationReport(
        min_eigenvalues_before=before.min_eigenvalues(),
        min_eigenvalues_after=after.min_eigenvalues(),
        trace_residual=abs(float(np.trace(pair_matrix)) - affine.target_trace),
        contraction_residual=abs(float(np.trace(after.d1)) - n_electrons),
        sweeps=sweeps,
        converged=converged,
    )
    logger.info("Reconstructed 2-RDM", extra={"sweeps": sweeps, "converged": converged})
    return ReconstructionResult(after.to_rdm(), before, after, sweeps, converged, report)
