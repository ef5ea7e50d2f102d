"""Exact reference solvers in a bit-encoded determinant basis."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import eigsh

from .errors import OperatorError, RegisterTooLargeError
from .fermion import canonical_terms, locate, operator_matrix, sector_basis
from .integrals import ActiveHamiltonian, IntegralSet, spin_orbital_terms
from .qsim import PauliSum

logger = logging.getLogger(__name__)

MAX_SECTOR_DIMENSION = 1_000_000
MAX_SECTOR_QUBITS = 16
DENSE_DIMENSION = 1500
RESIDUAL_TOLERANCE = 1e-9


class DeterminantSpace:
    """Sorted determinants of a fixed particle number (and optionally 2·m_s)."""

    def __init__(self, n_modes: int, n_electrons: int, ms2: int | None = None):
        self.n_modes = n_modes
        self.n_electrons = n_electrons
        self.ms2 = ms2
        self.determinants = sector_basis(n_modes, n_electrons, ms2)

    @property
    def dimension(self) -> int:
        return self.determinants.size

    def index(self, determinants: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return locate(self.determinants, np.asarray(determinants, dtype=np.int64))

    def hamiltonian(self, terms):
        return operator_matrix(canonical_terms(terms), self.determinants)


@dataclass
class CiResult:
    energy: float
    ground_vector: np.ndarray
    space: DeterminantSpace
    residual: float


def _lowest_eigenpair(matrix) -> tuple[float, np.ndarray]:
    dimension = matrix.shape[0]
    if dimension <= DENSE_DIMENSION:
        values, vectors = np.linalg.eigh(matrix.toarray())
        return float(values[0]), vectors[:, 0]
    values, vectors = eigsh(matrix, k=1, which="SA", tol=1e-12)
    return float(values[0]), vectors[:, 0]


def casci(
    hamiltonian: ActiveHamiltonian | IntegralSet,
    n_electrons: int | None = None,
    ms2: int | None = 0,
) -> CiResult:
    """Lowest eigenpair of ``hamiltonian`` in the (N, m_s) determinant sector."""
    if n_electrons is None:
        n_electrons = hamiltonian.n_electrons
    n_modes = 2 * hamiltonian.n_orbitals if isinstance(hamiltonian, IntegralSet) else 2 * hamiltonian.f1.shape[0]

    space = DeterminantSpace(n_modes, n_electrons, ms2)
    if space.dimension == 0:
        raise OperatorError(f"No determinants with N={n_electrons}, 2Ms={ms2} in {n_modes} spin orbitals")
    if space.dimension > MAX_SECTOR_DIMENSION:
        raise RegisterTooLargeError(f"CI sector of dimension {space.dimension} exceeds {MAX_SECTOR_DIMENSION}")

    matrix = space.hamiltonian(spin_orbital_terms(hamiltonian))
    energy, vector = _lowest_eigenpair(matrix)
    residual = float(np.linalg.norm(matrix @ vector - energy * vector))
    if residual > RESIDUAL_TOLERANCE:
        logger.warning("CI residual above tolerance", extra={"residual": residual, "dimension": space.dimension})
    return CiResult(energy=energy, ground_vector=vector, space=space, residual=residual)


def fci_sector_check(hamiltonian: PauliSum, n_electrons: int) -> float:
    """Minimum eigenvalue of a qubit Hamiltonian inside a particle-number sector."""
    n_qubits = hamiltonian.n_qubits
    if n_qubits > MAX_SECTOR_QUBITS:
        raise RegisterTooLargeError(f"{n_qubits} qubits exceed the {MAX_SECTOR_QUBITS}-qubit sector check")
    sector = sector_basis(n_qubits, n_electrons)
    if sector.size == 0:
        raise OperatorError(f"Empty {n_electrons}-particle sector on {n_qubits} qubits")
    block = hamiltonian.matrix[sector][:, sector]
    return _lowest_eigenpair(block)[0]
