"""ADAPT-VQE over a spin-orbital excitation pool and the fixed F2 ansatz."""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Literal

import numpy as np
from scipy.optimize import minimize
from scipy.sparse.linalg import expm_multiply

from .errors import OperatorError, PartitionError
from .fermion import Term, adjoint_terms
from .integrals import OrbitalPartition
from .qsim import (
    Circuit,
    CnotLayer,
    ExpLayer,
    PauliString,
    PauliSum,
    Statevector,
    apply_cnot,
    jw_map,
    prepare_reference,
)

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-8

F2Convention = Literal["original", "simplified"]


@dataclass(frozen=True, eq=False)
class PoolOperator:
    kind: Literal["single", "double", "pauli"]
    indices: tuple[int, ...]
    generator: PauliSum
    terms: tuple[Term, ...] = ()

    @property
    def label(self) -> str:
        if self.kind == "pauli":
            return " + ".join(f"({complex(c):.3g}){s.letters}" for s, c in self.generator)
        half = len(self.indices) // 2
        upper = ",".join(str(i) for i in self.indices[:half])
        lower = ",".join(str(i) for i in self.indices[half:])
        return f"{self.kind}[{upper}<-{lower}]"


@dataclass
class Ansatz:
    """Reference occupation, exponential operators and an optional CNOT fan-out.

    Operators act in list order, so the first selected operator sits rightmost
    in the product of exponentials. The fan-out acts last.
    """

    n_qubits: int
    reference: tuple[int, ...]
    operators: list[tuple[PoolOperator, float]] = field(default_factory=list)
    fanout: tuple[tuple[int, int], ...] = ()

    @property
    def parameters(self) -> np.ndarray:
        return np.array([theta for _, theta in self.operators], dtype=float)

    def with_parameters(self, thetas) -> "Ansatz":
        operators = [(operator, float(theta)) for (operator, _), theta in zip(self.operators, thetas)]
        return Ansatz(self.n_qubits, self.reference, operators, self.fanout)

    def circuit(self) -> Circuit:
        layers: list[ExpLayer | CnotLayer] = [ExpLayer(op.generator, theta) for op, theta in self.operators]
        if self.fanout:
            layers.append(CnotLayer(self.fanout))
        return Circuit(self.n_qubits, self.reference, tuple(layers))

    def state(self) -> Statevector:
        return self.circuit().run()


@dataclass
class VqeResult:
    ansatz: Ansatz
    energy: float
    final_gradient_norm: float
    state: Statevector
    max_gradient: float = 0.0
    converged: bool = True
    optimizer_converged: bool = True
    history: list[float] = field(default_factory=list)


def _excitation_operator(kind, upper: tuple[int, ...], lower: tuple[int, ...], n_qubits: int) -> PoolOperator:
    ops = tuple((mode, True) for mode in upper) + tuple((mode, False) for mode in lower)
    excitation: list[Term] = [(1.0, ops)]
    terms = tuple(excitation + [(-c, o) for c, o in adjoint_terms(excitation)])
    return PoolOperator(kind, upper + lower, jw_map(terms, n_qubits), terms)


def build_pool(partition: OrbitalPartition) -> list[PoolOperator]:
    """Spin-conserving singles a†_u a_v and doubles a†_u a†_v a_w a_x.

    Indices refer to the active register. Each generator τ = T − T† is listed
    once; the reversed excitation only flips its sign.
    """
    if partition.n_active == 0:
        raise PartitionError("The active space is empty")
    n_qubits = 2 * partition.n_active
    pool = []
    for lower, upper in combinations(range(n_qubits), 2):
        if upper % 2 == lower % 2:
            pool.append(_excitation_operator("single", (upper,), (lower,), n_qubits))

    pairs = list(combinations(range(n_qubits), 2))
    for index, (w, x) in enumerate(pairs):
        for u, v in pairs[index + 1:]:
            if {u, v} & {w, x} or (u % 2) + (v % 2) != (w % 2) + (x % 2):
                continue
            pool.append(_excitation_operator("double", (v, u), (w, x), n_qubits))
    return pool


def hartree_fock_occupation(n_electrons: int) -> tuple[int, ...]:
    """Lowest spin orbitals of the interleaved register."""
    return tuple(range(n_electrons))


def pool_gradients(state: Statevector, hamiltonian: PauliSum, pool: list[PoolOperator]) -> np.ndarray:
    """Energy gradients ⟨ψ|[H, τ_k]|ψ⟩ = 2 Re ⟨Hψ|τ_k ψ⟩ for every pool operator."""
    h_psi = hamiltonian.matrix @ state.amplitudes
    return np.array(
        [2.0 * np.vdot(h_psi, operator.generator.matrix @ state.amplitudes).real for operator in pool]
    )


def _apply_fanout(amplitudes: np.ndarray, n_qubits: int, pairs, inverse: bool = False) -> np.ndarray:
    state = Statevector(n_qubits, amplitudes)
    for control, target in reversed(pairs) if inverse else pairs:
        state = apply_cnot(state, control, target)
    return state.amplitudes


def energy_and_gradient(thetas: np.ndarray, ansatz: Ansatz, hamiltonian: PauliSum) -> tuple[float, np.ndarray]:
    """Energy of the ansatz state and its exact parameter gradient.

    The gradient is accumulated backwards through the exponentials, so one
    forward and one backward sweep cover every parameter.
    """
    generators = [operator.generator.matrix for operator, _ in ansatz.operators]
    psi = prepare_reference(ansatz.n_qubits, ansatz.reference).amplitudes
    for generator, theta in zip(generators, thetas):
        psi = expm_multiply(theta * generator, psi)

    output = _apply_fanout(psi, ansatz.n_qubits, ansatz.fanout)
    h_output = hamiltonian.matrix @ output
    energy = float(np.vdot(output, h_output).real)
    lam = _apply_fanout(h_output, ansatz.n_qubits, ansatz.fanout, inverse=True)

    gradient = np.zeros(len(generators))
    for k in range(len(generators) - 1, -1, -1):
        gradient[k] = 2.0 * np.vdot(lam, generators[k] @ psi).real
        psi = expm_multiply(-thetas[k] * generators[k], psi)
        lam = expm_multiply(-thetas[k] * generators[k], lam)
    return energy, gradient


def optimize_parameters(ansatz: Ansatz, hamiltonian: PauliSum) -> tuple[Ansatz, float, bool]:
    """BFGS on all parameters starting from the current ones."""
    start = ansatz.parameters
    if start.size == 0:
        energy, _ = energy_and_gradient(start, ansatz, hamiltonian)
        return ansatz, energy, True

    start_energy, _ = energy_and_gradient(start, ansatz, hamiltonian)
    result = minimize(
        energy_and_gradient,
        start,
        args=(ansatz, hamiltonian),
        jac=True,
        method="BFGS",
        options={"gtol": GRADIENT_TOLERANCE, "maxiter": 1000},
    )
    if result.fun > start_energy:
        return ansatz, start_energy, False
    return ansatz.with_parameters(result.x), float(result.fun), bool(result.success)


def adapt_vqe(
    hamiltonian: PauliSum,
    e_core: float,
    pool: list[PoolOperator],
    eps_grad: float = 1e-6,
    max_ops: int = 200,
    reference: tuple[int, ...] = (),
) -> VqeResult:
    """Grow the ansatz by the largest-gradient pool operator until converged."""
    if not pool:
        raise OperatorError("ADAPT-VQE needs a nonempty operator pool")
    ansatz = Ansatz(hamiltonian.n_qubits, tuple(reference))
    state = ansatz.state()
    energy, _ = energy_and_gradient(ansatz.parameters, ansatz, hamiltonian)
    history = [energy + e_core]
    optimizer_converged = True

    while True:
        gradients = pool_gradients(state, hamiltonian, pool)
        chosen = int(np.argmax(np.abs(gradients)))
        max_gradient = float(np.abs(gradients[chosen]))
        if max_gradient < eps_grad or len(ansatz.operators) >= max_ops:
            break

        candidate = Ansatz(ansatz.n_qubits, ansatz.reference, ansatz.operators + [(pool[chosen], 0.0)])
        candidate, candidate_energy, success = optimize_parameters(candidate, hamiltonian)
        if not success:
            optimizer_converged = False
            logger.warning(
                "Optimizer did not converge",
                extra={"iteration": len(candidate.operators), "energy": candidate_energy + e_core},
            )
        ansatz, energy = candidate, candidate_energy
        state = ansatz.state()
        history.append(energy + e_core)
        logger.info(
            "ADAPT iteration",
            extra={
                "iteration": len(ansatz.operators),
                "operator": pool[chosen].label,
                "energy": energy + e_core,
                "max_gradient": max_gradient,
            },
        )

    return VqeResult(
        ansatz=ansatz,
        energy=energy + e_core,
        final_gradient_norm=float(np.linalg.norm(gradients)),
        state=state,
        max_gradient=max_gradient,
        converged=max_gradient < eps_grad,
        optimizer_converged=optimizer_converged,
        history=history,
    )


def f2_generator(convention: F2Convention = "original") -> PoolOperator:
    """G = −(i/2) X0 X1 X2 Y3, or −(i/2) X0 Y2 before the CNOT fan-out."""
    letters = "XXXY" if convention == "original" else "XIYI"
    generator = PauliSum(4, {PauliString.from_letters(letters): -0.5j})
    return PoolOperator("pauli", (0, 1, 2, 3), generator)


def fixed_ansatz_f2(theta: float, convention: F2Convention = "original") -> Ansatz:
    """One-parameter two-configuration ansatz on four qubits.

    The original circuit rotates |1100⟩ into |0011⟩; the simplified one starts
    from |1000⟩ and copies qubits 0 and 2 onto 1 and 3 with CNOTs.
    """
    if convention == "original":
        return Ansatz(4, (0, 1), [(f2_generator(convention), float(theta))])
    if convention == "simplified":
        return Ansatz(4, (0,), [(f2_generator(convention), float(theta))], fanout=((0, 1), (2, 3)))
    raise OperatorError(f"Unknown F2 circuit convention {convention!r}")


def optimize_fixed_ansatz(
    hamiltonian: PauliSum, e_core: float, convention: F2Convention = "original", theta0: float = 0.0
) -> VqeResult:
    if hamiltonian.n_qubits != 4:
        raise OperatorError("The fixed F2 ansatz needs a 4-qubit active register")
    ansatz, energy, success = optimize_parameters(fixed_ansatz_f2(theta0, convention), hamiltonian)
    _, gradient = energy_and_gradient(ansatz.parameters, ansatz, hamiltonian)
    norm = float(np.linalg.norm(gradient))
    return VqeResult(
        ansatz=ansatz,
        energy=energy + e_core,
        final_gradient_norm=norm,
        state=ansatz.state(),
        max_gradient=norm,
        converged=success,
        optimizer_converged=success,
        history=[energy + e_core],
    )
