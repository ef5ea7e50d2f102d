import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .errors import ConfigError, PtvqeError, RegisterTooLargeError
from .integrals import (
    ActiveHamiltonian,
    IntegralSet,
    OrbitalPartition,
    closed_shell_energy,
    fold_core,
    parse_fcidump,
    partition_orbitals,
    spin_orbital_terms,
)
from .mitigate import SymmetrySpec, augment_with_symmetry, reconstruct_rdm, sv_postselect, verified_expectations
from .oracle import casci
from .perturb import Reference, build_subspace, enumerate_excitations, pt2, screen, subspace_solve
from .qsim import Circuit, NoiseModel, PauliSum, jw_map, outcome_distribution, sample_counts
from .rdm import (
    Rdm,
    RdmMeasurement,
    assemble_rdm,
    estimate_pauli_expectations,
    group_qwc,
    one_rdm_from_two,
    rdm_energy,
    rdm_pauli_terms,
)
from .schemas import GeometrySpec, MitigationReport, PesRow, PesTable, RunConfig
from .vqe import VqeResult, adapt_vqe, build_pool, hartree_fock_occupation, optimize_fixed_ansatz

logger = logging.getLogger(__name__)

CSV_COLUMNS = [name for name in PesRow.model_fields if name != "mitigation"] + [
    "retained_fraction",
    "reconstruction_sweeps",
    "trace_flagged",
    "seed",
]


def load_config(path: str | Path) -> RunConfig:
    """Read a JSON run configuration; FCIDUMP paths resolve against its directory."""
    path = Path(path)
    try:
        config = RunConfig.model_validate_json(path.read_text())
    except OSError as exc:
        raise ConfigError(f"Cannot read configuration {path}: {exc}") from exc
    except ValidationError as exc:
        raise ConfigError(f"Invalid configuration {path}: {exc}") from exc

    geometries = []
    for geometry in config.geometries:
        fcidump = geometry.fcidump if geometry.fcidump.is_absolute() else path.parent / geometry.fcidump
        if not fcidump.is_file():
            raise ConfigError(f"FCIDUMP {fcidump} does not exist")
        geometries.append(geometry.model_copy(update={"fcidump": fcidump}))
    return config.model_copy(update={"geometries": geometries})


def apply_overrides(config: RunConfig, **overrides) -> RunConfig:
    """Merge command-line overrides (``None`` leaves a setting alone) and re-validate."""
    rdm = config.rdm
    if overrides.get("shots") is not None:
        rdm = rdm.model_copy(update={"mode": "shots", "shots": overrides["shots"]})
    pt = config.pt
    if overrides.get("restrict_3rdm") is not None:
        pt = pt.model_copy(update={"restrict_3rdm": overrides["restrict_3rdm"]})
    if overrides.get("screen") is not None:
        pt = pt.model_copy(update={"screen_threshold": overrides["screen"]})
    mitigation = config.mitigation
    if overrides.get("mitigate") is not None:
        tokens = {token.strip().lower() for token in overrides["mitigate"].split(",") if token.strip()}
        unknown = tokens - {"sv", "rdm", "none"}
        if unknown:
            raise ConfigError(f"Unknown mitigation {', '.join(sorted(unknown))}; use sv, rdm or none")
        mitigation = mitigation.model_copy(update={"sv": "sv" in tokens, "rdm_reconstruct": "rdm" in tokens})
    output = config.output
    if overrides.get("output") is not None:
        output = output.model_copy(update={"path": Path(overrides["output"])})
    if overrides.get("format") is not None:
        output = output.model_copy(update={"format": overrides["format"]})

    update = {"rdm": rdm, "pt": pt, "mitigation": mitigation, "output": output}
    if overrides.get("seed") is not None:
        update["seed"] = overrides["seed"]
    try:
        return RunConfig.model_validate(config.model_copy(update=update).model_dump())
    except ValidationError as exc:
        raise ConfigError(f"Invalid overrides: {exc}") from exc


def build_partition(integrals: IntegralSet, config: RunConfig) -> OrbitalPartition:
    requested = config.partition
    active = requested.active
    if active is None:
        taken = set(requested.frozen) | set(requested.inactive)
        active = [orbital for orbital in range(integrals.n_orbitals) if orbital not in taken]
    return partition_orbitals(integrals.n_orbitals, requested.frozen, requested.inactive, active)


def qubit_hamiltonian(hamiltonian: ActiveHamiltonian) -> PauliSum:
    return jw_map(spin_orbital_terms(hamiltonian, include_constant=False), 2 * hamiltonian.n_orbitals)


def run_vqe(hamiltonian: ActiveHamiltonian, partition: OrbitalPartition, config: RunConfig) -> VqeResult:
    h_qubit = qubit_hamiltonian(hamiltonian)
    if config.vqe.mode == "fixed_f2":
        return optimize_fixed_ansatz(h_qubit, hamiltonian.e_core, config.vqe.f2_convention)
    return adapt_vqe(
        h_qubit,
        hamiltonian.e_core,
        build_pool(partition),
        eps_grad=config.vqe.eps_grad,
        max_ops=config.vqe.max_ops,
        reference=hartree_fock_occupation(hamiltonian.n_electrons),
    )


@dataclass
class Correction:
    e_pt2: float
    e_diag: float | None
    rdm_order_used: int


def correct(reference: Reference, config: RunConfig, backend: str = "auto") -> Correction:
    """PT2 (optionally screened) and subspace diagonalization around one reference."""
    settings = config.pt
    excitations = enumerate_excitations(reference.partition, settings.restrict_3rdm)
    subspace = build_subspace(reference, excitations, settings.overlap_cutoff, backend)
    report = pt2(subspace, settings.orthonormal_diagonals, settings.intruder_tolerance)
    if settings.screen_threshold is not None:
        subspace = build_subspace(reference, screen(report, settings.screen_threshold), settings.overlap_cutoff, backend)
        report = pt2(subspace, settings.orthonormal_diagonals, settings.intruder_tolerance)
    e_diag = subspace_solve(subspace).e0 if settings.also_diagonalize else None
    return Correction(report.e0, e_diag, report.rdm_order_used)


@dataclass
class MeasuredStage:
    name: str
    d1: Rdm
    d2: Rdm


def _measured_counts(circuit: Circuit, plan, config: RunConfig, rng: np.random.Generator) -> list[dict]:
    noise = NoiseModel(**config.rdm.noise.model_dump())
    if config.rdm.mode == "shots":
        return [
            sample_counts(circuit, group.basis, plan.shots_per_group, noise, rng, config.rdm.trajectories)
            for group in plan.groups
        ]
    return [outcome_distribution(circuit, group.basis, noise, rng, config.rdm.trajectories) for group in plan.groups]


def measure_stages(
    circuit: Circuit, hamiltonian: ActiveHamiltonian, config: RunConfig, rng: np.random.Generator
) -> tuple[list[MeasuredStage], MitigationReport]:
    """Raw, symmetry-verified and reconstructed RDMs of one noisy circuit."""
    n_qubits = circuit.n_qubits
    n_electrons = hamiltonian.n_electrons
    measurements: dict[int, RdmMeasurement] = {order: rdm_pauli_terms(order, n_qubits) for order in (1, 2)}
    strings = sorted({s for m in measurements.values() for s in m.strings}, key=lambda s: s.letters)

    symmetry = SymmetrySpec.parity(n_qubits, n_electrons) if config.mitigation.sv else None
    measured = augment_with_symmetry(strings, symmetry) if symmetry else strings
    plan = group_qwc(measured, config.rdm.shots)
    counts = _measured_counts(circuit, plan, config, rng)
    estimates = estimate_pauli_expectations(plan, counts)

    def assemble(values) -> tuple[Rdm, Rdm]:
        return tuple(assemble_rdm(measurements[order], values, n_electrons) for order in (1, 2))

    stages = [MeasuredStage("raw", *assemble(estimates))]
    report = MitigationReport()
    if symmetry is not None:
        symmetry.check_commutes(qubit_hamiltonian(hamiltonian))
        stages.append(MeasuredStage("sv", *assemble(verified_expectations(estimates, strings, symmetry))))
        for group, group_counts in zip(plan.groups, counts):
            if all(member.is_diagonal for member in group.members):
                report.retained_fraction = sv_postselect(group_counts, symmetry, group.basis)[1]
                break
    if config.mitigation.rdm_reconstruct:
        result = reconstruct_rdm(
            stages[-1].d2, n_electrons, n_qubits, config.mitigation.reconstruct_mode, hamiltonian=hamiltonian
        )
        retained = report.retained_fraction
        report = result.report.model_copy(update={"retained_fraction": retained})
        stages.append(MeasuredStage("sv_rdm", one_rdm_from_two(result.rdm), result.rdm))
    deviations, flagged = _trace_deviations(stages, n_electrons, config.mitigation.trace_tolerance)
    report = report.model_copy(update={"trace_deviations": deviations, "trace_flagged": flagged})
    return stages, report


def _trace_deviations(stages: list[MeasuredStage], n_electrons: int, tolerance: float) -> tuple[dict[str, float], bool]:
    """1-RDM trace minus N per stage; readout bias shows up here first."""
    deviations = {stage.name: stage.d1.trace() - n_electrons for stage in stages}
    flagged = [name for name, deviation in deviations.items() if abs(deviation) > tolerance]
    if flagged:
        logger.warning(
            "Measured RDM trace deviates from the particle number",
            extra={"stages": flagged, "deviations": deviations, "n_electrons": n_electrons},
        )
    return deviations, bool(flagged)


def _exact_energy(integrals: IntegralSet, partition: OrbitalPartition) -> float | None:
    """Frozen-core FCI over every non-frozen orbital."""
    correlated = [orbital for orbital in range(integrals.n_orbitals) if orbital not in partition.frozen]
    full = partition_orbitals(integrals.n_orbitals, partition.frozen, (), correlated)
    try:
        return casci(fold_core(integrals, full), ms2=integrals.ms2).energy
    except RegisterTooLargeError as exc:
        logger.warning("Skipping the FCI reference", extra={"reason": str(exc)})
        return None


def run_geometry(
    geometry: GeometrySpec, config: RunConfig, rng: np.random.Generator, row: PesRow | None = None
) -> PesRow:
    """Fill ``row`` step by step, so whatever was computed before a failure stays in it."""
    row = PesRow(label=geometry.label, bond_length=geometry.bond_length) if row is None else row
    integrals = parse_fcidump(geometry.fcidump.read_text())
    partition = build_partition(integrals, config)
    hamiltonian = fold_core(integrals, partition)
    n_active_electrons = hamiltonian.n_electrons

    if n_active_electrons % 2 == 0:
        row.e_hf = closed_shell_energy(integrals, partition.occupied + partition.active[: n_active_electrons // 2])
    row.e_casci = casci(hamiltonian, ms2=integrals.ms2).energy
    row.e_exact = _exact_energy(integrals, partition)

    vqe = run_vqe(hamiltonian, partition, config)
    row.e_vqe = vqe.energy
    row.n_operators = len(vqe.ansatz.operators)
    if row.e_exact is not None:
        row.error_vqe = row.e_vqe - row.e_exact

    measured = config.rdm.mode == "shots" or not config.rdm.noise.is_noiseless
    if not measured:
        correction = correct(Reference.from_state(integrals, partition, vqe.state), config)
    else:
        stages, row.mitigation = measure_stages(vqe.ansatz.circuit(), hamiltonian, config, rng)
        for stage in stages:
            setattr(row, f"e_vqe_{stage.name}", rdm_energy(hamiltonian, stage.d1, stage.d2))
        for stage in stages:
            reference = Reference.from_rdms(integrals, partition, {1: stage.d1, 2: stage.d2}, cumulant=True)
            correction = correct(reference, config, backend="rdm")
            setattr(row, f"e_pt2_{stage.name}", correction.e_pt2)

    row.e_pt2 = correction.e_pt2
    row.e_diag = correction.e_diag
    row.rdm_order_used = correction.rdm_order_used
    if row.e_exact is not None:
        row.error_pt2 = row.e_pt2 - row.e_exact
    return row


def run_pes(config: RunConfig) -> PesTable:
    """Scan every geometry in bond-length order; failures become diagnostics."""
    geometries = sorted(config.geometries, key=lambda geometry: geometry.bond_length)
    seeds = np.random.SeedSequence(config.seed).spawn(len(geometries))
    rows = []
    for geometry, seed in zip(geometries, seeds):
        row = PesRow(label=geometry.label, bond_length=geometry.bond_length)
        try:
            run_geometry(geometry, config, np.random.default_rng(seed), row)
        except PtvqeError as error:
            logger.error(
                "Geometry failed",
                extra={"label": geometry.label, "bond_length": geometry.bond_length, "error": str(error)},
            )
            row.diagnostic = f"{type(error).__name__}: {error}"
        except Exception as error:
            logger.exception(
                "Unexpected error in geometry",
                extra={"label": geometry.label, "bond_length": geometry.bond_length},
            )
            row.diagnostic = f"{type(error).__name__}: {error}"
        else:
            logger.info(
                "Geometry done",
                extra={"label": geometry.label, "bond_length": geometry.bond_length, "e_pt2": row.e_pt2},
            )
        rows.append(row)
    return PesTable(seed=config.seed, rows=rows)


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def table_to_csv(table: PesTable) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in table.rows:
        record = row.model_dump(exclude={"mitigation"})
        record["retained_fraction"] = row.mitigation.retained_fraction if row.mitigation else None
        record["reconstruction_sweeps"] = row.mitigation.sweeps if row.mitigation else None
        record["trace_flagged"] = row.mitigation.trace_flagged if row.mitigation else None
        record["seed"] = table.seed
        writer.writerow([_csv_value(record[column]) for column in CSV_COLUMNS])
    return buffer.getvalue()


def emit(table: PesTable, path: str | Path, format: str = "csv") -> Path:
    path = Path(path)
    if format == "csv":
        text = table_to_csv(table)
    elif format == "json":
        text = table.model_dump_json(indent=2) + "\n"
    else:
        raise ConfigError(f"Unknown output format {format!r}")
    try:
        path.write_text(text)
    except OSError as exc:
        raise ConfigError(f"Cannot write {path}: {exc}") from exc
    return path
