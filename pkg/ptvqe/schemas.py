from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field, field_validator, model_validator


class RdmManifest(BaseModel):
    order: int = Field(..., ge=1)
    n_modes: int = Field(..., ge=1)
    trace: float
    n_electrons: float | None = None
    data: str


class PtTermRecord(BaseModel):
    kind: str
    upper: list[int]
    lower: list[int]
    adapt_type: str | None = None
    numerator: float
    denominator: float
    weight: float


class PtReportRecord(BaseModel):
    e_vqe: float
    e1: float
    e2: float
    e0: float
    rdm_order_used: int
    max_rdm_order_zeroth: int
    terms: list[PtTermRecord] = Field(default_factory=list)


class MitigationReport(BaseModel):
    retained_fraction: float | None = None
    min_eigenvalues_before: dict[str, float] = Field(default_factory=dict)
    min_eigenvalues_after: dict[str, float] = Field(default_factory=dict)
    trace_residual: float | None = None
    contraction_residual: float | None = None
    sweeps: int = 0
    converged: bool = True
    trace_deviations: dict[str, float] = Field(default_factory=dict)
    trace_flagged: bool = False


class NoiseSettings(BaseModel):
    depol_p: float = Field(0.0, ge=0.0, le=1.0)
    readout_p01: float = Field(0.0, ge=0.0, le=1.0)
    readout_p10: float = Field(0.0, ge=0.0, le=1.0)

    @property
    def is_noiseless(self) -> bool:
        return self.depol_p == 0.0 and self.readout_p01 == 0.0 and self.readout_p10 == 0.0


class GeometrySpec(BaseModel):
    label: str | None = None
    bond_length: float = Field(..., gt=0.0)
    fcidump: Path


class PartitionSpec(BaseModel):
    frozen: list[int] = Field(default_factory=list)
    inactive: list[int] = Field(default_factory=list)
    active: list[int] | None = None

    @field_validator("frozen", "inactive")
    @classmethod
    def validate_indices(cls, value: list[int]) -> list[int]:
        if any(index < 0 for index in value):
            raise ValueError("Orbital indices must be non-negative.")
        return value


class VqeSettings(BaseModel):
    mode: Literal["adapt", "fixed_f2"] = "adapt"
    eps_grad: float = Field(1e-6, gt=0.0)
    max_ops: int = Field(200, ge=1)
    f2_convention: Literal["original", "simplified"] = "original"


class RdmSettings(BaseModel):
    mode: Literal["exact", "shots"] = "exact"
    shots: int = Field(10_000, ge=1)
    trajectories: int = Field(64, ge=1)
    noise: NoiseSettings = Field(default_factory=NoiseSettings)


class MitigationSettings(BaseModel):
    sv: bool = False
    rdm_reconstruct: bool = False
    reconstruct_mode: Literal["nearest", "energy_min"] = "nearest"
    trace_tolerance: float = Field(0.05, gt=0.0)


class PtSettings(BaseModel):
    restrict_3rdm: bool = True
    screen_threshold: float | None = Field(None, ge=0.0)
    also_diagonalize: bool = True
    orthonormal_diagonals: bool = True
    overlap_cutoff: float = Field(1e-8, gt=0.0)
    intruder_tolerance: float = Field(1e-8, gt=0.0)


class OutputSettings(BaseModel):
    path: Path = Path("pes.csv")
    format: Literal["csv", "json"] = "csv"


class RunConfig(BaseModel):
    geometries: list[GeometrySpec] = Field(default_factory=list)
    partition: PartitionSpec = Field(default_factory=PartitionSpec)
    vqe: VqeSettings = Field(default_factory=VqeSettings)
    rdm: RdmSettings = Field(default_factory=RdmSettings)
    mitigation: MitigationSettings = Field(default_factory=MitigationSettings)
    pt: PtSettings = Field(default_factory=PtSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def validate_mitigation(self) -> "RunConfig":
        if self.mitigation.rdm_reconstruct and self.rdm.mode == "exact" and self.rdm.noise.is_noiseless:
            raise ValueError("RDM reconstruction needs shot sampling or a noise model.")
        return self


class PesRow(BaseModel):
    label: str | None = None
    bond_length: float
    e_hf: float | None = None
    e_vqe: float | None = None
    e_pt2: float | None = None
    e_diag: float | None = None
    e_casci: float | None = None
    e_exact: float | None = None
    e_vqe_raw: float | None = None
    e_vqe_sv: float | None = None
    e_vqe_sv_rdm: float | None = None
    e_pt2_raw: float | None = None
    e_pt2_sv: float | None = None
    e_pt2_sv_rdm: float | None = None
    error_vqe: float | None = None
    error_pt2: float | None = None
    n_operators: int | None = None
    rdm_order_used: int | None = None
    mitigation: MitigationReport | None = None
    diagnostic: str | None = None

    @property
    def failed(self) -> bool:
        return self.diagnostic is not None


class PesTable(BaseModel):
    seed: int
    rows: list[PesRow] = Field(default_factory=list)

    @property
    def failures(self) -> int:
        return sum(row.failed for row in self.rows)
