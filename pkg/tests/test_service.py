import json
import shutil

import numpy as np
import pytest
from conftest import DATA

from ptvqe import service
from ptvqe.errors import ConfigError, IntruderStateError
from ptvqe.integrals import fold_core, partition_orbitals, write_fcidump
from ptvqe.qsim import Circuit
from ptvqe.schemas import PesTable, RunConfig
from ptvqe.service import CSV_COLUMNS, apply_overrides, emit, load_config, measure_stages, run_pes, table_to_csv

H2_FCI = -1.13728
H2_HF = -1.1166843870


def write_config(tmp_path, **sections):
    shutil.copy(DATA / "h2_sto3g.fcidump", tmp_path / "h2.fcidump")
    payload = {"geometries": [{"label": "h2", "bond_length": 0.7414, "fcidump": "h2.fcidump"}]}
    payload.update(sections)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(payload))
    return path


def test_load_config_resolves_fcidump_paths(tmp_path):
    config = load_config(write_config(tmp_path))

    assert config.geometries[0].fcidump == tmp_path / "h2.fcidump"
    assert config.rdm.mode == "exact"
    assert config.pt.restrict_3rdm


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")

    broken = tmp_path / "broken.json"
    broken.write_text("{")
    with pytest.raises(ConfigError):
        load_config(broken)

    path = write_config(tmp_path)
    payload = json.loads(path.read_text())
    payload["geometries"][0]["fcidump"] = "nowhere.fcidump"
    path.write_text(json.dumps(payload))
    with pytest.raises(ConfigError):
        load_config(path)


def test_reconstruction_needs_sampled_or_noisy_rdms(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, mitigation={"rdm_reconstruct": True}))


def test_overrides():
    config = apply_overrides(
        RunConfig(),
        shots=500,
        seed=5,
        restrict_3rdm=False,
        screen=1e-4,
        mitigate="sv, rdm",
        format="json",
    )

    assert config.rdm.mode == "shots" and config.rdm.shots == 500
    assert config.seed == 5
    assert not config.pt.restrict_3rdm
    assert config.pt.screen_threshold == 1e-4
    assert config.mitigation.sv and config.mitigation.rdm_reconstruct
    assert config.output.format == "json"


def test_overrides_leave_unset_values_alone():
    config = RunConfig(seed=3)

    assert apply_overrides(config, shots=None, seed=None) == config


def test_override_errors():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), mitigate="sv,zne")
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), mitigate="rdm")


def test_exact_h2_scan(tmp_path):
    table = run_pes(load_config(write_config(tmp_path)))
    (row,) = table.rows

    assert table.failures == 0
    assert row.e_hf == pytest.approx(H2_HF, abs=1e-8)
    assert row.e_vqe == pytest.approx(H2_FCI, abs=1e-4)
    assert row.e_exact == pytest.approx(row.e_casci, abs=1e-10)
    assert abs(row.error_vqe) < 1e-7
    assert row.e_pt2 == pytest.approx(row.e_vqe, abs=1e-10)
    assert row.n_operators >= 1
    assert row.mitigation is None


def test_geometries_are_scanned_in_bond_length_order(tmp_path):
    path = write_config(tmp_path)
    payload = json.loads(path.read_text())
    payload["geometries"] = [
        {"label": "long", "bond_length": 1.5, "fcidump": "h2.fcidump"},
        {"label": "short", "bond_length": 0.5, "fcidump": "h2.fcidump"},
    ]
    path.write_text(json.dumps(payload))

    table = run_pes(load_config(path))

    assert [row.label for row in table.rows] == ["short", "long"]


def test_empty_scan(tmp_path):
    table = run_pes(RunConfig(seed=4))
    path = emit(table, tmp_path / "pes.csv")

    assert table.rows == []
    assert path.read_text() == ",".join(CSV_COLUMNS) + "\n"


def test_failing_geometry_becomes_a_diagnostic(tmp_path):
    table = run_pes(load_config(write_config(tmp_path, partition={"active": [0, 5]})))
    (row,) = table.rows

    assert row.failed
    assert row.diagnostic.startswith("PartitionError")
    assert row.e_pt2 is None
    assert table.failures == 1


def test_emit_csv_and_json(tmp_path):
    table = run_pes(load_config(write_config(tmp_path)))

    csv_path = emit(table, tmp_path / "pes.csv", "csv")
    json_path = emit(table, tmp_path / "pes.json", "json")

    header, line = csv_path.read_text().splitlines()
    assert header.split(",") == CSV_COLUMNS
    assert line.split(",")[CSV_COLUMNS.index("seed")] == "0"
    restored = PesTable.model_validate_json(json_path.read_text())
    assert restored.rows[0].e_pt2 == table.rows[0].e_pt2


def test_emit_errors(tmp_path):
    table = PesTable(seed=0)
    with pytest.raises(ConfigError):
        emit(table, tmp_path / "pes.txt", "xml")
    with pytest.raises(ConfigError):
        emit(table, tmp_path / "missing" / "pes.csv")


def test_rerun_is_byte_identical(tmp_path):
    config = load_config(write_config(tmp_path, rdm={"mode": "shots", "shots": 500}, seed=11))

    assert table_to_csv(run_pes(config)) == table_to_csv(run_pes(config))


def test_mitigation_toggles_are_inert_in_exact_mode(tmp_path):
    plain = load_config(write_config(tmp_path))
    verified = apply_overrides(plain, mitigate="sv")

    assert table_to_csv(run_pes(plain)) == table_to_csv(run_pes(verified))


def test_sampled_scan_with_mitigation(tmp_path):
    config = load_config(
        write_config(
            tmp_path,
            rdm={"mode": "shots", "shots": 2000},
            mitigation={"sv": True, "rdm_reconstruct": True},
            seed=2,
        )
    )

    (row,) = run_pes(config).rows

    assert not row.failed
    for stage in ("raw", "sv", "sv_rdm"):
        assert getattr(row, f"e_vqe_{stage}") is not None
        assert getattr(row, f"e_pt2_{stage}") is not None
    assert row.mitigation.retained_fraction == pytest.approx(1.0)
    assert row.mitigation.sweeps >= 1
    assert row.mitigation.min_eigenvalues_after["d2"] >= -1e-8
    # a positive two-electron 2-RDM is an ensemble, so its energy cannot drop below FCI
    assert row.e_vqe_sv_rdm >= row.e_exact - 1e-6


@pytest.mark.parametrize(
    "rdm",
    [
        {"mode": "shots", "shots": 2000},
        {"mode": "exact", "noise": {"readout_p01": 0.02}},
    ],
)
def test_measured_scan_with_four_active_electrons(tmp_path, hf_like, rdm):
    integrals, _ = hf_like
    (tmp_path / "hf_like.fcidump").write_text(write_fcidump(integrals))
    path = tmp_path / "run.json"
    path.write_text(
        json.dumps(
            {
                "geometries": [{"label": "hf_like", "bond_length": 1.0, "fcidump": "hf_like.fcidump"}],
                "partition": {"inactive": [0], "active": [1, 2, 3]},
                "rdm": rdm,
                "seed": 3,
            }
        )
    )

    (row,) = run_pes(load_config(path)).rows

    assert not row.failed, row.diagnostic
    assert row.e_casci is not None and row.e_vqe is not None
    assert row.e_vqe_raw is not None and row.e_pt2_raw is not None
    assert row.e_pt2 == row.e_pt2_raw
    assert row.rdm_order_used <= 3


def test_failed_correction_keeps_earlier_results(tmp_path, monkeypatch):
    def failing(*args, **kwargs):
        raise IntruderStateError("r_i^a[1;0]: denominator 0.000e+00 with numerator 1.000e-02")

    monkeypatch.setattr(service, "correct", failing)

    (row,) = run_pes(load_config(write_config(tmp_path))).rows

    assert row.failed
    assert row.diagnostic.startswith("IntruderStateError")
    assert row.e_hf == pytest.approx(H2_HF, abs=1e-8)
    assert row.e_vqe == pytest.approx(H2_FCI, abs=1e-4)
    assert row.e_casci is not None and row.error_vqe is not None
    assert row.e_pt2 is None


def test_unexpected_error_stays_in_its_geometry(tmp_path, monkeypatch):
    path = write_config(tmp_path)
    payload = json.loads(path.read_text())
    payload["geometries"] = [
        {"label": "short", "bond_length": 0.5, "fcidump": "h2.fcidump"},
        {"label": "long", "bond_length": 1.5, "fcidump": "h2.fcidump"},
    ]
    path.write_text(json.dumps(payload))
    correct = service.correct
    calls = []

    def flaky(*args, **kwargs):
        calls.append(1)
        if len(calls) == 1:
            raise np.linalg.LinAlgError("Eigenvalues did not converge")
        return correct(*args, **kwargs)

    monkeypatch.setattr(service, "correct", flaky)

    table = run_pes(load_config(path))
    short, long = table.rows

    assert short.diagnostic == "LinAlgError: Eigenvalues did not converge"
    assert short.e_vqe is not None
    assert not long.failed
    assert table.failures == 1


def test_readout_bias_flags_the_trace(h2_integrals):
    hamiltonian = fold_core(h2_integrals, partition_orbitals(2, active=[0, 1]))
    circuit = Circuit(4, occupied=(0, 1))
    biased = RunConfig(rdm={"mode": "shots", "shots": 10_000, "noise": {"readout_p10": 0.2}})
    clean = RunConfig(rdm={"mode": "shots", "shots": 10_000})

    stages, report = measure_stages(circuit, hamiltonian, biased, np.random.default_rng(0))
    _, clean_report = measure_stages(circuit, hamiltonian, clean, np.random.default_rng(0))

    assert [stage.name for stage in stages] == ["raw"]
    assert report.trace_flagged
    assert report.trace_deviations["raw"] == pytest.approx(-0.4, abs=0.05)
    assert not clean_report.trace_flagged
    assert clean_report.trace_deviations["raw"] == pytest.approx(0.0, abs=1e-12)
