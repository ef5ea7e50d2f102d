"""Whole-pipeline checks on real molecules and randomized suites.

The molecular cases read the FCIDUMP fixtures under ``tests/data/molecules``
(see ``tests/molecules.py``). Run with ``pytest -m slow``.
"""

import numpy as np
import pytest
from conftest import determinant_state, random_sector_state
from molecules import F2_BONDS, HF_BONDS, N2_BONDS, load

from ptvqe.integrals import fold_core, partition_orbitals
from ptvqe.mitigate import build_bundle, reconstruct_rdm
from ptvqe.oracle import casci
from ptvqe.rdm import compute_rdm, connected_rdm, cumulant_3rdm, wedge
from ptvqe.schemas import RunConfig
from ptvqe.service import run_pes

pytestmark = pytest.mark.slow

CHEMICAL_ACCURACY = 1.6e-3


def scan(molecule, bonds, **sections):
    geometries = []
    references = {}
    for bond in bonds:
        path, _, e_fci = load(molecule, bond)
        geometries.append({"label": f"{bond:.2f}", "bond_length": bond, "fcidump": path})
        references[f"{bond:.2f}"] = e_fci
    config = RunConfig.model_validate({"geometries": geometries, **sections})
    return run_pes(config), references


def test_hf_fixture_matches_its_full_ci_reference():
    _, integrals, e_fci = load("hf", 0.9)

    assert casci(integrals).energy == pytest.approx(e_fci, abs=1e-8)


def test_hf_potential_energy_surface():
    table, references = scan("hf", HF_BONDS, partition={"inactive": [0, 1, 2], "active": [3, 4, 5]})

    assert table.failures == 0
    for row in table.rows:
        assert row.e_exact == pytest.approx(references[row.label], abs=1e-8)
        assert abs(row.error_pt2) <= CHEMICAL_ACCURACY
        assert abs(row.error_pt2) < abs(row.error_vqe)
        assert row.e_diag <= row.e_vqe + 1e-10
        assert row.e_diag >= row.e_exact - 1e-10


def test_hf_restricted_and_full_couplings_agree():
    partition = {"inactive": [0, 1, 2], "active": [3, 4, 5]}
    restricted, _ = scan("hf", HF_BONDS, partition=partition)
    full, _ = scan("hf", HF_BONDS, partition=partition, pt={"restrict_3rdm": False})

    for short, long in zip(restricted.rows, full.rows):
        assert short.rdm_order_used <= 3
        assert short.e_pt2 == pytest.approx(long.e_pt2, abs=1e-6)


def test_n2_potential_energy_surface():
    table, references = scan(
        "n2",
        N2_BONDS,
        partition={"inactive": [0, 1, 2], "active": list(range(3, 10))},
        pt={"also_diagonalize": False},
    )

    assert table.failures == 0
    errors = [row.e_pt2 - references[row.label] for row in table.rows]
    accurate = sum(abs(error) <= CHEMICAL_ACCURACY for error in errors)
    assert accurate >= 0.75 * len(errors)
    for row, error in zip(table.rows, errors):
        assert abs(error) < abs(row.e_vqe - references[row.label])


def _f2_partition(integrals) -> dict:
    """Pair the lowest virtual with the occupied orbital giving the lowest two-orbital CASCI."""
    lumo = integrals.n_electrons // 2
    energies = {}
    for occupied in range(lumo):
        inactive = [orbital for orbital in range(lumo) if orbital != occupied]
        partition = partition_orbitals(integrals.n_orbitals, (), inactive, [occupied, lumo])
        energies[occupied] = casci(fold_core(integrals, partition)).energy
    bonding = min(energies, key=energies.get)
    return {"inactive": [orbital for orbital in range(lumo) if orbital != bonding], "active": [bonding, lumo]}


def test_noisy_f2_mitigation_ordering():
    errors = {f"{method}_{stage}": [] for method in ("vqe", "pt2") for stage in ("raw", "sv", "sv_rdm")}

    for bond in F2_BONDS:
        path, integrals, e_fci = load("f2", bond)
        partition = _f2_partition(integrals)
        for seed in range(10):
            config = RunConfig.model_validate(
                {
                    "geometries": [{"bond_length": bond, "fcidump": path}],
                    "seed": seed,
                    "partition": partition,
                    "vqe": {"mode": "fixed_f2"},
                    "rdm": {
                        "mode": "shots",
                        "shots": 10_000,
                        "noise": {"depol_p": 0.01, "readout_p01": 0.02, "readout_p10": 0.02},
                    },
                    "mitigation": {"sv": True, "rdm_reconstruct": True},
                    "pt": {"also_diagonalize": False},
                }
            )
            (row,) = run_pes(config).rows
            assert not row.failed
            for key in errors:
                errors[key].append(abs(getattr(row, f"e_{key}") - e_fci))

    mean = {key: float(np.mean(values)) for key, values in errors.items()}
    for method in ("vqe", "pt2"):
        assert mean[f"{method}_raw"] > mean[f"{method}_sv"] > mean[f"{method}_sv_rdm"]
    for stage in ("raw", "sv", "sv_rdm"):
        assert mean[f"pt2_{stage}"] < mean[f"vqe_{stage}"]


def _lifted_distance(left, right) -> float:
    return float(np.sqrt(sum(np.linalg.norm(getattr(left, name) - getattr(right, name)) ** 2 for name in ("d2", "q2", "g2"))))


def test_reconstruction_suite():
    rng = np.random.default_rng(2024)
    improved = 0
    trials = 50
    for trial in range(trials):
        state = random_sector_state(6, 3, seed=100 + trial, complex_valued=False)
        d2 = compute_rdm(state, 2)
        exact = build_bundle(d2, 3)
        noise = rng.normal(size=d2.matrix.shape)
        noise = (noise + noise.T) / 2
        noise *= rng.uniform(0.01, 0.1) / np.linalg.norm(noise)

        result = reconstruct_rdm(2.0 * d2.matrix.real + noise, 3, max_sweeps=500)

        assert result.after.is_positive(tolerance=1e-8)
        assert result.report.trace_residual <= 1e-8
        if _lifted_distance(result.after, exact) < _lifted_distance(result.before, exact):
            improved += 1

        drift = reconstruct_rdm(d2, 3).rdm.matrix - d2.matrix
        assert np.max(np.abs(drift)) <= 1e-9
    assert improved >= 0.9 * trials


def test_cumulant_suite():
    for occupied in ([0, 1, 2], [1, 3, 4], [0, 2, 5]):
        state = determinant_state(6, occupied)
        d1, d2, d3 = (compute_rdm(state, k) for k in (1, 2, 3))
        np.testing.assert_allclose(cumulant_3rdm(d1, d2).matrix, d3.matrix, atol=1e-10)

    for seed in range(20):
        state = random_sector_state(6, 3, seed=seed, complex_valued=bool(seed % 2))
        d1, d2 = compute_rdm(state, 1), compute_rdm(state, 2)
        product = wedge(d1, d1)
        tensor = product.to_tensor()

        np.testing.assert_allclose(tensor, -tensor.transpose(1, 0, 2, 3), atol=1e-12)
        np.testing.assert_allclose(tensor, -tensor.transpose(0, 1, 3, 2), atol=1e-12)
        np.testing.assert_allclose((connected_rdm(d1, d2) + product).matrix, d2.matrix, atol=1e-12)
