import csv
import json
from pathlib import Path

import numpy as np
import pytest

from monoeit import cli, fem, monotonicity as mono, selftest, spectral, synthdata

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"
FAST = ["--set", "mesh_h=0.03", "--set", "diam=0.15"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def two_disk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("two_disk")
    cfg = EXPERIMENTS / "two_disk_noiseless_alg1.json"
    assert run("simulate", "--config", cfg, "--out", out, *FAST) == 0
    assert run("reconstruct", "--config", cfg, "--out", out, *FAST) == 0
    return out


def test_simulate_writes_data_and_metadata(two_disk_run):
    v, meta = synthdata.read_voltages(two_disk_run / "voltages.csv")
    assert v.shape == (16, 15) and meta["sigma"] == 0.0
    info = json.loads((two_disk_run / "metadata.json").read_text())
    assert info["k"] == 16 and info["relative_error"] < 1e-12  # symmetrization rounding only
    assert info["sim_mesh_h"] < 0.03  # simulation mesh is finer than the reconstruction mesh


def test_simulate_is_bit_identical(tmp_path, two_disk_run):
    cfg = EXPERIMENTS / "two_disk_noiseless_alg1.json"
    assert run("simulate", "--config", cfg, "--out", tmp_path, *FAST) == 0
    assert (tmp_path / "voltages.csv").read_bytes() == (two_disk_run / "voltages.csv").read_bytes()


def test_reconstruction_is_bit_identical(tmp_path, two_disk_run):
    cfg = EXPERIMENTS / "two_disk_noiseless_alg1.json"
    assert run("reconstruct", "--config", cfg, "--out", tmp_path, "--set",
               f"data={two_disk_run / 'voltages.csv'}", "--threads", "0", *FAST) == 0
    for name in ("indicator.csv", "indicator.pgm"):
        assert (tmp_path / name).read_bytes() == (two_disk_run / name).read_bytes()


def test_reconstruction_overlaps_both_disks(two_disk_run):
    centers, values = mono.read_indicator_csv(two_disk_run / "indicator.csv")
    for inc in synthdata.two_disk_phantom().inclusions:
        assert np.any((values > 0) & inc.contains(centers))


def test_image_is_a_function_of_the_csv(two_disk_run, tmp_path):
    centers, values = mono.read_indicator_csv(two_disk_run / "indicator.csv")
    cli.write_pgm(cli.render_indicator(centers, values), tmp_path / "again.pgm")
    assert (tmp_path / "again.pgm").read_bytes() == (two_disk_run / "indicator.pgm").read_bytes()
    img = cli.read_pgm(two_disk_run / "indicator.pgm")
    assert img.shape == (256, 256) and img.max() == 255 and img[0, 0] == 0


def test_render_places_cells_at_their_polygons():
    s = 0.1
    centers = np.array([[0.0, 0.0], [1.5 * s, np.sqrt(3) / 2 * s]])
    img = cli.render_indicator(centers, np.array([2.0, 1.0]), size=200)
    assert img[100, 100] == 255  # pixel at the origin
    col = int((1.5 * s + 1) / 2 * 200)
    row = int((1 - np.sqrt(3) / 2 * s) / 2 * 200)
    assert img[row, col] == 128
    assert img[5, 5] == 0
    assert not cli.render_indicator(centers, np.zeros(2)).any()


def test_homogeneous_data_with_zero_alpha(tmp_path):
    args = ["--set", "phantom=homogeneous", "--set", "alpha=0", "--set", "inverse_crime=true", *FAST]
    assert run("simulate", "--out", tmp_path, *args) == 0
    assert run("reconstruct", "--out", tmp_path, *args) == 0
    _, values = mono.read_indicator_csv(tmp_path / "indicator.csv")
    assert not values.any()
    assert not cli.read_pgm(tmp_path / "indicator.pgm").any()


def test_noisy_simulation_reports_half_percent(tmp_path):
    assert run("simulate", "--out", tmp_path, "--set", "sigma=0.005", "--set", "seed=3", *FAST) == 0
    info = json.loads((tmp_path / "metadata.json").read_text())
    assert 0.0025 <= info["relative_error"] <= 0.01
    assert info["delta"] > 0


def test_resistive_settings_run(tmp_path):
    cfg = EXPERIMENTS / "resistive_noiseless_alg1.json"
    assert run("simulate", "--config", cfg, "--out", tmp_path, *FAST) == 0
    assert run("reconstruct", "--config", cfg, "--out", tmp_path, *FAST) == 0
    centers, values = mono.read_indicator_csv(tmp_path / "indicator.csv")
    assert values.max() > 0
    assert synthdata.resistive_phantom().distance(centers[np.argmax(values)][None])[0] < 0.1


def test_algorithm2_schedule_config(tmp_path, two_disk_run):
    cfg = EXPERIMENTS / "two_disk_noiseless_alg2.json"
    assert run("reconstruct", "--config", cfg, "--out", tmp_path,
               "--set", f"data={two_disk_run / 'voltages.csv'}", *FAST) == 0
    _, values = mono.read_indicator_csv(tmp_path / "indicator.csv")
    assert np.all(values == np.rint(values)) and values.max() >= 1


def test_missing_phantom_file(tmp_path, caplog):
    missing = tmp_path / "nope.json"
    assert run("simulate", "--out", tmp_path, "--set", f"phantom={missing}") == cli.EXIT_CONFIG
    assert str(missing) in caplog.text


def test_phantom_file_is_accepted(tmp_path):
    synthdata.write_phantom(synthdata.three_disk_phantom(), tmp_path / "p.json")
    assert run("simulate", "--out", tmp_path, "--set", f"phantom={tmp_path / 'p.json'}", *FAST) == 0


@pytest.mark.parametrize("argv", [
    ["--set", "bogus=1"],
    ["--set", "noequals"],
    ["--config", "/nonexistent/cfg.json"],
])
def test_config_errors(tmp_path, argv):
    assert run("simulate", "--out", tmp_path, *argv) == cli.EXIT_CONFIG


def test_data_mismatch_is_config_error(tmp_path, two_disk_run):
    data = two_disk_run / "voltages.csv"
    assert run("reconstruct", "--out", tmp_path, "--set", f"data={data}", "--set", "k=8", *FAST) == cli.EXIT_CONFIG
    assert run("reconstruct", "--out", tmp_path, "--set", f"data={data}", "--set", "basis=dipole", *FAST) == cli.EXIT_CONFIG
    assert run("reconstruct", "--out", tmp_path / "empty", *FAST) == cli.EXIT_CONFIG


def test_inconsistent_beta_is_config_error(tmp_path, two_disk_run):
    data = two_disk_run / "voltages.csv"
    assert run("reconstruct", "--out", tmp_path, "--set", f"data={data}", "--set", "beta=-0.5", *FAST) == cli.EXIT_CONFIG
    assert run("reconstruct", "--out", tmp_path, "--set", f"data={data}", "--set", "algorithm=2",
               "--set", "beta=[0.5, 0.2]", *FAST) == cli.EXIT_CONFIG


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def broken(*a, **kw):
        raise fem.SingularSystemError("factorization failed")

    monkeypatch.setattr(fem, "assemble_cem_system", broken)
    monkeypatch.setattr(synthdata, "simulate_voltages", broken)
    assert run("simulate", "--out", tmp_path, *FAST) == cli.EXIT_NUMERIC


def test_convergence_single_k(tmp_path):
    assert run("convergence", "--out", tmp_path, "--set", "phantom=homogeneous", "--set", "ks=[8]",
               "--set", "mesh_h=0.04") == 0
    with open(tmp_path / "convergence.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 2 and rows[1][0] == "8" and rows[1][3] == ""
    assert not (tmp_path / "sandwich.csv").exists()


def test_convergence_decreasing_with_sandwich(tmp_path):
    assert run("convergence", "--out", tmp_path, "--set", "phantom=two_disk", "--set", "ks=[4, 8, 16]",
               "--set", "mesh_h=0.03", "--set", "diam=0.15") == 0
    with open(tmp_path / "convergence.csv") as fh:
        rows = list(csv.DictReader(fh))
    dist = [float(r["norm_estimate"]) for r in rows]
    assert dist[0] > dist[1] > dist[2]
    with open(tmp_path / "sandwich.csv") as fh:
        sw = list(csv.DictReader(fh))
    assert len(sw) == 3 * 2
    assert all(r["left_ok"] == "True" and r["right_ok"] == "True" for r in sw)


def test_convergence_unsorted_ks(tmp_path):
    assert run("convergence", "--out", tmp_path, "--set", "ks=[16, 8]") == cli.EXIT_CONFIG


def test_selftest_passes(capsys):
    assert run("selftest") == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and f"{len(selftest.CHECKS)}/{len(selftest.CHECKS)}" in out


def test_selftest_catches_negated_sensitivities(monkeypatch, capsys):
    real = fem.cell_sensitivities
    monkeypatch.setattr(fem, "cell_sensitivities", lambda t, c: -real(t, c))
    assert run("selftest") == cli.EXIT_PROPERTY
    out = capsys.readouterr().out
    assert "FAIL  linearization bound" in out


def test_selftest_catches_missing_symmetrization(monkeypatch, capsys):
    monkeypatch.setattr(spectral, "symmetrize_data", lambda v, m: np.asarray(v, dtype=float))
    assert run("selftest") == cli.EXIT_PROPERTY
    assert "FAIL  data symmetry" in capsys.readouterr().out


def test_config_files_load():
    for path in sorted(EXPERIMENTS.glob("*.json")):
        cfg = cli.load_config(str(path), [])
        if path.name.startswith("table") or path.name.startswith("water"):
            rc = cfg.reconstruction(cfg.load_phantom().sign)
            assert rc.algorithm == cfg.algorithm


def test_beta_schedule_from_config():
    cfg = cli.load_config(None, ["beta={\"start\": 0.1, \"step\": 0.5, \"stages\": 3}", "algorithm=2"])
    assert cfg.betas() == pytest.approx((0.6, 1.1, 1.6))
    with pytest.raises(cli.ConfigError):
        cli.load_config(None, ["beta={\"start\": 0.1}"]).betas()
