import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from monoeit import mesh, synthdata
from monoeit.synthdata import Inclusion, NoiseSpec, Phantom

from conftest import Setup


def test_no_inclusions_gives_constant_field():
    m = mesh.generate_disk_mesh(0.1)
    g = synthdata.rasterize_phantom(Phantom(1.7), m)
    assert np.all(g.values == 1.7)


def _flagged_fraction(h, radius=0.3):
    m = mesh.generate_disk_mesh(h)
    g = synthdata.rasterize_phantom(Phantom(1.0, (Inclusion("disk", 1.0, radius=radius),)), m)
    return m.areas[g.values > 1.5].sum() / math.pi


def test_disk_area_fraction():
    assert abs(_flagged_fraction(0.0117) / 0.09 - 1) <= 0.03


def test_rasterized_area_converges():
    errs = [abs(_flagged_fraction(h) - 0.09) for h in (0.04, 0.02, 0.01)]
    assert errs[2] < errs[0]
    assert errs[2] <= 0.01 * 0.09


def test_resistive_contrast_too_large():
    m = mesh.generate_disk_mesh(0.1)
    p = Phantom(1.0, (Inclusion("disk", 1.0, sign="resistive", radius=0.3),))
    with pytest.raises(ValueError):
        synthdata.rasterize_phantom(p, m)


def test_inclusion_must_be_inside_disk():
    with pytest.raises(ValueError):
        Inclusion("disk", 1.0, center=(0.8, 0.0), radius=0.3)
    with pytest.raises(ValueError):
        Inclusion("polygon", 1.0, vertices=((0, 0), (1.2, 0), (0, 0.5)))


def test_l_shape_geometry():
    p = synthdata.l_shape_phantom()
    inc = p.inclusions[0]
    assert inc.area == pytest.approx(0.9 ** 2 * 0.75)
    inside = inc.contains(np.array([[-0.2, -0.2], [0.2, 0.2], [0.2, -0.2], [-0.2, 0.2]]))
    assert inside.tolist() == [True, False, True, True]
    assert inc.distance(np.array([[0.2, 0.2]]))[0] == pytest.approx(0.2)


def test_phantom_presets_and_signs():
    assert synthdata.resistive_phantom().sign == "resistive"
    assert synthdata.two_disk_phantom().sign == "conductive"
    assert synthdata.two_disk_phantom().beta_bound() == pytest.approx(0.8)
    assert synthdata.three_disk_phantom().beta_bound() == pytest.approx(2 / 3)
    mixed = Phantom(1.0, (Inclusion("disk", 1.0, radius=0.1),
                          Inclusion("disk", 0.5, sign="resistive", center=(0.5, 0), radius=0.1)))
    with pytest.raises(ValueError):
        mixed.sign


def test_phantom_file_roundtrip(tmp_path):
    for name, make in synthdata.PHANTOMS.items():
        p = make()
        synthdata.write_phantom(p, tmp_path / f"{name}.json")
        assert synthdata.read_phantom(tmp_path / f"{name}.json") == p


def test_gram_schmidt_k3():
    m = synthdata.current_basis("gram_schmidt", 3).matrix
    assert np.allclose(m[:, 0], [1 / math.sqrt(2), -1 / math.sqrt(2), 0])
    assert np.allclose(m[:, 1], [1 / math.sqrt(6), 1 / math.sqrt(6), -2 / math.sqrt(6)])


def test_dipole_k4_patterns():
    m = synthdata.current_basis("dipole", 4, amplitude=1e-3).matrix
    for col in m.T:
        nz = col[col != 0]
        assert len(nz) == 2 and sorted(nz.tolist()) == [-1e-3, 1e-3]


@given(st.integers(2, 40))
def test_gram_schmidt_orthonormal(k):
    m = synthdata.current_basis("gram_schmidt", k).matrix
    assert np.allclose(m.T @ m, np.eye(k - 1), atol=1e-12)
    assert np.abs(m.sum(axis=0)).max() <= 1e-12


@given(st.integers(1, 20).map(lambda n: 2 * n), st.sampled_from(["trig", "dipole", "gram_schmidt"]))
def test_bases_are_mean_free_and_full_rank(k, kind):
    m = synthdata.current_basis(kind, k).matrix
    assert m.shape == (k, k - 1)
    assert np.linalg.matrix_rank(m) == k - 1


def test_trig_needs_even_k():
    with pytest.raises(ValueError):
        synthdata.current_basis("trig", 7)
    with pytest.raises(ValueError):
        synthdata.current_basis("fourier", 8)


def test_noise_sigma_zero_is_identity():
    basis = synthdata.current_basis("gram_schmidt", 8)
    v = np.random.default_rng(0).standard_normal((8, 7))
    noisy = synthdata.apply_noise(v, NoiseSpec(0.0, 3), basis)
    assert np.array_equal(noisy.v_tilde, v)
    v_tilde, delta = noisy
    assert delta == 0.0


def test_noise_is_reproducible_and_seed_dependent():
    basis = synthdata.current_basis("gram_schmidt", 8)
    v = np.random.default_rng(0).standard_normal((8, 7))
    a = synthdata.apply_noise(v, NoiseSpec(5e-3, 11), basis)
    b = synthdata.apply_noise(v, NoiseSpec(5e-3, 11), basis)
    c = synthdata.apply_noise(v, NoiseSpec(5e-3, 12), basis)
    assert a.v_tilde.tobytes() == b.v_tilde.tobytes()
    assert not np.array_equal(a.v_tilde, c.v_tilde)


def test_gaussian_sampler_moments():
    y = synthdata.gaussian((200_000,), 0)
    assert abs(y.mean()) < 0.01 and abs(y.std() - 1) < 0.01
    assert np.array_equal(synthdata.gaussian((3, 4), 9), synthdata.gaussian((3, 4), 9))


def test_negative_sigma_rejected():
    with pytest.raises(ValueError):
        NoiseSpec(-1e-3)


def test_relative_error_near_half_percent(medium):
    v = synthdata.simulate_voltages(synthdata.two_disk_phantom(), medium.mesh, 16, 0.1, medium.basis)
    noisy = synthdata.apply_noise(v, NoiseSpec(5e-3, 0), medium.basis)
    assert 0.0025 <= noisy.relative_error <= 0.01
    # delta is the exact norm of the frame-form perturbation
    clean = medium.basis.to_frame(synthdata.symmetrize_data(v, medium.basis.matrix))
    pert = medium.basis.to_frame(noisy.v_delta) - clean
    assert noisy.delta == pytest.approx(np.abs(np.linalg.eigvalsh(0.5 * (pert + pert.T))).max(), rel=1e-12)


def test_bases_give_congruent_measurement_maps():
    s = Setup(0.04, 8)
    g = synthdata.rasterize_phantom(synthdata.two_disk_phantom(), s.mesh)
    system = s.system(g.values)
    from monoeit import fem

    eigs = []
    for kind in ("gram_schmidt", "dipole", "trig"):
        rm = fem.measurement_matrix(system, synthdata.current_basis(kind, 8))
        eigs.append(np.linalg.eigvalsh(rm.entries))
    assert np.allclose(eigs[0], eigs[1], atol=1e-8) and np.allclose(eigs[0], eigs[2], atol=1e-8)
    # explicit change of basis between dipole and orthonormal coordinates
    gs, dp = synthdata.current_basis("gram_schmidt", 8), synthdata.current_basis("dipole", 8)
    a_gs = fem.measurement_matrix(system, gs).pinv_form
    a_dp = fem.measurement_matrix(system, dp).pinv_form
    c = gs.matrix.T @ dp.matrix  # dipole patterns in orthonormal coordinates
    assert np.allclose(c @ a_dp, a_gs @ c, atol=1e-10)


def test_voltage_file_roundtrip(tmp_path):
    v = np.random.default_rng(5).standard_normal((6, 5))
    synthdata.write_voltages(tmp_path / "v.csv", v, "dipole", 0.005, 7)
    back, meta = synthdata.read_voltages(tmp_path / "v.csv")
    assert np.array_equal(back, v)
    assert meta == {"k": 6, "basis": "dipole", "sigma": 0.005, "seed": 7}
