"""Small-scale property suite behind ``monoeit selftest``.

Functions are looked up through their modules at call time so that tests
can inject faults and confirm that the matching property fails.
"""
from __future__ import annotations

import time

import numpy as np

from . import cm_bridge, fem, mesh, monotonicity, spectral, synthdata

K = 16
Z = 0.1


def _setup(h: float = 0.04, k: int = K):
    m = mesh.disk_mesh_for_electrodes(h, k)
    layout = mesh.build_electrode_layout(m, k)
    basis = synthdata.current_basis("gram_schmidt", k)
    return m, layout, basis


def _r(m, layout, basis, gamma, z=Z):
    return fem.measurement_matrix(fem.assemble_cem_system(m, layout, gamma, z), basis)


def check_cem_monotonicity(rng):
    m, layout, basis = _setup()
    worst = 0.0
    for _ in range(4):
        g_small = rng.uniform(0.5, 2.0, m.n_triangles)
        g_big = g_small + rng.uniform(0.0, 1.0, m.n_triangles) * (rng.random(m.n_triangles) < 0.3)
        d = _r(m, layout, basis, g_small).entries - _r(m, layout, basis, g_big).entries
        worst = min(worst, spectral.min_eigenvalue(d) / max(spectral.spectral_norm(d), 1e-300))
    return worst >= -1e-9, f"worst relative min eig {worst:.2e}"


def check_scaling_law(rng):
    m, layout, basis = _setup()
    g = rng.uniform(0.5, 2.0, m.n_triangles)
    a = _r(m, layout, basis, 2 * g, Z / 2).entries
    b = _r(m, layout, basis, g, Z).entries
    err = np.linalg.norm(a - b / 2, 2) / np.linalg.norm(b, 2)
    return err <= 1e-10, f"relative defect {err:.2e}"


def check_spectral_continuity(rng):
    bad = 0
    for _ in range(200):
        n = rng.integers(2, 20)
        s = rng.standard_normal((n, n))
        t = s + rng.standard_normal((n, n)) * rng.uniform(1e-6, 1.0)
        bad += not spectral.spectral_continuity_check(s + s.T, t + t.T)
    return bad == 0, f"{bad} violations in 200 pairs"


def check_semidefiniteness_transfer(rng):
    m, layout, basis = _setup()
    ext = mesh.build_extended_electrodes(layout)
    ops = cm_bridge.ProjectionOperators(layout, ext, Z, cm_bridge.BoundaryGrid(1024))
    disagree = 0
    for i in range(100):
        b = rng.standard_normal((K - 1, K - 1))
        a = b @ b.T if i % 2 else b + b.T
        v = cm_bridge.semidefiniteness_transfer_check(a, ops, basis.frame, n_random=5, seed=i)
        disagree += v[0] != v[1]
    return disagree == 0, f"{disagree} disagreements in 100 matrices"


def frechet_quotient_errors(m, layout, basis, tris, steps=(1e-2, 1e-3), z=Z):
    """``||(R(1 + t chi_K) - R(1)) / t - R'(1) chi_K||`` for each triangle and step."""
    g0 = np.ones(m.n_triangles)
    s0 = fem.assemble_cem_system(m, layout, g0, z)
    r0 = fem.measurement_matrix(s0, basis).entries
    tensor = fem.sensitivity_tensor(s0, basis, tris)
    out = np.empty((len(tris), len(steps)))
    for i, t in enumerate(tris):
        deriv = tensor.block(t)
        for j, step in enumerate(steps):
            g = g0.copy()
            g[t] += step
            diff = _r(m, layout, basis, g, z).entries - r0
            out[i, j] = np.linalg.norm(diff / step - deriv, 2)
    return out


def check_frechet(rng):
    m, layout, basis = _setup(0.05)
    err = frechet_quotient_errors(m, layout, basis, rng.choice(m.n_triangles, 4, replace=False))
    ratios = err[:, 0] / err[:, 1]
    ok = bool(np.all((ratios >= 8.0) & (ratios <= 12.0)))
    return ok, "remainder ratios " + ", ".join(f"{r:.2f}" for r in ratios)


def check_linearization_bound(rng):
    m, layout, basis = _setup(0.03)
    cells = mesh.build_hex_test_sets(m, 0.15)
    s0 = fem.assemble_cem_system(m, layout, np.ones(m.n_triangles), Z)
    r0 = fem.measurement_matrix(s0, basis).entries
    blocks = fem.cell_sensitivities(fem.sensitivity_tensor(s0, basis), cells)
    worst = 0.0
    for i in rng.choice(len(cells), 4, replace=False):
        g = np.ones(m.n_triangles)
        g[cells.cells[i].triangles] += 1.0
        gap = _r(m, layout, basis, g).entries - r0 - blocks[i]
        worst = min(worst, spectral.min_eigenvalue(gap) / spectral.spectral_norm(blocks[i]))
    return worst >= -1e-9, f"worst relative min eig {worst:.2e}"


def check_data_symmetry(rng):
    m, layout, basis = _setup()
    v = _r(m, layout, basis, rng.uniform(0.5, 2.0, m.n_triangles)).voltages
    noisy = v * (1.0 + 5e-3 * rng.standard_normal(v.shape))
    vd = spectral.symmetrize_data(noisy, basis.matrix)
    raw = basis.to_frame(vd)
    asym = np.linalg.norm(raw - raw.T) / np.linalg.norm(raw)
    mean = np.abs(vd.sum(axis=0)).max()
    return asym <= 1e-12 and mean <= 1e-12, f"asymmetry {asym:.2e}, column mean {mean:.2e}"


def check_inverse_crime(rng):
    m, layout, basis = _setup(0.03)
    cells = mesh.build_hex_test_sets(m, 0.15)
    phantom = synthdata.two_disk_phantom(1.0, 1.0)
    gamma = synthdata.rasterize_phantom(phantom, m)
    s0 = fem.assemble_cem_system(m, layout, np.ones(m.n_triangles), Z)
    r0 = fem.measurement_matrix(s0, basis)
    r = _r(m, layout, basis, gamma)
    blocks = fem.cell_sensitivities(fem.sensitivity_tensor(s0, basis), cells)
    lam = monotonicity.cell_min_eigenvalues(r0.entries - r.entries, blocks, 0.5, 0.0)
    inside = np.array([np.all(gamma.values[c.triangles] > 1.5) for c in cells])
    tol = 1e-7 * spectral.spectral_norm(r0.entries)
    ok = bool(inside.any() and np.all(lam[inside] >= -tol))
    return ok, f"{int(inside.sum())} inside cells, worst {lam[inside].min() / tol:.2e} x tol"


def check_sandwich(rng):
    ks = (8, 16)
    angles = np.unique(np.concatenate([mesh.electrode_snap_angles(k, 0.5) for k in ks]))
    m = mesh.generate_disk_mesh(0.03, snap_angles=angles)
    rep = monotonicity.sandwich_experiment(m, synthdata.two_disk_phantom(1.0, 1.0), ks, [0.0, 5e-3],
                                           diam=0.15, beta=0.5, ref_modes=32, z=Z)
    return rep.ok, "; ".join(f"k={r.k} sigma={r.sigma:g}: {r.n_ref}<={r.n_alpha}<={r.n_lambda}" for r in rep.rows)


def check_algorithm_monotonicity(rng):
    m, layout, basis = _setup(0.03)
    cells = mesh.build_hex_test_sets(m, 0.15)
    s0 = fem.assemble_cem_system(m, layout, np.ones(m.n_triangles), Z)
    r0 = fem.measurement_matrix(s0, basis)
    rd = _r(m, layout, basis, synthdata.rasterize_phantom(synthdata.two_disk_phantom(), m))
    blocks = fem.cell_sensitivities(fem.sensitivity_tensor(s0, basis), cells)
    grid = np.array([[monotonicity.algorithm1(
        blocks, r0, rd, cells, monotonicity.ReconstructionConfig(b, alpha=a)).values
        for b in (0.4, 0.8, 1.6)] for a in (0.0, 1e-4, 1e-3)])
    up_alpha = np.all(np.diff(grid, axis=0) >= 0)
    down_beta = np.all(np.diff(grid, axis=1) <= 0)
    return bool(up_alpha and down_beta), f"alpha-monotone {up_alpha}, beta-monotone {down_beta}"


def check_quadrature_adjoint(rng):
    m, layout, _ = _setup()
    ops = cm_bridge.ProjectionOperators(layout, mesh.build_extended_electrodes(layout), Z)
    w = rng.standard_normal(K)
    f = rng.standard_normal(ops.grid.n)
    gap = abs(ops.grid.inner(ops.Q(w), f) - w @ ops.Qstar(f))
    return gap <= 1e-8, f"adjointness gap {gap:.2e}"


CHECKS = [
    ("CEM monotonicity", check_cem_monotonicity),
    ("scaling law", check_scaling_law),
    ("spectral continuity", check_spectral_continuity),
    ("semidefiniteness transfer", check_semidefiniteness_transfer),
    ("Frechet derivative", check_frechet),
    ("linearization bound", check_linearization_bound),
    ("data symmetry", check_data_symmetry),
    ("inverse-crime definiteness", check_inverse_crime),
    ("sandwich inclusions", check_sandwich),
    ("algorithm monotonicity", check_algorithm_monotonicity),
    ("Q/Q* adjointness", check_quadrature_adjoint),
]


def run_all(seed: int = 2024):
    """``(name, passed, detail)`` for every property."""
    out = []
    for name, fn in CHECKS:
        rng = np.random.default_rng(seed)
        t = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash counts as a failed property
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), f"{detail} [{time.perf_counter() - t:.1f} s]"))
    return out
