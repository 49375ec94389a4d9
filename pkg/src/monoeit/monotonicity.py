"""Linearized monotonicity tests and the reconstruction algorithms built on them.

Sign conventions live here only. With ``S_B`` the (negative semidefinite)
derivative of the measurement map in the direction of a test set ``B``:

* conductive inclusions, ``beta > 0``:  ``R0 + beta S_B - Rd + alpha Id``
* resistive inclusions, ``beta < 0``:   ``Rd - R0 + |beta| S_B + alpha Id``

so in both cases the probe term pushes the spectrum down as ``|beta|``
grows and the test passes for cells inside the inclusion.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fem import (
    MeasurementMatrix,
    SensitivityTensor,
    assemble_cem_system,
    cell_sensitivities,
    measurement_matrix,
    sensitivity_tensor,
)
from .mesh import TestSetCollection
from .spectral import min_eigenvalues, spectral_norm

log = logging.getLogger(__name__)

SIGNS = ("conductive", "resistive")


@dataclass(frozen=True)
class ReconstructionConfig:
    beta: float | tuple[float, ...]
    mu: float = 1.0
    sign: str = "conductive"
    algorithm: int = 1
    alpha: float | None = None  # overrides the mu rule when set
    threads: int = 1

    def __post_init__(self):
        if self.sign not in SIGNS:
            raise ValueError(f"sign must be one of {SIGNS}")
        if self.algorithm not in (1, 2):
            raise ValueError("algorithm must be 1 or 2")
        betas = self.betas
        if not betas:
            raise ValueError("empty beta list")
        if self.algorithm == 1 and len(betas) != 1:
            raise ValueError("algorithm 1 takes a single beta")
        want = 1.0 if self.sign == "conductive" else -1.0
        if any(not (b * want > 0) for b in betas):
            raise ValueError(f"{self.sign} tests need {'positive' if want > 0 else 'negative'} beta")
        mags = [abs(b) for b in betas]
        if any(b <= a for a, b in zip(mags, mags[1:])):
            raise ValueError("beta list must be strictly increasing in magnitude")

    @property
    def betas(self) -> tuple[float, ...]:
        if np.ndim(self.beta) == 0:
            return (float(self.beta),)
        return tuple(float(b) for b in self.beta)


def beta_schedule(start: float, step: float, stages: int = 1000) -> tuple[float, ...]:
    """``start + step * j`` for ``j = 1..stages``."""
    if stages < 1:
        raise ValueError("need at least one stage")
    return tuple(start + step * j for j in range(1, stages + 1))


@dataclass(frozen=True, eq=False)
class IndicatorField:
    values: np.ndarray
    cells: TestSetCollection
    algorithm: int
    min_eigs: np.ndarray | None = field(default=None, repr=False)

    @property
    def support(self) -> np.ndarray:
        return self.values > 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "ind"])
            for (x, y), v in zip(self.cells.centers, self.values):
                w.writerow([f"{x:.17g}", f"{y:.17g}", f"{v:.17g}"])


def read_indicator_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Centers (n, 2) and values (n,) from an indicator file."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["x", "y", "ind"]:
        raise ValueError(f"{path}: bad header {rows[0]}")
    data = np.array(rows[1:], dtype=float).reshape(-1, 3)
    return data[:, :2], data[:, 2]


def _check_pair(r0: MeasurementMatrix, rd: MeasurementMatrix) -> None:
    if r0.entries.shape != rd.entries.shape:
        raise ValueError(f"dimension mismatch {r0.entries.shape} vs {rd.entries.shape}")


def data_difference(r0: MeasurementMatrix, rd: MeasurementMatrix, sign: str = "conductive") -> np.ndarray:
    """The probe-free part of the test matrix."""
    _check_pair(r0, rd)
    if sign == "conductive":
        return r0.entries - rd.entries
    if sign == "resistive":
        return rd.entries - r0.entries
    raise ValueError(f"sign must be one of {SIGNS}")


def regularization_alpha(r0: MeasurementMatrix, rd: MeasurementMatrix, mu: float,
                         sign: str = "conductive") -> float:
    """``-mu`` times the smallest eigenvalue of the probe-free test matrix; may be negative."""
    d = data_difference(r0, rd, sign)
    return float(-mu * np.linalg.eigvalsh(d)[0])


def cell_min_eigenvalues(base: np.ndarray, blocks: np.ndarray, beta: float, alpha: float,
                         threads: int = 1) -> np.ndarray:
    """Smallest eigenvalue of ``base + |beta| blocks[i] + alpha Id`` for every cell."""
    def run(chunk):
        return min_eigenvalues(base[None] + abs(beta) * blocks[chunk]) + alpha

    n = len(blocks)
    if n == 0:
        return np.zeros(0)
    if threads == 1 or n < 64:
        return run(slice(None))
    workers = threads if threads > 0 else None
    bounds = np.linspace(0, n, 2 * (workers or 8) + 1).astype(int)
    chunks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return np.concatenate(list(pool.map(run, chunks)))


def _prepare(sens, r0, rd, cells, config):
    blocks = sens if isinstance(sens, np.ndarray) else cell_sensitivities(sens, cells)
    base = data_difference(r0, rd, config.sign)
    alpha = config.alpha if config.alpha is not None else regularization_alpha(r0, rd, config.mu, config.sign)
    return blocks, base, alpha


def algorithm1(sens: SensitivityTensor | np.ndarray, r0: MeasurementMatrix, rd: MeasurementMatrix,
               cells: TestSetCollection, config: ReconstructionConfig) -> IndicatorField:
    """Indicator ``max(0, smallest eigenvalue of the regularized test matrix)`` per cell.

    ``sens`` is either a sensitivity tensor or precomputed cell sums.
    """
    if config.algorithm != 1:
        raise ValueError("config is not for algorithm 1")
    blocks, base, alpha = _prepare(sens, r0, rd, cells, config)
    lam = cell_min_eigenvalues(base, blocks, config.betas[0], alpha, config.threads)
    return IndicatorField(np.maximum(lam, 0.0), cells, 1, lam)


def algorithm2(sens: SensitivityTensor | np.ndarray, r0: MeasurementMatrix, rd: MeasurementMatrix,
               cells: TestSetCollection, config: ReconstructionConfig) -> IndicatorField:
    """Number of consecutive tests passed along the beta schedule.

    Cells that fail a stage leave the active set and are never retested.
    """
    betas = config.betas
    if not betas:
        raise ValueError("empty beta list")
    blocks, base, alpha = _prepare(sens, r0, rd, cells, config)
    count = np.zeros(len(blocks))
    active = np.arange(len(blocks))
    for beta in betas:
        if active.size == 0:
            break
        lam = cell_min_eigenvalues(base, blocks[active], beta, alpha, config.threads)
        active = active[lam >= 0]
        count[active] += 1
    return IndicatorField(count, cells, 2)


def reconstruct(sens, r0, rd, cells, config: ReconstructionConfig) -> IndicatorField:
    run = algorithm1 if config.algorithm == 1 else algorithm2
    return run(sens, r0, rd, cells, config)


def nonlinear_test_matrix(mesh, layout, gamma0, beta: float, cell, rd: MeasurementMatrix, z) -> np.ndarray:
    """``R(gamma0 + beta chi_B) - Rd`` in the frame of ``rd``'s basis."""
    g = np.array(getattr(gamma0, "values", gamma0), dtype=float)
    if g.ndim == 0:
        g = np.full(mesh.n_triangles, float(g))
    g[np.asarray(getattr(cell, "triangles", cell))] += beta
    system = assemble_cem_system(mesh, layout, g, z)
    return measurement_matrix(system, rd.basis).entries - rd.entries


# ---------------------------------------------------------------- sandwich


@dataclass(frozen=True)
class SandwichRow:
    k: int
    sigma: float
    delta: float
    alpha: float
    lam: float
    omega: float
    n_ref: int
    n_alpha: int
    n_lambda: int
    left_ok: bool
    right_ok: bool
    symdiff: int
    outside: int


@dataclass(frozen=True)
class SandwichReport:
    rows: tuple
    n_cells: int
    ref_modes: int

    @property
    def ok(self) -> bool:
        return all(r.left_ok and r.right_ok for r in self.rows)


def sandwich_experiment(mesh, phantom, ks, noise_levels, diam: float = 0.053, beta: float = 0.5,
                        ref_modes: int = 64, z=1e-3, coverage: float = 0.5, seed: int = 0,
                        rel_tol: float = 1e-10, cells: TestSetCollection | None = None) -> SandwichReport:
    """Cell-set inclusions between electrode tests and a continuum reference.

    The reference test is the linearized continuum test on the first
    ``ref_modes`` trigonometric densities. Electrode tests use ``alpha =
    delta`` and are compared after scaling by the extended-electrode length
    ``2 pi / k``, which maps their eigenvalues to continuum units. ``lam``
    is ``2 (omega + delta)`` with ``omega`` the largest per-cell distance
    between both tests on the first ``2k`` densities.
    """
    from .cm_bridge import BoundaryGrid, CmCurrentBasis, CmTestModel, ProjectionOperators, cm_forward_nd
    from .mesh import build_electrode_layout, build_extended_electrodes, build_hex_test_sets
    from .synthdata import NoiseSpec, apply_noise, current_basis, rasterize_phantom

    ks = list(ks)
    gamma = rasterize_phantom(phantom, mesh)
    gamma0 = np.full(mesh.n_triangles, phantom.gamma0)
    cells = cells or build_hex_test_sets(mesh, diam)

    cm_basis = CmCurrentBasis(ref_modes)
    model = CmTestModel(mesh, gamma0, cm_basis)
    data = cm_forward_nd(mesh, gamma, cm_basis)
    ref_tests = np.array([model.test_matrix(beta, c, data) for c in cells])
    ref_eigs = min_eigenvalues(ref_tests)
    ref_scale = max(spectral_norm(model.lambda0 - data), spectral_norm(model.lambda0))
    in_ref = ref_eigs >= -rel_tol * ref_scale
    ref_inf = np.minimum(ref_eigs, 0.0)

    grid = BoundaryGrid()
    rows = []
    for k in ks:
        if 2 * k > ref_modes:
            raise ValueError(f"ref_modes={ref_modes} too small for k={k}")
        layout = build_electrode_layout(mesh, k, coverage)
        ops = ProjectionOperators(layout, build_extended_electrodes(layout), z, grid)
        basis = current_basis("gram_schmidt", k)
        sys0 = assemble_cem_system(mesh, layout, gamma0, z)
        r0 = measurement_matrix(sys0, basis)
        blocks = cell_sensitivities(sensitivity_tensor(sys0, basis), cells)
        r_clean = measurement_matrix(assemble_cem_system(mesh, layout, gamma, z), basis)

        # first 2k trig densities in frame coordinates of R^k
        m = np.r_[np.arange(k), ref_modes // 2 + np.arange(k)]
        coords = basis.frame.T @ ops.Qstar(cm_basis(grid.theta)[:, m])
        clean_tests = r0.entries[None] + beta * blocks - r_clean.entries[None]
        proj = np.einsum("ia,nij,jb->nab", coords, clean_tests, coords)
        omega = float(max(spectral_norm(t[np.ix_(m, m)] - p) for t, p in zip(ref_tests, proj)))

        scale = 2.0 * math.pi / k
        for sigma in noise_levels:
            noisy = apply_noise(r_clean.voltages, NoiseSpec(sigma, seed), basis)
            rd_entries = basis.to_frame(noisy.v_delta)
            rd_entries = 0.5 * (rd_entries + rd_entries.T)
            delta = scale * noisy.delta
            tests = scale * (r0.entries[None] + beta * blocks - rd_entries[None])
            eigs = min_eigenvalues(tests)
            in_alpha = eigs + delta >= -rel_tol * scale * spectral_norm(r0.entries)
            lam = 2.0 * (omega + delta)
            in_lambda = ref_inf + lam >= 0
            left = bool(np.all(in_alpha[in_ref]))
            right = bool(np.all(in_lambda[in_alpha]))
            rows.append(SandwichRow(
                k, float(sigma), float(delta), float(delta), float(lam), omega,
                int(in_ref.sum()), int(in_alpha.sum()), int(in_lambda.sum()), left, right,
                int(np.sum(in_alpha ^ in_ref)), int(np.sum(in_alpha & ~in_lambda)),
            ))
            log.info("sandwich k=%d sigma=%g: |M0|=%d |Ma|=%d |Ml|=%d", k, sigma,
                     in_ref.sum(), in_alpha.sum(), in_lambda.sum())
    return SandwichReport(tuple(rows), len(cells), ref_modes)
