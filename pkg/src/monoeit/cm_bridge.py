"""Continuum-model oracle and the projections linking it to electrode data.

Boundary functions live on a uniform angular grid of the unit circle
(cell midpoints), so every projection is a quadrature sum and adjointness
can be checked directly.
"""
from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    Conductivity,
    MeasurementMatrix,
    SingularSystemError,
    p1_geometry,
    stiffness_matrix,
)
from .mesh import ElectrodeLayout, ExtendedElectrodeLayout, Mesh
from .spectral import spectral_norm

TWO_PI = 2.0 * math.pi
DEFAULT_GRID = 4096

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(4)


@dataclass(frozen=True)
class CmCurrentBasis:
    """Densities ``cos(m t)/sqrt(pi)`` for m <= p/2, then ``sin((m - p/2) t)/sqrt(pi)``."""

    p: int

    def __post_init__(self):
        if self.p < 2 or self.p % 2:
            raise ValueError("p must be a positive even number")

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        """Values at ``theta``, shape (len(theta), p)."""
        theta = np.asarray(theta, dtype=float)[:, None]
        m = np.arange(1, self.p // 2 + 1)[None]
        return np.hstack([np.cos(m * theta), np.sin(m * theta)]) / math.sqrt(math.pi)


def boundary_loads(mesh: Mesh, density) -> np.ndarray:
    """``int f phi_i dS`` over the polygonal boundary for each column of ``density(theta)``."""
    e = mesh.boundary_edges
    pa, pb = mesh.nodes[e[:, 0]], mesh.nodes[e[:, 1]]
    ell = mesh.boundary_lengths
    s = 0.5 * (_GAUSS_X + 1.0)
    w = 0.5 * _GAUSS_W
    pts = pa[:, None] + s[None, :, None] * (pb - pa)[:, None]
    theta = np.arctan2(pts[..., 1], pts[..., 0]).ravel()
    f = density(theta)
    f = f.reshape(len(e), len(s), -1)
    wa = (ell[:, None] * w[None] * (1.0 - s)[None])
    wb = (ell[:, None] * w[None] * s[None])
    la = np.einsum("eq,eqc->ec", wa, f)
    lb = np.einsum("eq,eqc->ec", wb, f)
    out = np.zeros((mesh.n_nodes, f.shape[2]))
    np.add.at(out, e[:, 0], la)
    np.add.at(out, e[:, 1], lb)
    return out


def boundary_mass_vector(mesh: Mesh) -> np.ndarray:
    """``int phi_i dS`` over the polygonal boundary."""
    e = mesh.boundary_edges
    ell = mesh.boundary_lengths
    return np.bincount(e.ravel(), weights=np.repeat(ell / 2, 2), minlength=mesh.n_nodes)


class CmSystem:
    """Factorized Neumann problem with the ground condition ``int u dS = 0``."""

    def __init__(self, mesh: Mesh, gamma):
        self.mesh = mesh
        self.gamma = Conductivity.of(gamma)
        self.c = boundary_mass_vector(mesh)
        k = stiffness_matrix(mesh, self.gamma.values)
        c = sp.csr_matrix(self.c[:, None])
        self.matrix = sp.bmat([[k, c], [c.T, None]], format="csc")
        try:
            self._lu = spla.splu(self.matrix)
        except RuntimeError as exc:
            raise SingularSystemError(str(exc)) from exc

    def mean_free_loads(self, density) -> np.ndarray:
        f = boundary_loads(self.mesh, density)
        return f - np.outer(self.c, f.sum(axis=0) / self.c.sum())

    def solve(self, loads: np.ndarray) -> np.ndarray:
        n = self.mesh.n_nodes
        rhs = np.vstack([loads, np.zeros((1, loads.shape[1]))])
        x = self._lu.solve(rhs)
        res = rhs - self.matrix @ x
        if np.linalg.norm(res) > 1e-13 * np.linalg.norm(rhs):
            x = x + self._lu.solve(res)
        return x[:n]


def cm_forward_nd(mesh: Mesh, gamma, basis: CmCurrentBasis) -> np.ndarray:
    """Gram matrix ``<Lambda(gamma) f_l, f_m>`` of the Neumann-to-Dirichlet map."""
    system = CmSystem(mesh, gamma)
    loads = system.mean_free_loads(basis)
    u = system.solve(loads)
    g = loads.T @ u
    return 0.5 * (g + g.T)


class CmTestModel:
    """Background solutions for the linearized continuum test, computed once."""

    def __init__(self, mesh: Mesh, gamma0, basis: CmCurrentBasis):
        self.mesh = mesh
        self.basis = basis
        system = CmSystem(mesh, gamma0)
        self.gamma0 = system.gamma
        loads = system.mean_free_loads(basis)
        u = system.solve(loads)
        areas, grads, _, _, _ = p1_geometry(mesh)
        g = np.einsum("tic,tik->tkc", u[mesh.triangles], grads)
        self._factors = np.sqrt(areas)[:, None, None] * g
        lam = loads.T @ u
        self.lambda0 = 0.5 * (lam + lam.T)

    def derivative(self, cell) -> np.ndarray:
        """Quadratic form of ``Lambda'(gamma0) chi_B``."""
        tris = getattr(cell, "triangles", cell)
        w = self._factors[np.asarray(tris, dtype=np.int64)].reshape(-1, self.basis.p)
        return -(w.T @ w)

    def test_matrix(self, beta: float, cell, data: np.ndarray) -> np.ndarray:
        """``int (gamma0 - beta chi_B) grad u_l . grad u_m - <Lambda(gamma) f_l, f_m>``."""
        return self.lambda0 + beta * self.derivative(cell) - data


def cm_linearized_test_matrix(mesh: Mesh, gamma0, beta: float, cell, data: np.ndarray,
                              basis: CmCurrentBasis | None = None) -> np.ndarray:
    basis = basis or CmCurrentBasis(data.shape[0])
    return CmTestModel(mesh, gamma0, basis).test_matrix(beta, cell, data)


# ---------------------------------------------------------------- projections


class BoundaryGrid:
    def __init__(self, n: int = DEFAULT_GRID):
        self.n = n
        self.dtheta = TWO_PI / n
        self.theta = (np.arange(n) + 0.5) * self.dtheta

    def inner(self, f: np.ndarray, g: np.ndarray) -> np.ndarray:
        return f.T @ g * self.dtheta

    def norm(self, f: np.ndarray) -> float:
        return float(np.sqrt(np.sum(f * f) * self.dtheta))

    def mean(self, f: np.ndarray) -> np.ndarray:
        return f.mean(axis=0)


class ProjectionOperators:
    """``Q``, ``Q*``, ``L``, ``P`` and ``Z`` on a boundary grid.

    ``electrode_lengths`` defaults to the arc widths of the electrodes; pass
    the polygonal lengths used by the forward solver to keep ``Z`` consistent
    with it.
    """

    def __init__(self, layout: ElectrodeLayout, extended: ExtendedElectrodeLayout, z,
                 grid: BoundaryGrid | None = None, electrode_lengths=None):
        if extended.k != layout.k:
            raise ValueError("extended layout and electrode layout disagree on k")
        self.grid = grid or BoundaryGrid()
        self.k = layout.k
        th = self.grid.theta
        self.ext_chi = np.column_stack([(th >= a) & (th < b) for a, b in extended.extended]).astype(float)
        self.el_chi = np.column_stack([(th >= a) & (th < b) for a, b in layout.arcs]).astype(float)
        self.ext_lengths = self.ext_chi.sum(axis=0) * self.grid.dtheta
        lengths = layout.widths if electrode_lengths is None else np.asarray(electrode_lengths, dtype=float)
        z = np.broadcast_to(np.asarray(z, dtype=float), (self.k,))
        self.Z = np.diag(z / lengths)

    def Q(self, w: np.ndarray) -> np.ndarray:
        return self.ext_chi @ w

    def Qstar(self, f: np.ndarray) -> np.ndarray:
        return self.ext_chi.T @ f * self.grid.dtheta

    def L(self, f: np.ndarray) -> np.ndarray:
        return f - self.grid.mean(f)

    def P(self, f: np.ndarray) -> np.ndarray:
        return (self.el_chi.T @ f) / self.el_chi.sum(axis=0).reshape((-1,) + (1,) * (f.ndim - 1))

    def f_of(self, currents: np.ndarray) -> np.ndarray:
        """Density ``sum_j chi_j^+ I_j / |E_j^+|`` whose ``Q*`` image is ``currents``."""
        return self.ext_chi @ (np.asarray(currents).T / self.ext_lengths).T


def full_matrix(mm) -> np.ndarray:
    """k x k matrix on R^k of a frame-form matrix, zero on constants."""
    if isinstance(mm, MeasurementMatrix):
        u = mm.basis.frame
        return u @ mm.entries @ u.T
    raise TypeError("expected a MeasurementMatrix")


class CemToCmOperator:
    """``L Q (R - Z) Q*`` acting on grid densities."""

    def __init__(self, r_full: np.ndarray, ops: ProjectionOperators):
        if r_full.shape != (ops.k, ops.k):
            raise ValueError(f"measurement map is {r_full.shape}, layout has k={ops.k}")
        self.ops = ops
        self.a = r_full - ops.Z

    def __call__(self, f: np.ndarray) -> np.ndarray:
        mean = self.ops.grid.mean(f)
        if np.max(np.abs(mean)) > 1e-10 * max(1.0, np.abs(f).max()):
            raise ValueError("density is not mean-free")
        return self.ops.L(self.ops.Q(self.a @ self.ops.Qstar(f)))

    def gram(self, densities: np.ndarray) -> np.ndarray:
        """``<L Q (R - Z) Q* f_l, f_m>`` for grid densities (n_grid, p)."""
        q = self.ops.Qstar(densities)
        g = q.T @ self.a @ q
        return 0.5 * (g + g.T)


def cem_to_cm_approximation(r_matrix: MeasurementMatrix, layout: ElectrodeLayout,
                            extended: ExtendedElectrodeLayout, z, grid: BoundaryGrid | None = None,
                            electrode_lengths=None) -> CemToCmOperator:
    ops = ProjectionOperators(layout, extended, z, grid, electrode_lengths)
    if r_matrix.basis.k != layout.k:
        raise ValueError("measurement matrix and layout disagree on k")
    return CemToCmOperator(full_matrix(r_matrix), ops)


def semidefiniteness_transfer_check(a: np.ndarray, ops: ProjectionOperators, frame: np.ndarray,
                                    n_random: int = 20, seed: int = 0, tol: float = 1e-10):
    """Verdicts ``(A >= 0, L Q A Q* >= 0 on sampled densities)``.

    ``a`` is given in the orthonormal frame ``frame`` (k x (k-1)). Samples are
    the densities built from each eigenvector of ``a`` plus random mean-free
    densities; the continuum form is evaluated through the grid operators.
    """
    a = np.asarray(a, dtype=float)
    w, vecs = np.linalg.eigh(a)
    scale = max(np.max(np.abs(w)), 1e-300)
    discrete_ok = bool(w[0] >= -tol * scale)

    a_full = frame @ a @ frame.T
    currents = frame @ vecs
    rng = np.random.default_rng(seed)
    rand = rng.standard_normal((ops.grid.n, n_random))
    samples = np.hstack([ops.f_of(currents), rand - rand.mean(axis=0)])
    image = ops.L(ops.Q(a_full @ ops.Qstar(samples)))
    forms = np.sum(image * samples, axis=0) * ops.grid.dtheta
    norms = np.sum(samples * samples, axis=0) * ops.grid.dtheta
    continuum_ok = bool(np.min(forms / norms) >= -tol * scale * np.max(ops.ext_lengths))
    return discrete_ok, continuum_ok


def poincare_defect(ops: ProjectionOperators, f: np.ndarray) -> float:
    """``||(Id - Q P) f||`` on the grid."""
    return ops.grid.norm(f - ops.Q(ops.P(f)))


# ---------------------------------------------------------------- convergence


@dataclass(frozen=True)
class ConvergenceRow:
    k: int
    h_extended: float
    norm_estimate: float
    ratio_vs_prev: float | None


def operator_distance(mesh: Mesh, gamma, k: int, z, coverage: float = 0.5,
                      grid: BoundaryGrid | None = None, n_modes: int | None = None) -> float:
    """Largest singular value of ``Lambda - L Q (R - Z) Q*`` on the first ``2k`` trig densities."""
    from .fem import assemble_cem_system, measurement_matrix
    from .mesh import build_electrode_layout, build_extended_electrodes
    from .synthdata import current_basis

    grid = grid or BoundaryGrid()
    layout = build_electrode_layout(mesh, k, coverage)
    extended = build_extended_electrodes(layout)
    system = assemble_cem_system(mesh, layout, gamma, z)
    rm = measurement_matrix(system, current_basis("gram_schmidt", k))
    op = cem_to_cm_approximation(rm, layout, extended, z, grid, system.electrode_lengths)
    basis = CmCurrentBasis(n_modes or 2 * k)
    lam = cm_forward_nd(mesh, gamma, basis)
    approx = op.gram(basis(grid.theta))
    return spectral_norm(lam - approx)


def convergence_study(mesh_for_k, gamma_for_mesh, ks, z, coverage: float = 0.5) -> list[ConvergenceRow]:
    """Operator-distance sweep over increasing electrode counts.

    ``mesh_for_k(k)`` returns the mesh used at ``k`` and
    ``gamma_for_mesh(mesh)`` the conductivity on it.
    """
    ks = list(ks)
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ValueError("electrode counts must be strictly increasing")
    rows: list[ConvergenceRow] = []
    for k in ks:
        mesh = mesh_for_k(k)
        d = operator_distance(mesh, gamma_for_mesh(mesh), k, z, coverage)
        prev = rows[-1].norm_estimate if rows else None
        rows.append(ConvergenceRow(k, 2.0 * math.sin(math.pi / k), d, None if prev is None else d / prev))
    return rows


def write_convergence_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "h_extended", "norm_estimate", "ratio_vs_prev"])
        for r in rows:
            w.writerow([r.k, f"{r.h_extended:.17g}", f"{r.norm_estimate:.17g}",
                        "" if r.ratio_vs_prev is None else f"{r.ratio_vs_prev:.17g}"])
