"""P1 finite elements for the complete electrode model.

Unknowns are ordered as (nodal potentials, electrode voltages, multiplier);
the multiplier enforces ``sum(V) = 0``. The system is factorized once per
conductivity and reused for every current pattern.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import ElectrodeLayout, Mesh

RESIDUAL_TOL = 1e-10


class SingularSystemError(RuntimeError):
    """The assembled system could not be factorized."""


@dataclass(frozen=True, eq=False)
class Conductivity:
    values: np.ndarray
    lower_bound: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("conductivity has non-finite entries")
        if self.lower_bound <= 0 or np.min(self.values) < self.lower_bound:
            raise ValueError("conductivity violates its positive lower bound")

    @classmethod
    def of(cls, values) -> "Conductivity":
        if isinstance(values, cls):
            return values
        v = np.asarray(values, dtype=float)
        return cls(v, float(np.min(v)))

    def __mul__(self, c: float) -> "Conductivity":
        return Conductivity(self.values * c, self.lower_bound * c)

    __rmul__ = __mul__


def contact_impedance(z, k: int) -> np.ndarray:
    """Broadcast ``z`` to one positive value per electrode."""
    z = np.broadcast_to(np.asarray(z, dtype=float), (k,)).copy()
    if np.any(~(z > 0)):
        raise ValueError("contact impedances must be positive")
    return z


@dataclass(frozen=True, eq=False)
class CurrentBasis:
    """Columns of ``matrix`` (k x (k-1)) span the mean-free currents."""

    matrix: np.ndarray
    kind: str

    def __post_init__(self):
        m = self.matrix
        k = m.shape[0]
        if m.shape != (k, k - 1):
            raise ValueError(f"basis must be k x (k-1), got {m.shape}")
        if np.max(np.abs(m.sum(axis=0))) > 1e-12 * max(1.0, np.abs(m).max()):
            raise ValueError("basis vectors must sum to zero")
        if np.linalg.matrix_rank(m) != k - 1:
            raise ValueError("basis vectors are linearly dependent")

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @functools.cached_property
    def gram(self) -> np.ndarray:
        return self.matrix.T @ self.matrix

    @functools.cached_property
    def gram_inv_sqrt(self) -> np.ndarray:
        w, q = np.linalg.eigh(self.gram)
        return (q / np.sqrt(w)) @ q.T

    @functools.cached_property
    def frame(self) -> np.ndarray:
        """Orthonormal basis ``I (I^T I)^{-1/2}`` of the same space."""
        return self.matrix @ self.gram_inv_sqrt

    def to_frame(self, voltages: np.ndarray) -> np.ndarray:
        """Symmetric matrix of the map with ``R I = voltages`` in the orthonormal frame."""
        c = self.gram_inv_sqrt
        return c @ (self.matrix.T @ voltages) @ c


@dataclass(frozen=True)
class CemSolution:
    v: np.ndarray
    V: np.ndarray


@functools.lru_cache(maxsize=8)
def p1_geometry(mesh: Mesh):
    """Per-triangle areas, basis gradients (M, 3, 2) and COO index pattern."""
    p = mesh.nodes[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    inv = np.empty((len(p), 2, 2))
    inv[:, 0, 0] = d2[:, 1] / det
    inv[:, 0, 1] = -d2[:, 0] / det
    inv[:, 1, 0] = -d1[:, 1] / det
    inv[:, 1, 1] = d1[:, 0] / det
    ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    # grad phi_i = J^{-T} grad_ref phi_i
    grads = np.einsum("ij,mjk->mik", ref, inv)
    areas = 0.5 * det
    kloc = areas[:, None, None] * np.einsum("mik,mjk->mij", grads, grads)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    return areas, grads, kloc, rows, cols


def stiffness_matrix(mesh: Mesh, gamma: np.ndarray) -> sp.csr_matrix:
    _, _, kloc, rows, cols = p1_geometry(mesh)
    data = (np.asarray(gamma)[:, None, None] * kloc).ravel()
    n = mesh.n_nodes
    return sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


def triangle_gradients(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """Constant gradients of P1 fields ``u`` (N,) or (N, c) -> (M, 2) or (M, c, 2)."""
    _, grads, _, _, _ = p1_geometry(mesh)
    uloc = u[mesh.triangles]
    if u.ndim == 1:
        return np.einsum("mi,mik->mk", uloc, grads)
    return np.einsum("mic,mik->mck", uloc, grads)


def electrode_boundary_terms(mesh: Mesh, layout: ElectrodeLayout):
    """Boundary mass matrices, node integrals and lengths of every electrode."""
    n = mesh.n_nodes
    lengths = mesh.boundary_lengths
    masses, loads, sizes = [], [], []
    for idx in layout.edges:
        e = mesh.boundary_edges[idx]
        ell = lengths[idx]
        rows = np.concatenate([e[:, 0], e[:, 1], e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 0], e[:, 1], e[:, 1], e[:, 0]])
        data = np.concatenate([ell / 3, ell / 3, ell / 6, ell / 6])
        masses.append(sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr())
        loads.append(np.bincount(e.ravel(), weights=np.repeat(ell / 2, 2), minlength=n))
        sizes.append(ell.sum())
    return masses, np.array(loads).T, np.array(sizes)


class CemSystem:
    """Factorized CEM system for one conductivity and contact impedance."""

    def __init__(self, mesh: Mesh, layout: ElectrodeLayout, gamma, z):
        self.mesh = mesh
        self.layout = layout
        self.gamma = Conductivity.of(gamma)
        if len(self.gamma.values) != mesh.n_triangles:
            raise ValueError("conductivity must have one value per triangle")
        k = layout.k
        self.z = contact_impedance(z, k)
        masses, loads, sizes = electrode_boundary_terms(mesh, layout)
        self.electrode_lengths = sizes

        a_vv = stiffness_matrix(mesh, self.gamma.values)
        for j in range(k):
            a_vv = a_vv + masses[j] / self.z[j]
        a_vV = sp.csr_matrix(-loads / self.z)
        a_VV = sp.diags(sizes / self.z)
        ones = sp.csr_matrix(np.ones((k, 1)))
        self.matrix = sp.bmat(
            [[a_vv, a_vV, None], [a_vV.T, a_VV, ones], [None, ones.T, None]], format="csc"
        )
        self.n_nodes = mesh.n_nodes
        self.k = k
        try:
            self._lu = spla.splu(self.matrix)
        except RuntimeError as exc:
            raise SingularSystemError(str(exc)) from exc

    def _rhs(self, currents: np.ndarray) -> np.ndarray:
        c = currents.reshape(self.k, -1)
        rhs = np.zeros((self.matrix.shape[0], c.shape[1]))
        rhs[self.n_nodes:self.n_nodes + self.k] = c
        return rhs

    def _solve_rhs(self, rhs: np.ndarray) -> np.ndarray:
        x = self._lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SingularSystemError("non-finite solution; check mesh and layout")
        scale = np.linalg.norm(rhs) or 1.0
        res = rhs - self.matrix @ x
        if np.linalg.norm(res) > 1e-13 * scale:
            x = x + self._lu.solve(res)
            res = rhs - self.matrix @ x
        if np.linalg.norm(res) > RESIDUAL_TOL * scale:
            raise SingularSystemError(f"relative residual {np.linalg.norm(res) / scale:.2e}")
        return x

    def solve_many(self, currents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nodal potentials (N, c) and electrode voltages (k, c) for columns of ``currents``."""
        currents = np.asarray(currents, dtype=float).reshape(self.k, -1)
        sums = np.abs(currents.sum(axis=0))
        if np.any(sums > 1e-10 * max(1.0, np.abs(currents).max())):
            raise ValueError("input currents must sum to zero")
        x = self._solve_rhs(self._rhs(currents))
        return x[:self.n_nodes], x[self.n_nodes:self.n_nodes + self.k]

    def gradients(self, v: np.ndarray) -> np.ndarray:
        return triangle_gradients(self.mesh, v)


def assemble_cem_system(mesh: Mesh, layout: ElectrodeLayout, gamma, z) -> CemSystem:
    return CemSystem(mesh, layout, gamma, z)


def solve_cem(system: CemSystem, current) -> CemSolution:
    v, V = system.solve_many(np.asarray(current, dtype=float))
    return CemSolution(v[:, 0], V[:, 0])


@dataclass(frozen=True, eq=False)
class MeasurementMatrix:
    """Measurement map in the orthonormal frame of ``basis``.

    ``voltages`` keeps the raw electrode voltages ``R I^(m)`` column by
    column; ``asymmetry`` is the relative self-adjointness defect before
    symmetrization.
    """

    entries: np.ndarray
    basis: CurrentBasis
    voltages: np.ndarray
    asymmetry: float = 0.0

    @property
    def pinv_form(self) -> np.ndarray:
        """Coordinates ``I^+ V`` of ``R I^(m)`` in the basis itself."""
        return np.linalg.solve(self.basis.gram, self.basis.matrix.T @ self.voltages)

    def __sub__(self, other: "MeasurementMatrix") -> np.ndarray:
        return self.entries - other.entries


def frame_matrix(basis: CurrentBasis, voltages: np.ndarray) -> tuple[np.ndarray, float]:
    raw = basis.to_frame(voltages)
    asym = float(np.linalg.norm(raw - raw.T) / max(np.linalg.norm(raw), 1e-300))
    return 0.5 * (raw + raw.T), asym


def measurement_matrix(system: CemSystem, basis: CurrentBasis) -> MeasurementMatrix:
    if basis.k != system.k:
        raise ValueError(f"basis has k={basis.k}, system has k={system.k}")
    _, V = system.solve_many(basis.matrix)
    entries, asym = frame_matrix(basis, V)
    return MeasurementMatrix(entries, basis, V, asym)


@dataclass(frozen=True, eq=False)
class SensitivityTensor:
    """Per-triangle derivative blocks in the orthonormal frame of ``basis``.

    Stored in factored form: the block of triangle ``K`` is
    ``-W[K].T @ W[K]`` with ``W[K] = sqrt(area_K) * grad(v_frame)`` of shape
    (2, k-1). ``triangles`` lists the covered triangle indices.
    """

    factors: np.ndarray
    triangles: np.ndarray
    basis: CurrentBasis
    n_triangles: int

    @functools.cached_property
    def _position(self) -> np.ndarray:
        pos = np.full(self.n_triangles, -1, dtype=np.int64)
        pos[self.triangles] = np.arange(len(self.triangles))
        return pos

    def block(self, triangle: int) -> np.ndarray:
        w = self.factors[self._locate(np.array([triangle]))[0]]
        return -w.T @ w

    @property
    def blocks(self) -> np.ndarray:
        return -np.einsum("tim,tin->tmn", self.factors, self.factors)

    def _locate(self, tris) -> np.ndarray:
        tris = np.asarray(tris, dtype=np.int64)
        if tris.size and (tris.min() < 0 or tris.max() >= self.n_triangles):
            raise KeyError("triangle index out of range")
        pos = self._position[tris]
        if np.any(pos < 0):
            raise KeyError(f"triangles {tris[pos < 0][:5].tolist()} not covered by tensor")
        return pos


def sensitivity_tensor(system: CemSystem, basis: CurrentBasis, subset=None) -> SensitivityTensor:
    """Derivative of the measurement map with respect to each triangle's conductivity.

    Testing the linearized problem with the forward solution of another
    current gives ``I_l . (R'(g) chi_K) I_m = -int_K grad v_m . grad v_l``.
    """
    v, _ = system.solve_many(basis.matrix)
    v = v @ basis.gram_inv_sqrt
    mesh = system.mesh
    tris = np.arange(mesh.n_triangles) if subset is None else np.unique(np.asarray(subset, dtype=np.int64))
    areas, grads, _, _, _ = p1_geometry(mesh)
    uloc = v[mesh.triangles[tris]]
    g = np.einsum("tic,tik->tkc", uloc, grads[tris])
    factors = np.sqrt(areas[tris])[:, None, None] * g
    return SensitivityTensor(factors, tris, basis, mesh.n_triangles)


def apply_sensitivity(tensor: SensitivityTensor, cell) -> np.ndarray:
    """Sum of the derivative blocks over the triangles of ``cell``."""
    tris = getattr(cell, "triangles", cell)
    pos = tensor._locate(tris)
    m = tensor.factors.shape[2]
    w = tensor.factors[pos].reshape(-1, m)
    return -(w.T @ w)


def cell_sensitivities(tensor: SensitivityTensor, cells) -> np.ndarray:
    """Stacked cell sums, shape (n_cells, k-1, k-1)."""
    m = tensor.factors.shape[2]
    out = np.empty((len(cells), m, m))
    for i, cell in enumerate(cells):
        out[i] = apply_sensitivity(tensor, cell)
    return out


# ---------------------------------------------------------------- file format


def write_measurement_matrix(mm: MeasurementMatrix, path) -> None:
    k = mm.basis.k
    lines = [f"{k} {mm.basis.kind}"]
    lines += [" ".join(f"{x:.17g}" for x in row) for row in mm.entries]
    Path(path).write_text("\n".join(lines) + "\n")


def read_measurement_matrix(path) -> tuple[int, str, np.ndarray]:
    rows = Path(path).read_text().split("\n")
    k, kind = rows[0].split()
    k = int(k)
    entries = np.array([r.split() for r in rows[1:k]], dtype=float)
    if entries.shape != (k - 1, k - 1):
        raise ValueError(f"expected {k - 1}x{k - 1} entries, got {entries.shape}")
    return k, kind, entries
