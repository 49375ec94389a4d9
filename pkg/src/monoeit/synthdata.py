"""Phantoms, current bases and the multiplicative noise model."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import Conductivity, CurrentBasis
from .mesh import Mesh
from .spectral import spectral_norm, symmetrize_data

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Inclusion:
    shape: str
    contrast: float
    sign: str = "conductive"
    center: tuple = (0.0, 0.0)
    radius: float = 0.0
    vertices: tuple = ()

    def __post_init__(self):
        if self.shape not in ("disk", "polygon"):
            raise ValueError(f"unknown inclusion shape {self.shape!r}")
        if self.sign not in ("conductive", "resistive"):
            raise ValueError(f"unknown inclusion sign {self.sign!r}")
        if self.contrast <= 0:
            raise ValueError("contrast must be positive; use sign='resistive' for decreases")
        if self.shape == "disk":
            if self.radius <= 0 or math.hypot(*self.center) + self.radius >= 1.0:
                raise ValueError("disk inclusion must lie strictly inside the unit disk")
        else:
            v = np.asarray(self.vertices, dtype=float)
            if v.ndim != 2 or len(v) < 3 or np.max(np.linalg.norm(v, axis=1)) >= 1.0:
                raise ValueError("polygon inclusion must lie strictly inside the unit disk")

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.shape == "disk":
            return np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1]) < self.radius
        return _in_polygon(pts, np.asarray(self.vertices, dtype=float))

    def distance(self, pts: np.ndarray) -> np.ndarray:
        """Euclidean distance to the inclusion (zero inside)."""
        pts = np.atleast_2d(pts)
        if self.shape == "disk":
            d = np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1]) - self.radius
            return np.maximum(d, 0.0)
        v = np.asarray(self.vertices, dtype=float)
        a, b = v, np.roll(v, -1, axis=0)
        ab = b - a
        t = np.clip(np.einsum("pk,ek->pe", pts, ab) - np.sum(a * ab, axis=1), 0, None) / np.sum(ab * ab, axis=1)
        t = np.minimum(t, 1.0)
        proj = a[None] + t[..., None] * ab[None]
        d = np.linalg.norm(pts[:, None, :] - proj, axis=2).min(axis=1)
        return np.where(self.contains(pts), 0.0, d)

    @property
    def area(self) -> float:
        if self.shape == "disk":
            return math.pi * self.radius ** 2
        x, y = np.asarray(self.vertices, dtype=float).T
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _in_polygon(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    x, y = pts[:, 0][:, None], pts[:, 1][:, None]
    x0, y0 = poly[:, 0][None], poly[:, 1][None]
    x1, y1 = np.roll(poly[:, 0], -1)[None], np.roll(poly[:, 1], -1)[None]
    crosses = (y0 > y) != (y1 > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = x0 + (y - y0) * (x1 - x0) / (y1 - y0)
    return np.sum(crosses & (x < xi), axis=1) % 2 == 1


@dataclass(frozen=True)
class Phantom:
    gamma0: float
    inclusions: tuple = ()

    def __post_init__(self):
        if self.gamma0 <= 0:
            raise ValueError("background conductivity must be positive")

    @property
    def sign(self) -> str:
        signs = {inc.sign for inc in self.inclusions}
        if len(signs) > 1:
            raise ValueError("indefinite phantoms are not supported")
        return signs.pop() if signs else "conductive"

    def beta_bound(self) -> float:
        """Largest admissible probe magnitude for the linearized test."""
        if self.sign == "conductive":
            return min(self.gamma0 * i.contrast / (self.gamma0 + i.contrast) for i in self.inclusions)
        return min(i.contrast for i in self.inclusions)

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return np.min([inc.distance(pts) for inc in self.inclusions], axis=0)

    def to_dict(self) -> dict:
        incs = []
        for inc in self.inclusions:
            d = {"shape": inc.shape, "contrast": inc.contrast, "sign": inc.sign}
            if inc.shape == "disk":
                d.update(center=list(inc.center), radius=inc.radius)
            else:
                d["vertices"] = [list(v) for v in inc.vertices]
            incs.append(d)
        return {"gamma0": self.gamma0, "inclusions": incs}

    @classmethod
    def from_dict(cls, d: dict) -> "Phantom":
        incs = []
        for item in d.get("inclusions", []):
            incs.append(Inclusion(
                shape=item["shape"],
                contrast=float(item["contrast"]),
                sign=item.get("sign", "conductive"),
                center=tuple(item.get("center", (0.0, 0.0))),
                radius=float(item.get("radius", 0.0)),
                vertices=tuple(tuple(v) for v in item.get("vertices", ())),
            ))
        return cls(float(d["gamma0"]), tuple(incs))


def read_phantom(path) -> Phantom:
    return Phantom.from_dict(json.loads(Path(path).read_text()))


def write_phantom(phantom: Phantom, path) -> None:
    Path(path).write_text(json.dumps(phantom.to_dict(), indent=2) + "\n")


def rasterize_phantom(phantom: Phantom, mesh: Mesh) -> Conductivity:
    """P0 conductivity: triangles whose centroid lies in an inclusion get its contrast."""
    c = mesh.centroids
    values = np.full(mesh.n_triangles, phantom.gamma0)
    for inc in phantom.inclusions:
        delta = inc.contrast if inc.sign == "conductive" else -inc.contrast
        values[inc.contains(c)] = phantom.gamma0 + delta
    if values.min() <= 0:
        raise ValueError("phantom yields a nonpositive conductivity")
    return Conductivity(values, float(values.min()))


# Presets. Coordinates are this package's choice; the contrasts match the
# admissible probe values (beta = 0.8 for contrast 4, beta = 0.66 for contrast 2).
def two_disk_phantom(gamma0: float = 1.0, contrast: float = 4.0) -> Phantom:
    return Phantom(gamma0, (
        Inclusion("disk", contrast, center=(-0.35, 0.3), radius=0.2),
        Inclusion("disk", contrast, center=(0.35, -0.3), radius=0.2),
    ))


def three_disk_phantom(gamma0: float = 1.0, contrast: float = 2.0) -> Phantom:
    return Phantom(gamma0, (
        Inclusion("disk", contrast, center=(0.0, 0.45), radius=0.2),
        Inclusion("disk", contrast, center=(-0.4, -0.3), radius=0.15),
        Inclusion("disk", contrast, center=(0.4, -0.3), radius=0.15),
    ))


def resistive_phantom(gamma0: float = 1.0, contrast: float = 0.5) -> Phantom:
    return Phantom(gamma0, (
        Inclusion("disk", contrast, sign="resistive", center=(-0.35, 0.3), radius=0.2),
        Inclusion("disk", contrast, sign="resistive", center=(0.35, -0.3), radius=0.2),
    ))


L_SHAPE = ((-0.45, -0.45), (0.45, -0.45), (0.45, 0.0), (0.0, 0.0), (0.0, 0.45), (-0.45, 0.45))


def l_shape_phantom(gamma0: float = 1.0, contrast: float = 4.0) -> Phantom:
    """Axis-aligned L in the box [-0.45, 0.45]^2 with the upper-right quadrant removed."""
    return Phantom(gamma0, (Inclusion("polygon", contrast, vertices=L_SHAPE),))


def water_tank_phantom(gamma0: float = 0.0243, contrast: float = 0.2187) -> Phantom:
    """Tap-water background with two metal-like conductive disks (unit-disk scaling)."""
    return Phantom(gamma0, (
        Inclusion("disk", contrast, center=(-0.4, 0.2), radius=0.18),
        Inclusion("disk", contrast, center=(0.35, -0.35), radius=0.18),
    ))


PHANTOMS = {
    "two_disk": two_disk_phantom,
    "three_disk": three_disk_phantom,
    "resistive": resistive_phantom,
    "l_shape": l_shape_phantom,
    "water_tank": water_tank_phantom,
    "homogeneous": lambda gamma0=1.0: Phantom(gamma0),
}


def current_basis(kind: str, k: int, amplitude: float = 1.0) -> CurrentBasis:
    """Current patterns as columns of a k x (k-1) matrix."""
    if k < 2:
        raise ValueError("need at least two electrodes")
    j = np.arange(1, k + 1)
    if kind == "trig":
        if k % 2:
            raise ValueError("trigonometric basis needs an even electrode count")
        cols = [np.cos(m * 2 * np.pi * j / k) for m in range(1, k // 2 + 1)]
        cols += [np.sin(m * 2 * np.pi * j / k) for m in range(1, k // 2)]
        mat = np.column_stack(cols)
    elif kind == "dipole":
        mat = np.zeros((k, k - 1))
        mat[0] = 1.0
        mat[np.arange(1, k), np.arange(k - 1)] = -1.0
    elif kind == "gram_schmidt":
        mat = np.zeros((k, k - 1))
        for m in range(1, k):
            mat[:m, m - 1] = math.sqrt(1.0 / (m * (m + 1)))
            mat[m, m - 1] = -math.sqrt(m / (m + 1))
    else:
        raise ValueError(f"unknown basis kind {kind!r}")
    return CurrentBasis(amplitude * mat, kind)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


def gaussian(shape, seed: int) -> np.ndarray:
    """Standard normal draws: Box-Muller on a Philox counter stream."""
    n = int(np.prod(shape))
    u = np.random.Generator(np.random.Philox(seed)).random((2, n))
    r = np.sqrt(-2.0 * np.log1p(-u[0]))
    return (r * np.cos(2.0 * np.pi * u[1])).reshape(shape)


@dataclass(frozen=True)
class NoisyData:
    v_tilde: np.ndarray
    v_delta: np.ndarray
    delta: float
    relative_error: float

    def __iter__(self):
        return iter((self.v_tilde, self.delta))


def apply_noise(voltages: np.ndarray, spec: NoiseSpec, basis: CurrentBasis) -> NoisyData:
    """Entrywise relative Gaussian noise ``V_ij (1 + Y_ij)``.

    ``delta`` is the exact spectral norm of the symmetrized perturbation in
    the orthonormal frame of ``basis``; unpacking the result yields
    ``(v_tilde, delta)``.
    """
    v = np.asarray(voltages, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("voltages have non-finite entries")
    if spec.sigma == 0:
        v_tilde = v.copy()
    else:
        v_tilde = v * (1.0 + spec.sigma * gaussian(v.shape, spec.seed))
    v_delta = symmetrize_data(v_tilde, basis.matrix)
    v_clean = symmetrize_data(v, basis.matrix)
    noise = basis.to_frame(v_delta) - basis.to_frame(v_clean)
    delta = spectral_norm(0.5 * (noise + noise.T))
    rel = float(np.linalg.norm(v - v_delta) / np.linalg.norm(v))
    if spec.sigma:
        log.info("noise sigma=%g seed=%d: relative error %.3e, delta %.3e", spec.sigma, spec.seed, rel, delta)
    return NoisyData(v_tilde, v_delta, delta, rel)


# ---------------------------------------------------------------- file format


def write_voltages(path, v: np.ndarray, basis_kind: str, sigma: float, seed: int) -> None:
    k = v.shape[0]
    with open(path, "w", newline="") as fh:
        fh.write(f"# {k} {basis_kind} {sigma!r} {seed}\n")
        w = csv.writer(fh)
        for row in v:
            w.writerow([f"{x:.17g}" for x in row])


def read_voltages(path) -> tuple[np.ndarray, dict]:
    with open(path, newline="") as fh:
        head = fh.readline()
        if not head.startswith("#"):
            raise ValueError(f"{path}: missing metadata line")
        k, kind, sigma, seed = head[1:].split()
        rows = [[float(x) for x in r] for r in csv.reader(fh) if r]
    v = np.array(rows)
    meta = {"k": int(k), "basis": kind, "sigma": float(sigma), "seed": int(seed)}
    if v.shape != (meta["k"], meta["k"] - 1):
        raise ValueError(f"{path}: expected {meta['k']}x{meta['k'] - 1} voltages, got {v.shape}")
    return v, meta


def simulate_voltages(phantom: Phantom, mesh: Mesh, k: int, z, basis: CurrentBasis,
                      coverage: float = 0.5) -> np.ndarray:
    """Noiseless electrode voltages (k, k-1) for every column of ``basis``."""
    from .fem import assemble_cem_system
    from .mesh import build_electrode_layout

    layout = build_electrode_layout(mesh, k, coverage)
    system = assemble_cem_system(mesh, layout, rasterize_phantom(phantom, mesh), z)
    _, v = system.solve_many(basis.matrix)
    return v
