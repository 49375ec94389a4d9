"""Unit-disk triangulations, electrode layouts and hexagonal test sets.

The disk mesh is a structured polar-ring triangulation: ring ``i`` of ``n``
carries ``6 i`` nodes, neighbouring rings are stitched by a shortest-diagonal
merge. Boundary nodes may be snapped onto prescribed angles so
that electrode endpoints coincide with mesh nodes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

DEFAULT_MAX_NODES = 3_000_000


@dataclass(frozen=True, eq=False)
class Mesh:
    """P1 triangulation of a polygonal unit disk.

    ``boundary_theta[e]`` holds the unwrapped angles of both endpoints of
    boundary edge ``e``; edges run counterclockwise, so the last edge ends
    at an angle close to ``2 pi``.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_theta: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.nodes, self.triangles)

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    @property
    def boundary_nodes(self) -> np.ndarray:
        return self.boundary_edges[:, 0]

    @property
    def boundary_lengths(self) -> np.ndarray:
        p = self.nodes[self.boundary_edges]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    def edge_lengths(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        return np.linalg.norm(p - np.roll(p, -1, axis=1), axis=2)

    @property
    def max_edge(self) -> float:
        return float(self.edge_lengths().max())

    def validate(self, tol: float = 1e-9) -> None:
        """Raise ``ValueError`` if any structural invariant is broken."""
        if self.triangles.min() < 0 or self.triangles.max() >= self.n_nodes:
            raise ValueError("triangle references a missing node")
        if np.any(self.areas <= 0):
            raise ValueError("triangle with nonpositive signed area")
        e = self.boundary_edges
        if not np.array_equal(e[:, 1], np.roll(e[:, 0], -1)):
            raise ValueError("boundary edges do not form a closed loop")
        if len(np.unique(e[:, 0])) != len(e):
            raise ValueError("boundary loop visits a node twice")
        radii = np.linalg.norm(self.nodes[e[:, 0]], axis=1)
        if np.max(np.abs(radii - 1.0)) > tol:
            raise ValueError("boundary node off the unit circle")


def _signed_areas(nodes: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p = nodes[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def _stitch_rings(nodes, inner_ids, inner_ang, outer_ids, outer_ang) -> list[tuple[int, int, int]]:
    """Triangulate the annulus between two closed rings of nodes.

    Angles are unwrapped and increasing, starting near zero. Each step adds
    the shorter of the two candidate diagonals.
    """
    na, nb = len(inner_ids), len(outer_ids)
    a = np.append(inner_ang, inner_ang[0] + TWO_PI)
    b = np.append(outer_ang, outer_ang[0] + TWO_PI)
    pin = nodes[inner_ids].tolist()
    pout = nodes[outer_ids].tolist()
    tris = []
    p = q = 0
    while p < na or q < nb:
        if p == na:
            advance_outer = True
        elif q == nb:
            advance_outer = False
        else:
            d_out = math.dist(pin[p], pout[(q + 1) % nb])
            d_in = math.dist(pin[(p + 1) % na], pout[q])
            if abs(d_out - d_in) > 1e-12 * (d_out + d_in):
                advance_outer = d_out < d_in
            else:
                advance_outer = b[q + 1] <= a[p + 1]
        if advance_outer:
            tris.append((inner_ids[p % na], outer_ids[q], outer_ids[(q + 1) % nb]))
            q += 1
        else:
            tris.append((inner_ids[p], outer_ids[q % nb], inner_ids[(p + 1) % na]))
            p += 1
    return tris


def generate_disk_mesh(
    target_h: float,
    snap_angles: Sequence[float] = (),
    max_nodes: int = DEFAULT_MAX_NODES,
) -> Mesh:
    """Structured triangulation of the unit disk with edges of about ``target_h``.

    Every angle in ``snap_angles`` becomes the exact angle of the nearest
    boundary node; the other boundary nodes are respaced evenly between them.
    """
    if not 0.0 < target_h < 1.0:
        raise ValueError(f"target_h must lie in (0, 1), got {target_h}")
    n_rings = math.ceil(1.0 / target_h)
    n_nodes = 1 + 3 * n_rings * (n_rings + 1)
    if n_nodes > max_nodes:
        raise ValueError(f"target_h={target_h} needs {n_nodes} nodes (budget {max_nodes})")

    coords = [np.zeros((1, 2))]
    ring_ids: list[np.ndarray] = [np.array([0])]
    ring_ang: list[np.ndarray] = [np.array([0.0])]
    offset = 1
    for i in range(1, n_rings + 1):
        n = 6 * i
        ang = TWO_PI * np.arange(n) / n
        if i == n_rings and len(snap_angles):
            ang = _snap(ang, snap_angles)
        r = i / n_rings
        coords.append(r * np.column_stack([np.cos(ang), np.sin(ang)]))
        ring_ids.append(np.arange(offset, offset + n))
        ring_ang.append(ang)
        offset += n
    nodes = np.vstack(coords)

    tris = [(0, int(ring_ids[1][q]), int(ring_ids[1][(q + 1) % 6])) for q in range(6)]
    for i in range(2, n_rings + 1):
        tris += _stitch_rings(nodes, ring_ids[i - 1], ring_ang[i - 1], ring_ids[i], ring_ang[i])
    triangles = np.array(tris, dtype=np.int64)
    neg = _signed_areas(nodes, triangles) < 0
    triangles[neg] = triangles[neg][:, [0, 2, 1]]

    bids = ring_ids[-1]
    bang = ring_ang[-1]
    edges = np.column_stack([bids, np.roll(bids, -1)])
    theta = np.column_stack([bang, np.append(bang[1:], bang[0] + TWO_PI)])
    mesh = Mesh(nodes, triangles, edges, theta)
    mesh.validate()
    return mesh


def _snap(ang: np.ndarray, snap_angles: Sequence[float]) -> np.ndarray:
    """Pin the nearest node to each snap angle and respace nodes evenly between pins."""
    n = len(ang)
    step = TWO_PI / n
    pins: dict[int, float] = {}
    for s in snap_angles:
        s = float(s) % TWO_PI
        q = int(round(s / step))
        if q == n:
            q, s = 0, s - TWO_PI
        if q in pins and abs(pins[q] - s) > 1e-12:
            raise ValueError("boundary too coarse: two snap angles share a node")
        pins[q] = s
    idx = np.array(sorted(pins))
    val = np.array([pins[q] for q in idx])
    # periodic interpolation of angle against node index
    idx_ext = np.concatenate([idx - n, idx, idx + n])
    val_ext = np.concatenate([val - TWO_PI, val, val + TWO_PI])
    out = np.interp(np.arange(n), idx_ext, val_ext)
    gaps = np.diff(np.append(out, out[0] + TWO_PI))
    if gaps.min() < 0.25 * step:
        raise ValueError("snapping produced a degenerate boundary edge")
    return out


def electrode_snap_angles(k: int, coverage: float) -> np.ndarray:
    """Endpoints of the default equispaced electrodes."""
    centers = math.pi / k + TWO_PI * np.arange(k) / k
    hw = coverage * math.pi / k
    return np.sort(np.concatenate([centers - hw, centers + hw]))


def disk_mesh_for_electrodes(target_h: float, k: int, coverage: float = 0.5) -> Mesh:
    """Disk mesh whose boundary nodes hit every electrode endpoint."""
    return generate_disk_mesh(target_h, snap_angles=electrode_snap_angles(k, coverage))


@dataclass(frozen=True)
class ElectrodeLayout:
    """Equispaced electrodes as angular arcs, plus their boundary edges on a mesh."""

    k: int
    arcs: np.ndarray
    coverage: float
    edges: tuple = field(default=(), repr=False)

    @property
    def widths(self) -> np.ndarray:
        return self.arcs[:, 1] - self.arcs[:, 0]


def _edge_midangles(mesh: Mesh) -> np.ndarray:
    return 0.5 * (mesh.boundary_theta[:, 0] + mesh.boundary_theta[:, 1]) % TWO_PI


def build_electrode_layout(mesh: Mesh, k: int, coverage: float = 0.5) -> ElectrodeLayout:
    """``k`` equispaced arcs of width ``coverage * 2 pi / k``, the first centred at ``pi / k``."""
    if k < 2:
        raise ValueError("need at least two electrodes")
    if not 0.0 < coverage < 1.0:
        raise ValueError("coverage must lie in (0, 1)")
    centers = math.pi / k + TWO_PI * np.arange(k) / k
    hw = coverage * math.pi / k
    arcs = np.column_stack([centers - hw, centers + hw])
    mid = _edge_midangles(mesh)
    edges = []
    for j, (a, b) in enumerate(arcs):
        idx = np.flatnonzero((mid >= a) & (mid < b))
        if len(idx) < 2:
            raise ValueError(f"electrode {j} covers {len(idx)} boundary edge(s); refine the mesh")
        edges.append(idx)
    return ElectrodeLayout(k, arcs, coverage, tuple(edges))


@dataclass(frozen=True)
class ExtendedElectrodeLayout:
    """Boundary partition into arcs ``E_j^+`` containing the electrodes."""

    extended: np.ndarray
    c_min: float

    @property
    def k(self) -> int:
        return len(self.extended)

    @property
    def lengths(self) -> np.ndarray:
        return self.extended[:, 1] - self.extended[:, 0]


def build_extended_electrodes(layout: ElectrodeLayout) -> ExtendedElectrodeLayout:
    k = layout.k
    starts = TWO_PI * np.arange(k) / k
    ext = np.column_stack([starts, starts + TWO_PI / k])
    inside = (layout.arcs[:, 0] >= ext[:, 0] - 1e-12) & (layout.arcs[:, 1] <= ext[:, 1] + 1e-12)
    if not inside.all():
        raise ValueError("layout is not equispaced")
    c_min = float(np.min(layout.widths / (ext[:, 1] - ext[:, 0])))
    return ExtendedElectrodeLayout(ext, c_min)


@dataclass(frozen=True)
class TestCell:
    triangles: np.ndarray
    center: np.ndarray
    diameter: float
    polygon: np.ndarray


@dataclass(frozen=True)
class TestSetCollection:
    cells: tuple
    diam: float
    kind: str = "hexagon"

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self):
        return iter(self.cells)

    @property
    def centers(self) -> np.ndarray:
        return np.array([c.center for c in self.cells]).reshape(-1, 2)


def _hex_round(q: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x, z = q, r
    y = -x - z
    rx, ry, rz = np.round(x), np.round(y), np.round(z)
    dx, dy, dz = np.abs(rx - x), np.abs(ry - y), np.abs(rz - z)
    fix_x = (dx > dy) & (dx > dz)
    fix_z = ~fix_x & ~(dy > dz)
    rx = np.where(fix_x, -ry - rz, rx)
    rz = np.where(fix_z, -rx - ry, rz)
    return rx.astype(np.int64), rz.astype(np.int64)


def build_hex_test_sets(mesh: Mesh, diam: float) -> TestSetCollection:
    """Flat-top hexagonal tiling anchored at the origin; ``diam`` is vertex-to-vertex."""
    if diam < 3.0 * mesh.max_edge:
        raise ValueError(f"diam={diam} is below 3 x max edge = {3.0 * mesh.max_edge:.4g}")
    s = 0.5 * diam
    c = mesh.centroids
    q = (2.0 / 3.0) * c[:, 0] / s
    r = (-c[:, 0] / 3.0 + math.sqrt(3.0) / 3.0 * c[:, 1]) / s
    hq, hr = _hex_round(q, r)
    areas = mesh.areas
    corner = s * np.column_stack([np.cos(np.arange(6) * math.pi / 3), np.sin(np.arange(6) * math.pi / 3)])

    keys = np.column_stack([hq, hr])
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    splits = np.cumsum(np.bincount(inverse.ravel(), minlength=len(uniq)))[:-1]
    groups = np.split(order, splits)

    cells = []
    for (aq, ar), tri in zip(uniq, groups):
        center = np.array([1.5 * s * aq, math.sqrt(3.0) * s * (ar + 0.5 * aq)])
        poly = center + corner
        if np.max(np.linalg.norm(poly, axis=1)) >= 1.0 or len(tri) < 3:
            continue
        eff = 2.0 * math.sqrt(2.0 * areas[tri].sum() / (3.0 * math.sqrt(3.0)))
        cells.append(TestCell(np.sort(tri), center, eff, poly))
    cells.sort(key=lambda cell: (cell.center[1], cell.center[0]))
    return TestSetCollection(tuple(cells), diam)


# ---------------------------------------------------------------- file formats


def write_mesh(mesh: Mesh, path) -> None:
    lines = [f"nodes {mesh.n_nodes}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.nodes.tolist()]
    lines.append(f"triangles {mesh.n_triangles}")
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles.tolist()]
    lines.append(f"boundary {len(mesh.boundary_edges)}")
    for (i, j), (a, b) in zip(mesh.boundary_edges.tolist(), mesh.boundary_theta.tolist()):
        lines.append(f"{i} {j} {a!r} {b!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    it = iter(Path(path).read_text().split("\n"))

    def block(tag):
        head = next(it).split()
        if head[0] != tag:
            raise ValueError(f"expected '{tag}' section, got '{head[0]}'")
        return [next(it).split() for _ in range(int(head[1]))]

    nodes = np.array(block("nodes"), dtype=float).reshape(-1, 2)
    tris = np.array(block("triangles"), dtype=np.int64).reshape(-1, 3)
    bnd = block("boundary")
    edges = np.array([row[:2] for row in bnd], dtype=np.int64).reshape(-1, 2)
    theta = np.array([row[2:] for row in bnd], dtype=float).reshape(-1, 2)
    mesh = Mesh(nodes, tris, edges, theta)
    mesh.validate()
    return mesh


def write_layout(layout: ElectrodeLayout, path) -> None:
    lines = [f"{layout.k} {layout.coverage!r}"]
    lines += [f"{a!r} {b!r}" for a, b in layout.arcs.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_layout(path, mesh: Mesh) -> ElectrodeLayout:
    """Read arcs from file and re-resolve their boundary edges on ``mesh``."""
    rows = Path(path).read_text().split("\n")
    k, coverage = rows[0].split()
    layout = build_electrode_layout(mesh, int(k), float(coverage))
    arcs = np.array([r.split() for r in rows[1:1 + int(k)]], dtype=float)
    if not np.allclose(arcs, layout.arcs, atol=1e-12):
        raise ValueError("layout file arcs are not the default equispaced arcs")
    return layout
