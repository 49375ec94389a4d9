"""Reference solutions that share no code with the package."""
from __future__ import annotations

import math

import numpy as np


def disk_cem_voltages(k: int, coverage: float, z: float, currents: np.ndarray,
                      degree: int = 24, modes: int = 4000, quad: int = 600) -> np.ndarray:
    """Electrode voltages of the unit disk with unit conductivity.

    The current density under each electrode is expanded in Legendre
    polynomials; the Neumann-to-Dirichlet map of the disk is diagonal in
    Fourier modes (eigenvalue 1/n). Electrode j spans the arc centered at
    ``pi/k + 2 pi j/k`` with half-width ``coverage * pi / k``.
    """
    currents = np.atleast_2d(np.asarray(currents, dtype=float).T).T.reshape(k, -1)
    half = coverage * math.pi / k
    s, w = np.polynomial.legendre.leggauss(quad)
    n = np.arange(1, modes + 1)
    nb = degree + 1
    leg = np.polynomial.legendre.legvander(s, degree)  # (quad, nb)
    cos_c = np.empty((k * nb, modes))
    sin_c = np.empty((k * nb, modes))
    mass = np.zeros((k * nb, k * nb))
    ones = np.zeros(k * nb)
    for j in range(k):
        theta = math.pi / k + 2 * math.pi * j / k + half * s
        ww = w * half
        blk = slice(j * nb, (j + 1) * nb)
        cos_c[blk] = (leg * ww[:, None]).T @ np.cos(np.outer(theta, n))
        sin_c[blk] = (leg * ww[:, None]).T @ np.sin(np.outer(theta, n))
        mass[blk, blk] = (leg * ww[:, None]).T @ leg
        ones[blk] = ww @ leg
    nd = (cos_c / (math.pi * n)) @ cos_c.T + (sin_c / (math.pi * n)) @ sin_c.T

    size = k * nb + k + 1
    a = np.zeros((size, size))
    a[:k * nb, :k * nb] = nd + z * mass
    a[:k * nb, -1] = ones  # additive constant of the potential
    for j in range(k):
        blk = slice(j * nb, (j + 1) * nb)
        a[blk, k * nb + j] = -ones[blk]
        a[k * nb + j, blk] = ones[blk]
    a[-1, k * nb:k * nb + k] = 1.0
    rhs = np.zeros((size, currents.shape[1]))
    rhs[k * nb:k * nb + k] = currents
    x = np.linalg.solve(a, rhs)
    return x[k * nb:k * nb + k]


def disk_cem_frame_matrix(k: int, coverage: float, z: float, **kw) -> np.ndarray:
    """Measurement map of the homogeneous unit disk in an orthonormal mean-free frame."""
    q, _ = np.linalg.qr(np.eye(k) - 1.0 / k)
    frame = q[:, :k - 1]
    v = disk_cem_voltages(k, coverage, z, frame, **kw)
    m = frame.T @ v
    return 0.5 * (m + m.T), frame
