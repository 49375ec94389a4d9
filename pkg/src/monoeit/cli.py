"""Command-line pipeline: simulate, reconstruct, convergence, selftest.

Every run is driven by a JSON config (see ``experiments/``) plus ``--set``
overrides. Exit codes: 0 success, 1 config error, 2 numerical failure,
3 property-test failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import cm_bridge, fem, mesh as meshmod, monotonicity as mono, synthdata

log = logging.getLogger("monoeit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PROPERTY = 0, 1, 2, 3
IMAGE_SIZE = 256


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    phantom: str = "two_disk"
    gamma0: float | None = None
    k: int = 16
    coverage: float = 0.5
    basis: str = "gram_schmidt"
    z: float = 0.1
    mesh_h: float = 0.0117
    sim_refine: float = 1.87
    inverse_crime: bool = False
    diam: float = 0.053
    beta: object = 0.8
    mu: float = 1.0
    alpha: float | None = None
    sign: str | None = None
    algorithm: int = 1
    sigma: float = 0.0
    seed: int = 0
    data: str | None = None
    ks: list = field(default_factory=lambda: [8, 16, 32])
    sandwich_beta: float = 0.5
    sandwich_sigmas: list = field(default_factory=lambda: [0.0, 5e-3])

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def load_phantom(self) -> synthdata.Phantom:
        if self.phantom in synthdata.PHANTOMS:
            return synthdata.PHANTOMS[self.phantom]()
        path = Path(self.phantom)
        if not path.exists():
            raise ConfigError(f"phantom file not found: {path}")
        try:
            return synthdata.read_phantom(path)
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"invalid phantom {path}: {exc}") from exc

    def background(self) -> float:
        """Known background conductivity; taken from the phantom unless set."""
        return float(self.gamma0) if self.gamma0 is not None else self.load_phantom().gamma0

    def betas(self) -> tuple[float, ...]:
        b = self.beta
        if isinstance(b, dict):
            try:
                return mono.beta_schedule(float(b["start"]), float(b["step"]), int(b.get("stages", 1000)))
            except KeyError as exc:
                raise ConfigError(f"beta schedule needs {exc}") from exc
        if isinstance(b, (list, tuple)):
            return tuple(float(x) for x in b)
        return (float(b),)

    def reconstruction(self, phantom_sign: str | None = None, threads: int = 1) -> mono.ReconstructionConfig:
        sign = self.sign or phantom_sign or "conductive"
        betas = self.betas()
        beta = betas[0] if self.algorithm == 1 and len(betas) == 1 else betas
        try:
            return mono.ReconstructionConfig(beta, self.mu, sign, self.algorithm, self.alpha, threads)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    d = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        d[key.strip()] = _parse_value(value)
    d.pop("comment", None)
    try:
        return RunConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


@contextmanager
def stage(name: str):
    t = time.perf_counter()
    yield
    log.info("%-28s %8.2f s", name, time.perf_counter() - t)


# ---------------------------------------------------------------- rendering


def render_indicator(centers: np.ndarray, values: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """8-bit raster of a hexagonal indicator field on ``[-1, 1]^2``.

    The hexagon size is recovered from the center spacing, so the image is a
    function of the indicator file alone.
    """
    img = np.zeros((size, size), dtype=np.uint8)
    if len(centers) == 0:
        return img
    tree = cKDTree(centers)
    if len(centers) > 1:
        d, _ = tree.query(centers, k=2)
        s = float(np.min(d[:, 1])) / math.sqrt(3.0)
    else:
        s = 1.0
    px = -1.0 + (np.arange(size) + 0.5) * (2.0 / size)
    xx, yy = np.meshgrid(px, -px)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    _, idx = tree.query(pts)
    dx = np.abs(pts[:, 0] - centers[idx, 0])
    dy = np.abs(pts[:, 1] - centers[idx, 1])
    h = math.sqrt(3.0) * s
    inside = (dy <= 0.5 * h * (1 + 1e-12)) & (math.sqrt(3.0) * dx + dy <= h * (1 + 1e-12))
    vmax = float(np.max(values))
    if vmax <= 0:
        return img
    level = np.rint(255.0 * np.clip(values, 0, None) / vmax).astype(np.uint8)
    img.ravel()[inside] = level[idx[inside]]
    return img


def write_pgm(img: np.ndarray, path) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------- commands


def _reconstruction_mesh(cfg: RunConfig):
    return meshmod.disk_mesh_for_electrodes(cfg.mesh_h, cfg.k, cfg.coverage)


def cmd_simulate(cfg: RunConfig, out: Path, threads: int = 1) -> dict:
    phantom = cfg.load_phantom()
    basis = synthdata.current_basis(cfg.basis, cfg.k)
    h = cfg.mesh_h if cfg.inverse_crime else cfg.mesh_h / cfg.sim_refine
    with stage("simulation mesh"):
        m = meshmod.disk_mesh_for_electrodes(h, cfg.k, cfg.coverage)
    with stage("forward solve"):
        v = synthdata.simulate_voltages(phantom, m, cfg.k, cfg.z, basis, cfg.coverage)
    with stage("noise"):
        noisy = synthdata.apply_noise(v, synthdata.NoiseSpec(cfg.sigma, cfg.seed), basis)
    out.mkdir(parents=True, exist_ok=True)
    synthdata.write_voltages(out / "voltages.csv", noisy.v_tilde, cfg.basis, cfg.sigma, cfg.seed)
    meta = {
        "phantom": phantom.to_dict(), "k": cfg.k, "basis": cfg.basis, "z": cfg.z, "coverage": cfg.coverage,
        "sigma": cfg.sigma, "seed": cfg.seed, "sim_mesh_h": h, "sim_triangles": m.n_triangles,
        "relative_error": noisy.relative_error, "delta": noisy.delta,
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("relative error %.3e (sigma=%g)", noisy.relative_error, cfg.sigma)
    return meta


def cmd_reconstruct(cfg: RunConfig, out: Path, threads: int = 1) -> mono.IndicatorField:
    data_path = Path(cfg.data) if cfg.data else out / "voltages.csv"
    if not data_path.exists():
        raise ConfigError(f"data file not found: {data_path}")
    try:
        v_tilde, meta = synthdata.read_voltages(data_path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if meta["k"] != cfg.k or meta["basis"] != cfg.basis:
        raise ConfigError(f"data has k={meta['k']} basis={meta['basis']}, config has k={cfg.k} basis={cfg.basis}")
    phantom_sign = None
    if cfg.sign is None:
        try:
            phantom_sign = cfg.load_phantom().sign
        except ConfigError:
            phantom_sign = None
    rc = cfg.reconstruction(phantom_sign, threads)
    basis = synthdata.current_basis(cfg.basis, cfg.k)

    with stage("reconstruction mesh"):
        m = _reconstruction_mesh(cfg)
        layout = meshmod.build_electrode_layout(m, cfg.k, cfg.coverage)
        cells = meshmod.build_hex_test_sets(m, cfg.diam)
    with stage("background model"):
        s0 = fem.assemble_cem_system(m, layout, np.full(m.n_triangles, cfg.background()), cfg.z)
        r0 = fem.measurement_matrix(s0, basis)
    with stage("sensitivities"):
        blocks = fem.cell_sensitivities(fem.sensitivity_tensor(s0, basis), cells)
    with stage("data"):
        v_delta = synthdata.symmetrize_data(v_tilde, basis.matrix)
        entries, _ = fem.frame_matrix(basis, v_delta)
        rd = fem.MeasurementMatrix(entries, basis, v_delta)
    with stage(f"algorithm {rc.algorithm}"):
        ind = mono.reconstruct(blocks, r0, rd, cells, rc)
    alpha = rc.alpha if rc.alpha is not None else mono.regularization_alpha(r0, rd, rc.mu, rc.sign)
    out.mkdir(parents=True, exist_ok=True)
    ind.write_csv(out / "indicator.csv")
    centers, values = mono.read_indicator_csv(out / "indicator.csv")
    write_pgm(render_indicator(centers, values), out / "indicator.pgm")
    log.info("alpha %.6e, %d of %d cells positive", alpha, int(ind.support.sum()), len(cells))
    return ind


def cmd_convergence(cfg: RunConfig, out: Path, threads: int = 1):
    ks = [int(k) for k in cfg.ks]
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ConfigError("k list must be strictly increasing")
    phantom = cfg.load_phantom()
    angles = np.unique(np.concatenate([meshmod.electrode_snap_angles(k, cfg.coverage) for k in ks]))
    with stage("shared mesh"):
        m = meshmod.generate_disk_mesh(cfg.mesh_h, snap_angles=angles)
    gamma = synthdata.rasterize_phantom(phantom, m)
    with stage("operator distances"):
        rows = cm_bridge.convergence_study(lambda k: m, lambda _: gamma, ks, cfg.z, cfg.coverage)
    out.mkdir(parents=True, exist_ok=True)
    cm_bridge.write_convergence_csv(rows, out / "convergence.csv")
    report = None
    if phantom.sign == "conductive" and phantom.inclusions:
        with stage("sandwich sets"):
            report = mono.sandwich_experiment(m, phantom, ks, cfg.sandwich_sigmas, cfg.diam, cfg.sandwich_beta,
                                              ref_modes=max(64, 2 * ks[-1]), z=cfg.z,
                                              coverage=cfg.coverage, seed=cfg.seed)
        with open(out / "sandwich.csv", "w") as fh:
            names = [f.name for f in fields(mono.SandwichRow)]
            fh.write(",".join(names) + "\n")
            for r in report.rows:
                fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in asdict(r).values()) + "\n")
    for r in rows:
        log.info("k=%d distance %.6e ratio %s", r.k, r.norm_estimate,
                 "-" if r.ratio_vs_prev is None else f"{r.ratio_vs_prev:.3f}")
    return rows, report


def cmd_selftest(cfg: RunConfig | None = None, out: Path | None = None, threads: int = 1) -> bool:
    from .selftest import run_all

    results = run_all()
    passed = sum(ok for _, ok, _ in results)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    print(f"{passed}/{len(results)} properties passed")
    return passed == len(results)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monoeit", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "reconstruct", "convergence", "selftest"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--set", action="append", default=[], metavar="K=V", help="override a config key")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--threads", type=int, default=1, help="worker threads (0 = auto)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "convergence": cmd_convergence,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "selftest":
            return EXIT_OK if cmd_selftest(threads=args.threads) else EXIT_PROPERTY
        cfg = load_config(args.config, args.set)
        COMMANDS[args.command](cfg, Path(args.out), args.threads)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (fem.SingularSystemError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
