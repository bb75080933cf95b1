"""Command-line runner: finite-volume densities, checks, and the Monte-Carlo oracle.

Configuration is a YAML file with the sections below; command-line flags
override file values.

.. code-block:: yaml

    model:  {name: TCP-FJ, X: 2.0, p: 0.5}
    mesh:   {h: 0.1}            # or {edges: [0.0, 0.5, ...]}
    scheme: {tau: 0.1, dt: 0.1, T: 10.0, method: direct,
             fixed_point_tolerance: 1.0e-12, quadrature_points: 64,
             quadrature_rule: midpoint}
    snapshots: [1.0, 10.0]      # default: [T]
    mc:     {particles: 100000, hit_bin_width: 0.1, workers: 1}   # optional
    residual: {levels: [0.2, 0.1, 0.05]}                          # optional
    export: {atoms: false, coefficients: false}
    output_dir: out
    seed: 0
"""

from __future__ import annotations

import argparse
import copy
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .coefficients import QuadratureSpec, compute_coefficients, export_triplets, verify_balance
from .measures import DiscreteMeasures, bump_test_function, kolmogorov_residual, write_mu_atoms, write_sigma_atoms
from .mc_oracle import McConfig, simulate, write_histogram, write_hit_series
from .mesh import Mesh1D, build_uniform
from .model import TCP_VARIANTS, build_tcp_model
from .solver import METHODS, SchemeParams, run_transient

log = logging.getLogger("pdmpfv")

BALANCE_TOL = 1e-13
MASS_TOL = 1e-9

#: (h, tau, dt) of the four panels of the reference density figure.
FIGURE1_SETS = [(0.2, 0.2, 0.2), (0.1, 0.1, 0.1), (0.01, 0.01, 0.01), (0.01, 0.005, 0.01)]
DEFAULT_X = {"TCP-I": 6.0, "TCP-F": 2.0, "TCP-FJ": 2.0}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str
    X: float
    p: float
    tau: float
    dt: float
    T: float
    h: float | None = None
    edges: list[float] | None = None
    method: str = "direct"
    fixed_point_tolerance: float = 1e-12
    quadrature_points: int = 64
    quadrature_rule: str = "midpoint"
    snapshots: list[float] = field(default_factory=list)
    mc_particles: int = 0
    mc_hit_bin_width: float | None = None
    mc_workers: int = 1
    residual_levels: list[float] = field(default_factory=list)
    export_atoms: bool = False
    export_coefficients: bool = False
    output_dir: Path = Path("out")
    seed: int = 0

    def validate(self) -> RunConfig:
        if self.model not in TCP_VARIANTS:
            raise ConfigError(f"model.name: unknown model {self.model!r}; expected one of {TCP_VARIANTS}")
        for name in ("X", "tau", "dt", "T"):
            value = getattr(self, name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ConfigError(f"{_FIELD_PATHS[name]}: must be a positive number, got {value!r}")
        if not 0 <= self.p <= 1:
            raise ConfigError(f"model.p: must lie in [0, 1], got {self.p!r}")
        if self.edges is None and not (self.h is not None and self.h > 0):
            raise ConfigError("mesh.h: must be a positive number (or give mesh.edges)")
        if self.method not in METHODS:
            raise ConfigError(f"scheme.method: expected one of {METHODS}, got {self.method!r}")
        if self.mc_particles < 0:
            raise ConfigError("mc.particles: must be nonnegative")
        if any(level <= 0 for level in self.residual_levels):
            raise ConfigError("residual.levels: entries must be positive")
        return self

    @property
    def label(self) -> str:
        h = self.h if self.edges is None else "custom"
        return f"{self.model}_h{h}_tau{self.tau}_dt{self.dt}"


_FIELD_PATHS = {
    "model": "model.name", "X": "model.X", "p": "model.p",
    "h": "mesh.h", "edges": "mesh.edges",
    "tau": "scheme.tau", "dt": "scheme.dt", "T": "scheme.T", "method": "scheme.method",
    "fixed_point_tolerance": "scheme.fixed_point_tolerance",
    "quadrature_points": "scheme.quadrature_points", "quadrature_rule": "scheme.quadrature_rule",
    "snapshots": "snapshots",
    "mc_particles": "mc.particles", "mc_hit_bin_width": "mc.hit_bin_width", "mc_workers": "mc.workers",
    "residual_levels": "residual.levels",
    "export_atoms": "export.atoms", "export_coefficients": "export.coefficients",
    "output_dir": "output_dir", "seed": "seed",
}


def _flatten(raw: dict) -> dict:
    flat = {}
    known_sections = {"model", "mesh", "scheme", "mc", "residual", "export"}
    path_to_key = {v: k for k, v in _FIELD_PATHS.items()}
    for key, value in raw.items():
        if key in known_sections:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected a mapping")
            for sub, v in value.items():
                path = f"{key}.{sub}"
                if path not in path_to_key:
                    raise ConfigError(f"{path}: unknown field")
                flat[path_to_key[path]] = v
        elif key in path_to_key:
            flat[path_to_key[key]] = value
        else:
            raise ConfigError(f"{key}: unknown field")
    return flat


def load_config_file(path: str | Path) -> dict:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"{path}: cannot parse config{where}: {getattr(exc, 'problem', exc)}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return _flatten(raw)


def make_config(values: dict) -> RunConfig:
    values = dict(values)
    model = values.setdefault("model", "TCP-FJ")
    values.setdefault("X", DEFAULT_X.get(model, 2.0))
    values.setdefault("p", 0.5)
    missing = [k for k in ("tau", "dt", "T") if values.get(k) is None]
    if values.get("h") is None and values.get("edges") is None:
        missing.insert(0, "h")
    if missing:
        raise ConfigError("; ".join(f"{_FIELD_PATHS[k]}: missing" for k in missing))
    try:
        cfg = RunConfig(**{k: v for k, v in values.items() if v is not None})
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("X", "p", "tau", "dt", "T", "h", "fixed_point_tolerance"):
        value = getattr(cfg, key)
        if value is not None and not isinstance(value, (int, float)):
            raise ConfigError(f"{_FIELD_PATHS[key]}: expected a number, got {value!r}")
    cfg.output_dir = Path(cfg.output_dir)
    cfg.snapshots = [float(s) for s in cfg.snapshots] or [cfg.T]
    return cfg.validate()


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def _build(cfg: RunConfig, h: float | None = None, tau: float | None = None, dt: float | None = None):
    h = cfg.h if h is None else h
    tau = cfg.tau if tau is None else tau
    dt = cfg.dt if dt is None else dt
    if cfg.edges is not None and h == cfg.h:
        mesh = Mesh1D.from_edges(cfg.edges)
        model = build_tcp_model(cfg.model, cfg.X, cfg.p, h=float(mesh.volumes[-1]))
    else:
        model = build_tcp_model(cfg.model, cfg.X, cfg.p, h=h)
        mesh = build_uniform(model.domain, h)
    quad = QuadratureSpec(cfg.quadrature_points, cfg.quadrature_rule, cfg.seed)
    coeffs = compute_coefficients(model, mesh, tau, quad)
    params = SchemeParams(dt, tau, fixed_point_tolerance=cfg.fixed_point_tolerance, method=cfg.method)
    return model, mesh, coeffs, params


def _residual_probe(cfg: RunConfig, T: float):
    t_end = min(2.0, T)
    return bump_test_function(center=0.5 * cfg.X, radius=0.3 * cfg.X, t_flat=0.5 * t_end, t_end=t_end)


def run(cfg: RunConfig) -> int:
    """Run one configuration; returns the process exit status."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    model, mesh, coeffs, params = _build(cfg)
    log.info("%s: %d cells, tau=%g, dt=%g, T=%g, method=%s", cfg.model, mesh.n_cells, cfg.tau, cfg.dt, cfg.T, cfg.method)

    balance = verify_balance(coeffs, mesh)
    balance_tol = BALANCE_TOL * float(mesh.volumes.max())
    result = run_transient(model, mesh, coeffs, params, cfg.T, snapshots=cfg.snapshots, log_every=max(1, round(cfg.T / cfg.dt) // 10))

    masses = np.concatenate([[result.initial.mass], result.masses])
    lost = np.concatenate([[0.0], result.lost])
    mass_error = float(np.max(np.abs(masses + lost - 1.0)))
    min_density = float(min(result.initial.p.min(), result.densities.min() if result.steps else np.inf))
    sigma_steps = result.dt * result.densities @ coeffs.q_vec

    rows = []
    for s in sorted(result.snapshots):
        st = result.snapshots[s]
        rows.extend((s, float(c), float(d)) for c, d in zip(mesh.centers, st.p))
    _write_csv(out / "density.csv", ["t", "cell_center", "density"], rows)
    _write_csv(out / "sigma.csv", ["t", "sigma_mass"], [(float(t), float(v)) for t, v in zip(result.times, sigma_steps)])

    measures = DiscreteMeasures.from_run(result, coeffs, mesh)
    if cfg.export_atoms:
        write_mu_atoms(measures, out / "mu_atoms.csv")
        write_sigma_atoms(measures, out / "sigma_atoms.csv")
    if cfg.export_coefficients:
        export_triplets(coeffs, out / "coefficients")

    report = {
        "model": cfg.model,
        "X": cfg.X,
        "p": cfg.p,
        "cells": mesh.n_cells,
        "h": mesh.h,
        "tau": cfg.tau,
        "dt": cfg.dt,
        "T": cfg.T,
        "method": cfg.method,
        "steps": result.steps,
        "balance_violation": balance,
        "balance_ok": balance <= balance_tol,
        "min_density": min_density,
        "positivity_ok": min_density >= 0.0,
        "max_mass_error": mass_error,
        "mass_ok": mass_error <= MASS_TOL,
        "lost_mass": float(result.final.lost_mass),
        "boundary_mass": float(sigma_steps.sum()),
        "last_cell_mass": float(result.final.p[-1] * mesh.volumes[-1]),
    }

    if result.steps:
        probe = _residual_probe(cfg, result.steps * result.dt)
        report["residual"] = kolmogorov_residual(measures, result.final, model, probe)
    residual_rows = [("run", mesh.h, cfg.tau, cfg.dt, report.get("residual", float("nan")))]
    for level in cfg.residual_levels:
        lm, lmesh, lc, lp = _build(cfg, h=level, tau=level, dt=level)
        lr = run_transient(lm, lmesh, lc, lp, cfg.T)
        lmeas = DiscreteMeasures.from_run(lr, lc, lmesh)
        res = kolmogorov_residual(lmeas, lr.final, lm, _residual_probe(cfg, lr.steps * lr.dt))
        residual_rows.append(("level", level, level, level, res))
    with (out / "residual.csv").open("w") as fh:
        fh.write("kind,h,tau,dt,residual\n")
        for kind, *vals in residual_rows:
            fh.write(kind + "," + ",".join(_fmt(float(v)) for v in vals) + "\n")

    if cfg.mc_particles:
        mc_cfg = McConfig(
            particles=cfg.mc_particles,
            horizon=result.steps * result.dt,
            seed=cfg.seed,
            histogram_mesh=mesh,
            hit_bin_width=cfg.mc_hit_bin_width or cfg.dt,
            workers=cfg.mc_workers,
        )
        mc = simulate(model, mc_cfg)
        write_histogram(mc.histogram, out / "mc_histogram.csv")
        write_hit_series(mc.hit_series, out / "mc_hits.csv")
        report["mc_particles"] = cfg.mc_particles
        report["mc_l1_distance"] = mc.histogram.l1_distance(result.final.p)
        report["mc_last_cell_mass"] = float(mc.histogram.density[-1] * mesh.volumes[-1])
        report["mc_boundary_hits_per_particle"] = mc.hit_series.total_per_particle
        report["mc_outside"] = mc.histogram.outside

    ok = report["balance_ok"] and report["positivity_ok"] and report["mass_ok"]
    report["status"] = "ok" if ok else "invariant_violation"
    with (out / "report.txt").open("w") as fh:
        for key, value in report.items():
            fh.write(f"{key}: {_fmt(value) if isinstance(value, float) else value}\n")
    if not ok:
        log.error("invariant violation, see %s", out / "report.txt")
    return 0 if ok else 1


def _run_preset_job(cfg: RunConfig) -> int:
    return run(cfg)


def figure1_configs(base: dict, models: list[str]) -> list[RunConfig]:
    configs = []
    for model in models:
        for h, tau, dt in FIGURE1_SETS:
            values = dict(base)
            values.update(model=model, h=h, tau=tau, dt=dt, edges=None)
            if base.get("model") != model or "X" not in base:
                values["X"] = DEFAULT_X[model]
            values.setdefault("T", 10.0)
            cfg = make_config(values)
            cfg.output_dir = Path(base.get("output_dir", "out")) / cfg.label
            configs.append(cfg)
    return configs


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdmpfv", description=__doc__.split("\n")[0])
    ap.add_argument("--config", type=Path, help="YAML configuration file")
    ap.add_argument("--model", choices=TCP_VARIANTS)
    ap.add_argument("--X", type=float)
    ap.add_argument("--p", type=float)
    ap.add_argument("--h", type=float)
    ap.add_argument("--tau", type=float)
    ap.add_argument("--dt", type=float)
    ap.add_argument("--T", type=float)
    ap.add_argument("--method", choices=METHODS)
    ap.add_argument("--snapshots", type=float, nargs="+")
    ap.add_argument("--mc-particles", type=int)
    ap.add_argument("--residual-levels", type=float, nargs="+")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--output-dir", type=Path)
    ap.add_argument("--preset", choices=["figure1"])
    ap.add_argument("--jobs", type=int, default=1, help="parallel runs for presets")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        values = load_config_file(args.config) if args.config else {}
        overrides = {
            "model": args.model, "X": args.X, "p": args.p, "h": args.h, "tau": args.tau,
            "dt": args.dt, "T": args.T, "method": args.method, "snapshots": args.snapshots,
            "mc_particles": args.mc_particles, "residual_levels": args.residual_levels,
            "seed": args.seed, "output_dir": args.output_dir,
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        if args.h is not None:
            values.pop("edges", None)
        if args.preset == "figure1":
            models = [values["model"]] if "model" in values else list(TCP_VARIANTS)
            configs = figure1_configs(values, models)
        else:
            configs = [make_config(values)]
    except ConfigError as exc:
        print(f"pdmpfv: config error: {exc}", file=sys.stderr)
        return 2

    if args.jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            statuses = list(pool.map(_run_preset_job, configs))
    else:
        statuses = [run(cfg) for cfg in configs]
    return max(statuses)


if __name__ == "__main__":
    sys.exit(main())
