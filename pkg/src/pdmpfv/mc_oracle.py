"""Monte-Carlo trajectories of a PDMP, independent of the finite-volume code.

Stochastic jumps are simulated by thinning against the global bound
``rate_bound``; forced jumps happen deterministically after ``alpha(x)``.
Particles are simulated in batches, each with its own child seed, so the
merged histogram does not depend on the order in which batches finish.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from .mesh import OUTSIDE, Mesh1D
from .model import MixtureKernel, PdmpModel, _as_array

log = logging.getLogger(__name__)

#: A thinning candidate this close to the boundary time loses to the boundary.
TIE_TOL = 1e-14


@dataclass(frozen=True)
class McConfig:
    particles: int
    horizon: float
    seed: int
    histogram_mesh: Mesh1D
    hit_bin_width: float = 0.01
    batch_size: int = 1 << 17
    workers: int = 1

    def __post_init__(self):
        if self.particles < 1:
            raise ValueError("particles must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")
        if not self.hit_bin_width > 0 or self.batch_size < 1:
            raise ValueError("invalid binning or batch settings")


@dataclass
class Histogram:
    mesh: Mesh1D
    counts: np.ndarray
    particles: int
    boundary_hits: int
    outside: int = 0

    @property
    def density(self) -> np.ndarray:
        return self.counts / (self.particles * self.mesh.volumes)

    @property
    def mass(self) -> float:
        return float(np.dot(self.mesh.volumes, self.density))

    def l1_distance(self, density: np.ndarray) -> float:
        return float(np.dot(self.mesh.volumes, np.abs(self.density - density)))


@dataclass
class HitSeries:
    bin_width: float
    hits: np.ndarray  # raw counts per bin
    particles: int

    @property
    def bin_starts(self) -> np.ndarray:
        return self.bin_width * np.arange(self.hits.size)

    @property
    def hits_per_particle(self) -> np.ndarray:
        return self.hits / self.particles

    @property
    def total_per_particle(self) -> float:
        return float(self.hits.sum()) / self.particles


@dataclass
class McResult:
    histogram: Histogram
    hit_series: HitSeries


@dataclass
class Trajectory:
    final_state: float
    boundary_hits: int
    jump_times: list[float] = field(default_factory=list)
    hit_times: list[float] = field(default_factory=list)


def _numeric_quantile(kernel: MixtureKernel, source: float, u: float) -> float:
    part = kernel.density_part
    total = kernel.density_integral(source, part.support[0], part.support[1])
    lo, hi = part.support
    target = u * total
    return optimize.brentq(lambda y: kernel.density_integral(source, lo, y) - target, lo, hi, xtol=1e-13)


def sample_kernel(kernel: MixtureKernel, sources: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw from ``kernel(x, .)`` for every source ``x``."""
    sources = np.asarray(sources, dtype=float)
    n = sources.size
    out = np.empty(n)
    u = rng.random(n)
    assigned = np.zeros(n, dtype=bool)
    cum = np.zeros(n)
    for atom in kernel.atoms:
        w = _as_array(atom.weight(sources), sources.shape)
        sel = ~assigned & (u < cum + w)
        if sel.any():
            out[sel] = _as_array(atom.location(sources[sel]), (int(sel.sum()),))
        assigned |= sel
        cum = cum + w
    rest = ~assigned
    if rest.any():
        part = kernel.density_part
        if part is None:
            # weights sum to 1 up to roundoff: give the remainder to the last atom
            last = kernel.atoms[-1]
            out[rest] = _as_array(last.location(sources[rest]), (int(rest.sum()),))
        else:
            v = rng.random(int(rest.sum()))
            if part.quantile is not None:
                out[rest] = _as_array(part.quantile(sources[rest], v), v.shape)
            else:
                out[rest] = [_numeric_quantile(kernel, s, vi) for s, vi in zip(sources[rest], v)]
    return out


def simulate_trajectory(
    model: PdmpModel,
    horizon: float,
    rng: np.random.Generator,
    x0: float | None = None,
    record: bool = False,
) -> Trajectory:
    """Single trajectory on ``[0, horizon]``; ``x0`` defaults to a draw from the initial law."""
    lam_bound = model.rate_bound
    x = float(sample_kernel(model.initial_law, np.zeros(1), rng)[0]) if x0 is None else float(x0)
    one = np.empty(1)
    t = 0.0
    hits = 0
    traj = Trajectory(x, 0)
    while True:
        one[0] = x
        a = float(model.alpha(one)[0])
        e = rng.exponential(1.0 / lam_bound)
        r = horizon - t
        if e < a - TIE_TOL and e < r:
            t += e
            one[0] = float(model.flow(one, e)[0])
            x = one[0]
            if rng.random() * lam_bound < float(model.rate_values(one)[0]):
                x = float(sample_kernel(model.interior_kernel, one, rng)[0])
                if record:
                    traj.jump_times.append(t)
        elif a <= r:
            t += a
            one[0] = float(model.flow(one, a)[0])
            hits += 1
            if record:
                traj.hit_times.append(t)
            x = float(sample_kernel(model.boundary_kernel, one, rng)[0])
        else:
            x = float(model.flow(one, r)[0])
            break
    traj.final_state = x
    traj.boundary_hits = hits
    return traj


def _simulate_batch(model: PdmpModel, n: int, horizon: float, rng: np.random.Generator, mesh: Mesh1D, bin_width: float):
    lam_bound = model.rate_bound
    x = sample_kernel(model.initial_law, np.zeros(n), rng)
    t = np.zeros(n)
    n_bins = max(1, math.ceil(horizon / bin_width - 1e-9))
    hit_counts = np.zeros(n_bins, dtype=np.int64)
    active = np.arange(n)
    while active.size:
        xa, ta = x[active], t[active]
        a = model.alpha(xa)
        e = rng.exponential(1.0 / lam_bound, active.size)
        r = horizon - ta
        cand = (e < a - TIE_TOL) & (e < r)
        bnd = ~cand & (a <= r)
        done = ~cand & ~bnd

        if cand.any():
            idx = active[cand]
            xc = model.flow(xa[cand], e[cand])
            accept = rng.random(idx.size) * lam_bound < model.rate_values(xc)
            if accept.any():
                xc[accept] = sample_kernel(model.interior_kernel, xc[accept], rng)
            x[idx] = xc
            t[idx] = ta[cand] + e[cand]
        if bnd.any():
            idx = active[bnd]
            z = model.flow(xa[bnd], a[bnd])
            th = ta[bnd] + a[bnd]
            bins = np.minimum((th / bin_width).astype(np.int64), n_bins - 1)
            hit_counts += np.bincount(bins, minlength=n_bins)
            x[idx] = sample_kernel(model.boundary_kernel, z, rng)
            t[idx] = th
        if done.any():
            idx = active[done]
            x[idx] = model.flow(xa[done], r[done])
            t[idx] = horizon
        active = active[~done]
    cells = mesh.locate(x)
    inside = cells != OUTSIDE
    counts = np.bincount(cells[inside], minlength=mesh.n_cells)
    return counts, int((~inside).sum()), hit_counts


def simulate(model: PdmpModel, config: McConfig) -> McResult:
    """Final-state histogram and boundary-hit series of ``config.particles`` trajectories."""
    sizes = [config.batch_size] * (config.particles // config.batch_size)
    if config.particles % config.batch_size:
        sizes.append(config.particles % config.batch_size)
    children = np.random.SeedSequence(config.seed).spawn(len(sizes))
    mesh = config.histogram_mesh

    def run(job):
        size, child = job
        return _simulate_batch(model, size, config.horizon, np.random.default_rng(child), mesh, config.hit_bin_width)

    jobs = list(zip(sizes, children))
    if config.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    counts = sum(r[0] for r in results)
    outside = sum(r[1] for r in results)
    hits = sum(r[2] for r in results)
    if outside:
        log.warning("%d of %d particles ended outside the histogram mesh", outside, config.particles)
    hist = Histogram(mesh, np.asarray(counts), config.particles, int(hits.sum()), outside)
    return McResult(hist, HitSeries(config.hit_bin_width, np.asarray(hits), config.particles))


def estimate_density(model: PdmpModel, config: McConfig) -> Histogram:
    return simulate(model, config).histogram


def estimate_sigma_mass(model: PdmpModel, config: McConfig) -> HitSeries:
    return simulate(model, config).hit_series


def write_histogram(hist: Histogram, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["cell_center", "density", "count"])
        for c, d, n in zip(hist.mesh.centers, hist.density, hist.counts):
            out.writerow([f"{c:.17g}", f"{d:.17g}", int(n)])
    return path


def write_hit_series(series: HitSeries, path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t_bin", "hits_per_particle"])
        for t, v in zip(series.bin_starts, series.hits_per_particle):
            out.writerow([f"{t:.17g}", f"{v:.17g}"])
    return path
