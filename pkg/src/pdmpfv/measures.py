"""Discrete occupation and boundary measures and the weak Kolmogorov residual.

Step ``n`` contributes the density ``p_{n+1}`` at time ``t_n = n dt``.  Cell
integrals reuse the coefficient sample set, so boundary atoms sit exactly at
the exit points ``phi(x, alpha(x))`` used to build ``q_KL``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .coefficients import CoefficientSet
from .mesh import Mesh1D
from .model import PdmpModel, kernel_expectation
from .solver import DensityState, TransientResult

TIME_CHUNK = 64


@dataclass(frozen=True)
class TestFunction:
    """Test function ``g(x, t)``, vectorised, vanishing for ``t >= support_end``."""

    evaluate: Callable[[np.ndarray, np.ndarray], np.ndarray]
    support_end: float
    smoothness: str = "C-infinity"

    __test__ = False  # not a pytest class

    def __call__(self, x, t) -> np.ndarray:
        x, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
        val = np.broadcast_to(np.asarray(self.evaluate(x, t), dtype=float), x.shape)
        return np.where(t < self.support_end, val, 0.0)


def _smooth_step(s: np.ndarray) -> np.ndarray:
    """C-infinity transition from 0 (s <= 0) to 1 (s >= 1), flat at both ends."""
    s = np.clip(np.asarray(s, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        b = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
    return a / (a + b)


def time_cutoff(t, t_flat: float, t_end: float) -> np.ndarray:
    """1 on [0, t_flat], smooth decay, 0 from t_end on."""
    return 1.0 - _smooth_step((np.asarray(t, dtype=float) - t_flat) / (t_end - t_flat))


def bump(x, center: float, radius: float) -> np.ndarray:
    r = (np.asarray(x, dtype=float) - center) / radius
    inside = np.abs(r) < 1
    with np.errstate(divide="ignore"):
        return np.where(inside, np.exp(1.0 - 1.0 / np.where(inside, 1.0 - r * r, 1.0)), 0.0)


def bump_test_function(center: float = 1.0, radius: float = 0.6, t_flat: float = 1.0, t_end: float = 2.0) -> TestFunction:
    """Smooth bump in x times a smooth time cutoff; the shipped residual probe."""
    return TestFunction(lambda x, t: bump(x, center, radius) * time_cutoff(t, t_flat, t_end), support_end=t_end)


def constant_test_function(c: float = 1.0, t_flat: float = 1.0, t_end: float = 2.0) -> TestFunction:
    return TestFunction(lambda x, t: c * time_cutoff(t, t_flat, t_end) + 0.0 * x, support_end=t_end)


@dataclass(frozen=True, eq=False)
class DiscreteMeasures:
    """``mu_D`` and ``sigma_D`` of a transient run.

    ``densities[n]`` is ``p_{n+1}``, placed at ``times[n] = n dt`` with weight ``dt``.
    """

    times: np.ndarray
    densities: np.ndarray
    dt: float
    coeffs: CoefficientSet
    mesh: Mesh1D

    @classmethod
    def from_run(cls, run: TransientResult, coeffs: CoefficientSet, mesh: Mesh1D) -> DiscreteMeasures:
        return cls(run.times, run.densities, run.dt, coeffs, mesh)

    @property
    def horizon(self) -> float:
        return self.dt * self.times.size

    def _chunks(self):
        for start in range(0, self.times.size, TIME_CHUNK):
            sl = slice(start, start + TIME_CHUNK)
            yield self.times[sl], self.densities[sl]

    def mu_weights(self) -> np.ndarray:
        """Atom weights ``dt |K| p_{n+1}^K``, shape ``(steps, cells)``."""
        return self.dt * self.densities * self.coeffs.volumes[None, :]

    def sigma_weights(self) -> np.ndarray:
        """Boundary weight per step and cell: ``dt p_{n+1}^K q_K``."""
        return self.dt * self.densities * self.coeffs.q_vec[None, :]

    def integrate_samples(self, values: Callable[[np.ndarray, np.ndarray], np.ndarray], points, weights, cells) -> float:
        """``sum_n dt sum_j weights_j values(points_j, t_n) p_{n+1}^{cells_j}``."""
        total = 0.0
        if points.size == 0:
            return 0.0
        for ts, dens in self._chunks():
            vals = values(points[:, None], ts[None, :])  # (P, chunk)
            total += float(np.sum(weights[:, None] * vals * dens[:, cells].T))
        return self.dt * total


def integrate_mu(measures: DiscreteMeasures, f: TestFunction) -> float:
    c = measures.coeffs
    return measures.integrate_samples(f, c.points, c.weights, c.cells)


def integrate_sigma(measures: DiscreteMeasures, f: TestFunction) -> float:
    b = measures.coeffs.boundary
    return measures.integrate_samples(f, b.image, b.weight, b.cell)


def flow_derivative(g, model: PdmpModel, x, t, epsilon: float = 1e-4) -> np.ndarray:
    """Derivative of ``g`` along ``s -> (phi(x, s), t + s)`` at ``s = 0``.

    Richardson-extrapolated forward differences with steps ``epsilon`` and
    ``epsilon / 2``.  Requires ``epsilon < alpha(x)`` everywhere.
    """
    x, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
    eps = np.broadcast_to(np.asarray(epsilon, dtype=float), x.shape)
    if np.any(eps <= 0) or np.any(eps >= model.alpha(x)):
        raise ValueError("epsilon must lie in (0, alpha(x))")
    g0 = g(x, t)

    def forward(e):
        return (g(model.flow(x, e), t + e) - g0) / e

    out = 2.0 * forward(0.5 * eps) - forward(eps)
    return out if out.ndim else float(out)


def kolmogorov_residual(
    measures: DiscreteMeasures,
    final_density: DensityState,
    model: PdmpModel,
    g: TestFunction,
    T: float | None = None,
    epsilon: float = 1e-4,
) -> float:
    """Absolute residual of the weak Kolmogorov equation on ``[0, T)``.

    ``rho_T`` is the piecewise-constant ``final_density``; the three integrals
    against ``mu_D``/``sigma_D`` use the discrete measures as recorded.
    """
    T = measures.horizon if T is None else T
    if not np.isclose(T, measures.horizon, rtol=0, atol=1e-9 * max(1.0, T)):
        raise ValueError(f"measures cover [0, {measures.horizon}), residual requested on [0, {T})")
    c = measures.coeffs

    lhs = float(np.sum(c.weights * g(c.points, T) * final_density.p[c.cells]))
    initial = float(np.sum(kernel_expectation(model.initial_law, np.zeros(1), lambda y: g(y, 0.0))))

    # derivative along the flow; steps shrink near the boundary
    alpha = model.alpha(c.points)
    eps = np.minimum(epsilon, 0.25 * alpha)

    def along_flow(x, t):
        return flow_derivative(g, model, x, t, eps[:, None] * np.ones_like(t))

    transport = measures.integrate_samples(along_flow, c.points, c.weights, c.cells)

    rate = model.rate_values(c.points)
    jumping = rate > 0
    pts = c.points[jumping]

    def jump_term(x, t):
        # x is pts[:, None]; evaluate the kernel expectation once per chunk of times
        ts = t[0]
        expect = kernel_expectation(model.interior_kernel, pts, lambda y: g(np.asarray(y)[..., None], ts[None, :]))
        return rate[jumping][:, None] * (expect - g(x, t))

    jumps = measures.integrate_samples(jump_term, pts, c.weights[jumping], c.cells[jumping])

    b = c.boundary
    boundary = 0.0
    if b.image.size:
        uniq, inverse = np.unique(b.image, return_inverse=True)

        def boundary_term(z, t):
            ts = t[0]
            expect = kernel_expectation(model.boundary_kernel, uniq, lambda y: g(np.asarray(y)[..., None], ts[None, :]))
            return expect[inverse] - g(z, t)

        boundary = measures.integrate_samples(boundary_term, b.image, b.weight, b.cell)

    return abs(lhs - initial - transport - jumps - boundary)


def write_mu_atoms(measures: DiscreteMeasures, path: str | Path) -> Path:
    """CSV rows ``t, cell_center, weight``."""
    path = Path(path)
    centers = measures.mesh.centers
    w = measures.mu_weights()
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t", "x", "weight"])
        for n, t in enumerate(measures.times):
            for k in np.nonzero(w[n])[0]:
                out.writerow([f"{t:.17g}", f"{centers[k]:.17g}", f"{w[n, k]:.17g}"])
    return path


def write_sigma_atoms(measures: DiscreteMeasures, path: str | Path) -> Path:
    """CSV rows ``t, exit_point, weight``, aggregated by distinct exit point."""
    path = Path(path)
    b = measures.coeffs.boundary
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t", "x", "weight"])
        if b.image.size:
            uniq, inverse = np.unique(b.image, return_inverse=True)
            for n, t in enumerate(measures.times):
                per_atom = np.bincount(inverse, weights=measures.dt * b.weight * measures.densities[n, b.cell], minlength=uniq.size)
                for z, wz in zip(uniq, per_atom):
                    if wz > 0:
                        out.writerow([f"{t:.17g}", f"{z:.17g}", f"{wz:.17g}"])
    return path
