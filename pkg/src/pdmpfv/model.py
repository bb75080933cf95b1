"""PDMP-with-boundary model definition, TCP built-ins and hypothesis audit.

All model callables operate elementwise on numpy arrays and must be pure:
they are shared between the coefficient assembly, the solvers and the
Monte-Carlo oracle, possibly from several threads at once.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

log = logging.getLogger(__name__)

ArrayFn = Callable[[np.ndarray], np.ndarray]
PairFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

#: Default cap used for hitting times of flows that never reach G.
ALPHA_HORIZON = 1.0e6
QUAD_EPSREL = 1.0e-10
KERNEL_MASS_TOL = 1.0e-12

TCP_VARIANTS = ("TCP-I", "TCP-F", "TCP-FJ")


class ModelError(ValueError):
    """Raised for invalid model definitions or parameters."""


def _as_array(value, shape) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape == shape:
        return arr
    return np.broadcast_to(arr, shape).copy()


@dataclass(frozen=True)
class DomainSpec:
    """State space ``F = (lower, upper)`` truncated below at ``truncation_lower``."""

    upper: float
    truncation_lower: float
    lower: float = -math.inf
    dimension: int = 1

    def __post_init__(self):
        if self.dimension != 1:
            raise ModelError(f"only one-dimensional domains are supported, got d={self.dimension}")
        if not self.truncation_lower < self.upper:
            raise ModelError(
                f"truncation_lower={self.truncation_lower} must be below upper={self.upper}"
            )
        if self.truncation_lower < self.lower:
            raise ModelError("truncation_lower lies outside the state space")

    @property
    def width(self) -> float:
        return self.upper - self.truncation_lower

    def contains(self, x) -> np.ndarray:
        """Membership in the open state space F."""
        x = np.asarray(x, dtype=float)
        return (x > self.lower) & (x < self.upper)


@dataclass(frozen=True)
class FlowMap:
    evaluate_fn: PairFn

    def evaluate(self, x, t) -> np.ndarray:
        x, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
        return _as_array(self.evaluate_fn(x, t), x.shape)

    __call__ = evaluate


@dataclass(frozen=True)
class HittingTime:
    """Hitting time of G, forced to 0 outside F and capped at ``horizon``.

    Values equal to ``horizon`` mean the flow does not reach G in time.
    """

    evaluate_fn: ArrayFn
    domain: DomainSpec
    horizon: float = ALPHA_HORIZON

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        raw = _as_array(self.evaluate_fn(x), x.shape)
        out = np.where(self.domain.contains(x), raw, 0.0)
        return np.minimum(out, self.horizon)

    __call__ = evaluate


@dataclass(frozen=True)
class Atom:
    location: ArrayFn
    weight: ArrayFn


@dataclass(frozen=True)
class DensityPart:
    """Absolutely continuous part of a kernel.

    ``density(source, y)`` integrates over ``support`` to ``mass(source)``.
    ``cdf(source, y)`` (mass on ``(-inf, y)``) and ``quantile(source, u)``
    (inverse of the normalised cdf, ``u`` in [0, 1)) are optional closed forms;
    without them quadrature and root finding are used.
    """

    density: PairFn
    mass: ArrayFn
    support: tuple[float, float]
    cdf: PairFn | None = None
    quantile: PairFn | None = None


@dataclass(frozen=True)
class MixtureKernel:
    """Transition kernel made of point masses plus an optional density part.

    Also used for the initial law, in which case the source argument is
    ignored by every callable.
    """

    atoms: tuple[Atom, ...] = ()
    density_part: DensityPart | None = None

    @classmethod
    def dirac(cls, location: float | ArrayFn) -> MixtureKernel:
        loc = location if callable(location) else (lambda x, c=float(location): np.full_like(x, c))
        return cls(atoms=(Atom(loc, lambda x: np.ones_like(x)),))

    @classmethod
    def uniform(cls, a: float, b: float) -> MixtureKernel:
        return cls(density_part=uniform_part(a, b, 1.0))

    def total_mass(self, source) -> np.ndarray:
        source = np.atleast_1d(np.asarray(source, dtype=float))
        total = np.zeros_like(source)
        for atom in self.atoms:
            total = total + _as_array(atom.weight(source), source.shape)
        if self.density_part is not None:
            total = total + _as_array(self.density_part.mass(source), source.shape)
        return total

    def density_integral(self, source: float, a: float, b: float) -> float:
        """Mass of the density part on [a, b) for one source point."""
        part = self.density_part
        if part is None or b <= a:
            return 0.0
        lo, hi = max(a, part.support[0]), min(b, part.support[1])
        if hi <= lo:
            return 0.0
        if part.cdf is not None:
            s = np.array([source], dtype=float)
            return float(part.cdf(s, np.array([hi]))[0] - part.cdf(s, np.array([lo]))[0])
        value, _ = integrate.quad(
            lambda y: float(part.density(np.array([source]), np.array([y]))[0]),
            lo,
            hi,
            epsrel=QUAD_EPSREL,
            epsabs=0.0,
            limit=200,
        )
        return value


def uniform_part(a: float, b: float, mass: float) -> DensityPart:
    """Uniform density of total ``mass`` on (a, b), with closed-form cdf and quantile."""
    if not b > a:
        raise ModelError("uniform part needs a < b")
    height = mass / (b - a)

    def density(src, y):
        y = np.asarray(y, dtype=float)
        return np.where((y > a) & (y < b), height, 0.0) * np.ones_like(np.asarray(src, dtype=float))

    def cdf(src, y):
        y = np.asarray(y, dtype=float)
        return height * (np.clip(y, a, b) - a) * np.ones_like(np.asarray(src, dtype=float))

    def quantile(src, u):
        return a + (b - a) * np.asarray(u, dtype=float) * np.ones_like(np.asarray(src, dtype=float))

    return DensityPart(
        density=density,
        mass=lambda x: np.full_like(np.asarray(x, dtype=float), mass),
        support=(a, b),
        cdf=cdf,
        quantile=quantile,
    )


def kernel_mass_on_interval(kernel: MixtureKernel, source: float, interval: tuple[float, float]) -> float:
    """Probability that ``kernel(source, .)`` puts on the half-open ``[a, b)``."""
    a, b = interval
    if not a < b:
        raise ModelError(f"malformed interval [{a}, {b})")
    src = np.array([float(source)])
    total = 0.0
    for atom in kernel.atoms:
        loc = float(_as_array(atom.location(src), src.shape)[0])
        if a <= loc < b:
            total += float(_as_array(atom.weight(src), src.shape)[0])
    return total + kernel.density_integral(float(source), a, b)


def kernel_expectation(kernel: MixtureKernel, sources, fn: ArrayFn, panels: int = 64, order: int = 8) -> np.ndarray:
    """``int fn(y) kernel(x, dy)`` for every source point ``x``.

    ``fn`` maps an array of targets to values of the same shape, possibly with
    trailing axes (for example one column per time level).  The density part
    is integrated with composite Gauss-Legendre on its support.
    """
    sources = np.atleast_1d(np.asarray(sources, dtype=float))
    result = None
    for atom in kernel.atoms:
        loc = _as_array(atom.location(sources), sources.shape)
        w = _as_array(atom.weight(sources), sources.shape)
        vals = np.asarray(fn(loc))
        term = vals * w.reshape(w.shape + (1,) * (vals.ndim - 1))
        result = term if result is None else result + term
    part = kernel.density_part
    if part is not None:
        nodes, weights = np.polynomial.legendre.leggauss(order)
        edges = np.linspace(part.support[0], part.support[1], panels + 1)
        mid = 0.5 * (edges[1:] + edges[:-1])
        half = 0.5 * np.diff(edges)
        ys = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        ws = (half[:, None] * weights[None, :]).ravel()
        dens = part.density(sources[:, None], ys[None, :])  # (S, Q)
        vals = np.asarray(fn(ys))  # (Q, ...)
        term = np.tensordot(dens * ws[None, :], vals, axes=(1, 0))
        result = term if result is None else result + term
    if result is None:
        return np.zeros(sources.shape)
    return result


@dataclass(frozen=True)
class PdmpModel:
    """The data (flow, hitting time, rate, kernels, initial law) of a PDMP with boundary."""

    domain: DomainSpec
    flow: FlowMap
    alpha: HittingTime
    rate: ArrayFn
    rate_bound: float
    interior_kernel: MixtureKernel
    boundary_kernel: MixtureKernel
    initial_law: MixtureKernel
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.rate_bound > 0:
            raise ModelError("rate_bound must be positive")
        mass = float(self.initial_law.total_mass(0.0)[0])
        if abs(mass - 1.0) > KERNEL_MASS_TOL:
            raise ModelError(f"initial law has mass {mass}, expected 1")

    def rate_values(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return _as_array(self.rate(x), x.shape)

    def boundary_image(self, x) -> np.ndarray:
        """Exit point ``phi(x, alpha(x))`` of the flow started at ``x``."""
        return self.flow(x, self.alpha(x))


def build_tcp_model(variant: str, X: float, p: float = 0.5, h: float = 0.01) -> PdmpModel:
    """TCP window-size model on (-inf, X), truncated to [0, X).

    ``h`` is only used by TCP-F, whose boundary kernel sends the process to
    ``X - h/2`` (the centre of the last cell of a uniform mesh of width ``h``),
    so that the mass stuck at X shows up as last-cell mass.
    """
    if variant not in TCP_VARIANTS:
        raise ModelError(f"unknown TCP variant {variant!r}; expected one of {TCP_VARIANTS}")
    if not (np.isfinite(X) and X > 0):
        raise ModelError(f"X must be positive, got {X}")
    if not 0.0 <= p <= 1.0:
        raise ModelError(f"p must lie in [0, 1], got {p}")
    if not 0 < h < X:
        raise ModelError(f"h must lie in (0, X), got {h}")
    X = float(X)
    domain = DomainSpec(upper=X, truncation_lower=0.0)

    flow = FlowMap(lambda x, t: np.minimum(x + t, X))
    alpha = HittingTime(lambda x: X - x, domain)
    interior = MixtureKernel.dirac(lambda x: 0.5 * x)

    if variant == "TCP-FJ":
        atoms = (Atom(lambda z: np.full_like(z, 0.5 * X), lambda z: np.full_like(z, p)),)
        boundary = MixtureKernel(atoms=atoms, density_part=uniform_part(0.0, X, 1.0 - p))
    elif variant == "TCP-F":
        boundary = MixtureKernel.dirac(X - 0.5 * h)
    else:
        # never reached in practice once X is large; any probability works
        boundary = MixtureKernel.dirac(0.5 * X)

    return PdmpModel(
        domain=domain,
        flow=flow,
        alpha=alpha,
        rate=lambda x: np.maximum(x, 0.0),
        rate_bound=X,
        interior_kernel=interior,
        boundary_kernel=boundary,
        initial_law=MixtureKernel.dirac(0.0),
        name=variant,
        params={"X": X, "p": p, "h": h},
    )


@dataclass
class HypothesisReport:
    lipschitz_flow_estimate: float
    lipschitz_alpha_estimate: float
    tail_radii: np.ndarray
    tail_Q: np.ndarray
    tail_q: np.ndarray
    boundary_exponential: list[tuple[float, float]]
    exponential_bound_satisfied: bool
    a0: float | None
    B0: float | None
    semigroup_error: float
    cocycle_error: float
    rate_bound_ok: bool
    warnings: list[str] = field(default_factory=list)

    def boundary_value(self, B: float) -> float:
        for b, v in self.boundary_exponential:
            if b == B:
                return v
        raise KeyError(B)


def _tail(kernel: MixtureKernel, sources: np.ndarray, radii: np.ndarray, domain: DomainSpec) -> np.ndarray:
    lo, hi = domain.truncation_lower, domain.upper
    out = np.zeros(len(radii))
    for i, r in enumerate(radii):
        worst = 0.0
        for x in sources:
            edge = abs(x) + r
            mass = 0.0
            if edge < hi:
                mass += kernel_mass_on_interval(kernel, x, (max(edge, lo), hi))
            if -edge > lo:
                mass += kernel_mass_on_interval(kernel, x, (lo, -edge))
            worst = max(worst, mass)
        out[i] = worst
    return out


def audit_hypotheses(
    model: PdmpModel,
    samples: int = 1000,
    seed: int = 0,
    t_max: float | None = None,
    B_grid: Sequence[float] | None = None,
) -> HypothesisReport:
    """Sample-based check of the standing hypotheses on ``model``.

    The Lipschitz constants are empirical lower bounds (max difference
    quotients over random pairs); they are informative only.  The
    exponential boundary bound ``sup_z int exp(-B alpha(y)) q(z, dy) <= 1 - a0``
    is certified by scanning ``B`` on a geometric grid.  Deterministic given
    ``seed``.
    """
    if samples < 100:
        raise ModelError("audit_hypotheses needs samples >= 100")
    rng = np.random.default_rng(seed)
    dom = model.domain
    lo, hi = dom.truncation_lower, dom.upper
    t_max = dom.width if t_max is None else t_max
    warnings: list[str] = []

    x1, x2 = rng.uniform(lo, hi, samples), rng.uniform(lo, hi, samples)
    t1, t2 = rng.uniform(0, t_max, samples), rng.uniform(0, t_max, samples)
    dist = np.abs(x1 - x2) + np.abs(t1 - t2)
    lip_flow = float(np.max(np.abs(model.flow(x1, t1) - model.flow(x2, t2)) / dist))
    lip_alpha = float(np.max(np.abs(model.alpha(x1) - model.alpha(x2)) / np.abs(x1 - x2)))

    a1 = model.alpha(x1)
    finite = a1 < model.alpha.horizon
    t = rng.uniform(0, 1, samples) * np.where(finite, a1, t_max)
    s = rng.uniform(0, 1, samples) * (np.where(finite, a1, t_max) - t)
    semigroup = float(np.max(np.abs(model.flow(model.flow(x1, t), s) - model.flow(x1, t + s))))
    inner = finite & (t > 0) & (t < a1)
    cocycle = (
        float(np.max(np.abs(model.alpha(model.flow(x1[inner], t[inner])) - (a1[inner] - t[inner]))))
        if inner.any()
        else 0.0
    )

    xs = np.linspace(lo, hi, samples, endpoint=False)
    rates = model.rate_values(xs)
    rate_ok = bool(np.all(rates >= 0) and np.all(rates <= model.rate_bound * (1 + 1e-12)))
    if not rate_ok:
        warnings.append("rate exceeds rate_bound or is negative on sampled states")

    sources = rng.uniform(lo, hi, min(samples, 200))
    gamma = np.unique(model.boundary_image(xs[model.alpha(xs) < model.alpha.horizon]))
    if gamma.size > 200:
        gamma = rng.choice(gamma, 200, replace=False)

    for name, kernel, pts in (("Q", model.interior_kernel, sources), ("q", model.boundary_kernel, gamma)):
        for x in pts:
            inside = kernel_mass_on_interval(kernel, x, (lo, hi))
            if inside < 1.0 - 1e-10:
                warnings.append(f"kernel {name} puts mass {1.0 - inside:.3e} outside the truncated domain from x={x:.6g}")
                break

    radii = np.array([0.0, 0.25, 0.5, 1.0, 2.0, 4.0]) * dom.width
    radii[0] = 1e-9 * dom.width
    tail_Q = _tail(model.interior_kernel, sources, radii, dom)
    tail_q = _tail(model.boundary_kernel, gamma, radii, dom)

    if B_grid is None:
        B_grid = [2.0**k for k in range(-3, 9)]
    table = []
    for B in B_grid:
        fn = lambda y, B=B: np.exp(-B * model.alpha(y))
        vals = kernel_expectation(model.boundary_kernel, gamma, fn, panels=256) if gamma.size else np.zeros(1)
        table.append((float(B), float(np.max(vals))))

    a0 = B0 = None
    for B, v in table:
        if v <= 0.5:
            a0, B0 = 1.0 - v, B
            break
    if B0 is None:
        below = [(B, v) for B, v in table if v < 1.0]
        if below:
            B0, v = below[-1]
            a0 = 1.0 - v
    if B0 is None:
        warnings.append("exponential boundary bound not certified on the scanned B grid")

    return HypothesisReport(
        lipschitz_flow_estimate=lip_flow,
        lipschitz_alpha_estimate=lip_alpha,
        tail_radii=radii,
        tail_Q=tail_Q,
        tail_q=tail_q,
        boundary_exponential=table,
        exponential_bound_satisfied=B0 is not None,
        a0=a0,
        B0=B0,
        semigroup_error=semigroup,
        cocycle_error=cocycle,
        rate_bound_ok=rate_ok,
        warnings=warnings,
    )
