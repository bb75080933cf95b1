"""Finite-volume transfer coefficients assembled from a per-cell sample set.

Every cell carries one set of quadrature points.  Each point is either
transported by the flow over a window ``tau`` (contributing to ``v``) or exits
through the boundary before ``tau`` (contributing to ``q_K``), never both, so
``tau * (sum_L v_KL + q_K) = |K|`` holds up to summation roundoff.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import OUTSIDE, Mesh1D
from .model import MixtureKernel, PdmpModel, _as_array

log = logging.getLogger(__name__)

DROP_TOL = 1e-15
QUADRATURE_RULES = ("midpoint", "uniform")


@dataclass(frozen=True)
class QuadratureSpec:
    """Per-cell sample points.

    ``midpoint`` is the composite midpoint rule with ``points_per_cell``
    sub-intervals; ``uniform`` draws i.i.d. uniform points from ``seed``.
    Both use equal weights ``|K| / M``.
    """

    points_per_cell: int = 64
    rule: str = "midpoint"
    seed: int = 0

    def __post_init__(self):
        if self.points_per_cell < 1:
            raise ValueError("points_per_cell must be >= 1")
        if self.rule not in QUADRATURE_RULES:
            raise ValueError(f"unknown quadrature rule {self.rule!r}; expected one of {QUADRATURE_RULES}")

    def samples(self, mesh: Mesh1D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(points, weights, cell_index)`` flattened cell by cell."""
        M = self.points_per_cell
        vol = mesh.volumes
        if self.rule == "midpoint":
            frac = (np.arange(M) + 0.5) / M
            frac = np.broadcast_to(frac, (mesh.n_cells, M))
        else:
            frac = np.random.default_rng(self.seed).random((mesh.n_cells, M))
        points = mesh.edges[:-1, None] + vol[:, None] * frac
        weights = np.repeat(vol / M, M)
        cells = np.repeat(np.arange(mesh.n_cells), M)
        return points.ravel(), weights, cells


@dataclass(frozen=True, eq=False)
class BoundarySamples:
    """Sample points that reach the boundary within ``tau``."""

    cell: np.ndarray
    weight: np.ndarray  # w / tau
    image: np.ndarray  # phi(x, alpha(x))


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """Sparse coefficients of the scheme for one ``(mesh, tau)``.

    ``v``, ``q_vec`` and ``q_mat`` are per unit time.  ``lost_rate[K]`` is the
    per-unit-time rate at which mass in cell K leaves the truncated domain.
    """

    v: sp.csr_matrix
    lambda_mat: sp.csr_matrix
    lambda_vec: np.ndarray
    q_vec: np.ndarray
    q_mat: sp.csr_matrix
    tau: float
    volumes: np.ndarray
    lost_rate: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    cells: np.ndarray
    boundary: BoundarySamples

    @property
    def n_cells(self) -> int:
        return self.volumes.size

    @property
    def transfer(self) -> sp.csr_matrix:
        """``v + lambda_mat + q_mat``: entry (L, K) feeds cell K from cell L."""
        return (self.v + self.lambda_mat + self.q_mat).tocsr()


def kernel_cell_masses(kernel: MixtureKernel, sources: np.ndarray, mesh: Mesh1D) -> tuple[sp.csr_matrix, np.ndarray]:
    """Masses ``kernel(x, L)`` for every source ``x`` and cell ``L``.

    Returns a sparse ``(len(sources), n_cells)`` matrix and the mass that
    falls outside the mesh.
    """
    sources = np.asarray(sources, dtype=float)
    S, N = sources.size, mesh.n_cells
    rows, cols, vals = [], [], []
    outside = np.zeros(S)
    for atom in kernel.atoms:
        loc = _as_array(atom.location(sources), sources.shape)
        w = _as_array(atom.weight(sources), sources.shape)
        idx = mesh.locate(loc)
        hit = idx != OUTSIDE
        rows.append(np.nonzero(hit)[0])
        cols.append(idx[hit])
        vals.append(w[hit])
        outside += np.where(hit, 0.0, w)
    dense = None
    part = kernel.density_part
    if part is not None and N:
        if part.cdf is not None:
            c = part.cdf(sources[:, None], mesh.edges[None, :])
            dense = np.diff(np.broadcast_to(c, (S, N + 1)), axis=1)
        else:
            dense = np.array([[kernel.density_integral(x, a, b) for a, b in zip(mesh.edges[:-1], mesh.edges[1:])] for x in sources])
        dense = np.maximum(dense, 0.0)
        outside += _as_array(part.mass(sources), sources.shape) - dense.sum(axis=1)
    if rows:
        out = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(S, N)).tocsr()
    else:
        out = sp.csr_matrix((S, N))
    if dense is not None:
        out = (out + sp.csr_matrix(dense)).tocsr()
    return out, np.maximum(outside, 0.0)


def _drop_small(m: sp.spmatrix) -> sp.csr_matrix:
    m = sp.csr_matrix(m)
    m.sum_duplicates()
    m.data[np.abs(m.data) < DROP_TOL] = 0.0
    m.eliminate_zeros()
    return m


def compute_coefficients(
    model: PdmpModel, mesh: Mesh1D, tau: float, quad: QuadratureSpec | None = None
) -> CoefficientSet:
    """Assemble ``v_KL``, ``lambda_KL``, ``lambda_K``, ``q_K`` and ``q_KL``.

    Flow images leaving the truncated domain (or kernel mass landing outside
    it) are not redistributed; they are summed into ``lost_rate`` and logged.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    quad = quad or QuadratureSpec()
    N = mesh.n_cells
    x, w, cell = quad.samples(mesh)
    lost = np.zeros(N)

    alpha = model.alpha(x)
    exits = alpha <= tau
    moves = ~exits

    # transport by the flow
    target = mesh.locate(model.flow(x[moves], tau))
    src = cell[moves]
    wt = w[moves] / tau
    inside = target != OUTSIDE
    v = sp.coo_matrix((wt[inside], (src[inside], target[inside])), shape=(N, N))
    lost += np.bincount(src[~inside], weights=wt[~inside], minlength=N)

    # boundary exits
    bcell = cell[exits]
    bweight = w[exits] / tau
    images = model.boundary_image(x[exits])
    q_vec = np.bincount(bcell, weights=bweight, minlength=N)
    if images.size:
        uniq, inverse = np.unique(images, return_inverse=True)
        masses, out_q = kernel_cell_masses(model.boundary_kernel, uniq, mesh)
        select = sp.coo_matrix((bweight, (bcell, inverse)), shape=(N, uniq.size)).tocsr()
        q_mat = select @ masses
        lost += select @ out_q
    else:
        q_mat = sp.csr_matrix((N, N))

    # interior jumps
    rate = model.rate_values(x)
    lam_w = w * rate
    lambda_vec = np.bincount(cell, weights=lam_w, minlength=N)
    jumping = lam_w > 0
    masses, out_l = kernel_cell_masses(model.interior_kernel, x[jumping], mesh)
    select = sp.coo_matrix((lam_w[jumping], (cell[jumping], np.arange(jumping.sum()))), shape=(N, int(jumping.sum()))).tocsr()
    lambda_mat = select @ masses
    lost += select @ out_l

    if np.any(lost > 0):
        log.warning("mass leaves the truncated domain: total lost rate per unit density %.3e", float(lost.sum()))

    return CoefficientSet(
        v=_drop_small(v),
        lambda_mat=_drop_small(lambda_mat),
        lambda_vec=lambda_vec,
        q_vec=q_vec,
        q_mat=_drop_small(q_mat),
        tau=float(tau),
        volumes=mesh.volumes.copy(),
        lost_rate=lost,
        points=x,
        weights=w,
        cells=cell,
        boundary=BoundarySamples(cell=bcell, weight=bweight, image=images),
    )


def balance_violations(coeffs: CoefficientSet) -> np.ndarray:
    """Per-cell ``|tau (sum_L v_KL + q_K) - |K||``."""
    if coeffs.n_cells == 0:
        return np.zeros(0)
    row = np.asarray(coeffs.v.sum(axis=1)).ravel()
    return np.abs(coeffs.tau * (row + coeffs.q_vec) - coeffs.volumes)


def verify_balance(coeffs: CoefficientSet, mesh: Mesh1D | None = None) -> float:
    """Largest violation of the flux balance identity over all cells."""
    if mesh is not None and mesh.n_cells != coeffs.n_cells:
        raise ValueError("mesh does not match coefficient set")
    viol = balance_violations(coeffs)
    return float(viol.max()) if viol.size else 0.0


def export_triplets(coeffs: CoefficientSet, directory: str | Path) -> list[Path]:
    """Write ``v``, ``lambda_mat`` and ``q_mat`` as ``row,col,value`` text files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("v", "lambda_mat", "q_mat"):
        m = getattr(coeffs, name).tocoo()
        path = directory / f"{name}.txt"
        with path.open("w") as fh:
            fh.write("row,col,value\n")
            for r, c, val in zip(m.row, m.col, m.data):
                fh.write(f"{r},{c},{val:.17g}\n")
        written.append(path)
    return written
