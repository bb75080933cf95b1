"""Admissible one-dimensional meshes made of half-open cells."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import DomainSpec

#: Returned by :meth:`Mesh1D.locate` for points outside ``[edges[0], edges[-1])``.
OUTSIDE = -1


class MeshError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Mesh1D:
    """Partition of ``[edges[0], edges[-1])`` into cells ``[edges[i], edges[i+1])``."""

    edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        if edges.ndim != 1 or edges.size < 1:
            raise MeshError("mesh needs at least one edge")
        if np.any(np.diff(edges) <= 0):
            raise MeshError("mesh edges must be strictly increasing")
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)

    @classmethod
    def from_edges(cls, edges) -> Mesh1D:
        return cls(np.asarray(edges, dtype=float))

    @property
    def n_cells(self) -> int:
        return self.edges.size - 1

    def __len__(self) -> int:
        return self.n_cells

    @property
    def volumes(self) -> np.ndarray:
        return np.diff(self.edges)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[1:] + self.edges[:-1])

    @property
    def h(self) -> float:
        return float(self.volumes.max()) if self.n_cells else 0.0

    @property
    def lower(self) -> float:
        return float(self.edges[0])

    @property
    def upper(self) -> float:
        return float(self.edges[-1])

    def locate(self, x):
        """Index of the cell containing ``x``, or ``OUTSIDE``; vectorised over arrays."""
        xs = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.edges, xs, side="right") - 1
        idx = np.where((xs >= self.edges[0]) & (xs < self.edges[-1]), idx, OUTSIDE)
        return int(idx) if idx.ndim == 0 else idx


def build_uniform(domain: DomainSpec, h: float) -> Mesh1D:
    """Cells of width ``h`` on ``[truncation_lower, upper)``.

    When ``h`` does not divide the width (to 1e-9) the last cell is shorter.
    """
    width = domain.width
    if not h > 0:
        raise MeshError(f"h must be positive, got {h}")
    if h >= width:
        raise MeshError(f"h={h} must be smaller than the domain width {width}")
    ratio = width / h
    n = round(ratio)
    if abs(ratio - n) * h > 1e-9:
        n = math.ceil(ratio)
    edges = domain.truncation_lower + h * np.arange(n + 1, dtype=float)
    edges[-1] = domain.upper
    return Mesh1D(edges)
