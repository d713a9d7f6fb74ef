"""Quadrature grids and node-value function representations.

Functions on the domain are carried as values at fixed, strictly interior
Gauss-Legendre nodes; operator composition then becomes dense matrix
application and off-node reads use barycentric Lagrange interpolation
(spectrally accurate for smooth functions).  On the half line the nodes
are Gauss-Legendre on (0, cutoff); the cutoff truncation error of any
kernel integral is bounded by the Gaussian tail beyond the cutoff,
``exp(-(cutoff - x)^2 / (2 t)) / 2`` for an evaluation at x at time t.

``tensor_rank`` tracks how many spatial gradients have been applied to a
function.  In one dimension the values stay scalar; the counter exists so
that a future multi-dimensional model cannot silently mis-shape the
rank-n expansion kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domains import HalfLineDomain

__all__ = ["QuadratureGrid", "GridFunction"]

DEFAULT_NODES = 64
DEFAULT_HALFLINE_CUTOFF = 10.0


def _gauss_legendre(lo, hi, m):
    x, w = np.polynomial.legendre.leggauss(m)
    return lo + (x + 1.0) * (hi - lo) / 2.0, w * (hi - lo) / 2.0


def _barycentric_weights(nodes):
    # classic O(m^2) product formula, rescaled to avoid under/overflow
    m = len(nodes)
    scale = 4.0 / (nodes[-1] - nodes[0])
    w = np.empty(m)
    idx = np.arange(m)
    for i in range(m):
        w[i] = 1.0 / np.prod((nodes[i] - nodes[idx != i]) * scale)
    return w


@dataclass(frozen=True)
class QuadratureGrid:
    """Strictly interior nodes with positive weights on a 1D domain."""

    nodes: np.ndarray
    weights: np.ndarray
    lo: float
    hi: float
    bary: np.ndarray = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        nodes = np.asarray(self.nodes, float)
        weights = np.asarray(self.weights, float)
        if nodes.ndim != 1 or nodes.shape != weights.shape:
            raise ValueError("nodes and weights must be matching 1D arrays")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must be strictly increasing")
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        if nodes[0] <= self.lo or nodes[-1] >= self.hi:
            raise ValueError("nodes must be strictly interior")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "bary", _barycentric_weights(nodes))

    @classmethod
    def for_model(cls, model, node_count=DEFAULT_NODES, halfline_cutoff=DEFAULT_HALFLINE_CUTOFF,
                  halfline_origin=0.0):
        """Gauss-Legendre nodes on (a, b), or on (0, cutoff) past ``halfline_origin``
        for the half line (cutoff measured from the origin point, e.g. the start
        point of the simulated paths)."""
        if isinstance(model, HalfLineDomain):
            hi = float(halfline_origin) + float(halfline_cutoff)
            nodes, weights = _gauss_legendre(0.0, hi, node_count)
            return cls(nodes, weights, 0.0, hi)
        nodes, weights = _gauss_legendre(model.a, model.b, node_count)
        return cls(nodes, weights, model.a, model.b)

    @property
    def node_count(self):
        return len(self.nodes)

    def integrate(self, values):
        return float(self.weights @ np.asarray(values, float))

    def interpolation_matrix(self, points):
        """P with (P @ node_values)[q] ~= f(points[q]); exact at the nodes."""
        y = np.atleast_1d(np.asarray(points, float))
        diff = y[:, None] - self.nodes[None, :]
        hit = diff == 0.0
        safe = np.where(hit, 1.0, diff)
        c = self.bary[None, :] / safe
        P = c / c.sum(axis=1, keepdims=True)
        rows = hit.any(axis=1)
        if rows.any():
            P[rows] = 0.0
            P[rows, np.argmax(hit[rows], axis=1)] = 1.0
        return P

    def interpolate(self, values, points):
        out = self.interpolation_matrix(points) @ np.asarray(values, float)
        return float(out[0]) if np.isscalar(points) or np.ndim(points) == 0 else out

    def differentiation_matrix(self):
        """Spectral differentiation in node space (barycentric form)."""
        x, w = self.nodes, self.bary
        D = (w[None, :] / w[:, None]) / (x[:, None] - x[None, :] + np.eye(len(x)))
        np.fill_diagonal(D, 0.0)
        np.fill_diagonal(D, -D.sum(axis=1))
        return D


@dataclass(frozen=True)
class GridFunction:
    """Values of a function at the grid nodes, with gradient-rank bookkeeping."""

    grid: QuadratureGrid
    values: np.ndarray
    tensor_rank: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, float)
        if values.shape != (self.grid.node_count,):
            raise ValueError(
                f"value array of length {values.shape} does not match "
                f"{self.grid.node_count} nodes"
            )
        if self.tensor_rank < 0:
            raise ValueError("tensor_rank must be >= 0")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_callable(cls, grid, fn, tensor_rank=0):
        return cls(grid, np.asarray(fn(grid.nodes), float), tensor_rank)

    @classmethod
    def constant(cls, grid, value, tensor_rank=0):
        return cls(grid, np.full(grid.node_count, float(value)), tensor_rank)

    def __call__(self, points):
        return self.grid.interpolate(self.values, points)

    def with_values(self, values, rank_increment=0):
        return GridFunction(self.grid, values, self.tensor_rank + rank_increment)
