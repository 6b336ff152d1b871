"""Sobolev-space kernel machinery for the functional coefficient.

The coefficient function lives in the order-m Sobolev space on [0, 1] with
penalty equal to the squared L2 norm of the m-th derivative.  The penalty
null space is spanned by the scaled monomials xi_j(s) = s^(j-1)/(j-1)!, and
the penalized part of the kernel is

    K1(w, s) = int_0^1 G_m(w, u) G_m(s, u) du,
    G_m(s, u) = (s - u)_+^(m-1) / (m-1)!.

Fitted coefficient curves are finite combinations of the null-space basis
and kernel sections indexed by the observed covariate curves; this module
assembles the Gram matrices that make that representation computable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "FunctionalCurve",
    "GramMatrices",
    "KernelContext",
    "compute_gram",
    "eval_beta",
    "integrate_curve",
    "k1_eval",
    "null_basis_eval",
    "transformed_curves",
    "trapezoid_weights",
]


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    """Quadrature weights of the trapezoidal rule on an arbitrary grid."""
    grid = np.asarray(grid, dtype=float)
    w = np.zeros_like(grid)
    half = np.diff(grid) / 2.0
    w[:-1] += half
    w[1:] += half
    return w


@dataclass(frozen=True, eq=False)
class FunctionalCurve:
    """A functional covariate sampled on a shared grid spanning [0, 1].

    Attributes
    ----------
    grid : ndarray
        Strictly increasing sample locations with grid[0] == 0 and
        grid[-1] == 1.
    values : ndarray
        Curve values, one per grid point, all finite.
    """

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("curve grid needs at least two points")
        if values.shape != grid.shape:
            raise ValueError("curve values must match the grid length")
        if grid[0] != 0.0 or grid[-1] != 1.0:
            raise ValueError("curve grid must span [0, 1] exactly")
        if np.any(np.diff(grid) <= 0.0):
            raise ValueError("curve grid must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("curve values must be finite")


@dataclass(frozen=True, eq=False)
class KernelContext:
    """Sobolev order plus the quadrature rule used for domain integrals.

    The quadrature nodes/weights integrate functions of the transformed
    variable u over [0, 1]; weights must therefore sum to one.
    """

    m: int
    quad_nodes: np.ndarray
    quad_weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.quad_nodes, dtype=float)
        weights = np.asarray(self.quad_weights, dtype=float)
        object.__setattr__(self, "quad_nodes", nodes)
        object.__setattr__(self, "quad_weights", weights)
        if not (isinstance(self.m, (int, np.integer)) and self.m >= 1):
            raise ValueError("Sobolev order m must be a positive integer")
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise ValueError("quadrature nodes and weights must align")
        if np.any(nodes < 0.0) or np.any(nodes > 1.0):
            raise ValueError("quadrature nodes must lie in [0, 1]")
        if np.any(weights <= 0.0):
            raise ValueError("quadrature weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("quadrature weights must sum to one")

    @classmethod
    def for_grid(cls, m: int, grid: np.ndarray) -> "KernelContext":
        """Trapezoidal quadrature on the shared curve-ingestion grid."""
        grid = np.asarray(grid, dtype=float)
        return cls(m=int(m), quad_nodes=grid, quad_weights=trapezoid_weights(grid))


@dataclass(frozen=True, eq=False)
class GramMatrices:
    """Null-space and kernel Gram matrices for a set of covariate curves.

    B is m x n with B[j, i] = int xi_{j+1}(s) Z_i(s) ds; Q is the n x n
    matrix of kernel inner products int int Z_i(w) K1(w, s) Z_j(s) dw ds.
    Q is a Gram matrix of transformed curves, hence positive semidefinite.
    """

    B: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        Q = np.asarray(self.Q, dtype=float)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Q", Q)
        if B.ndim != 2 or Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValueError("B must be m x n and Q must be square")
        if B.shape[1] != Q.shape[0]:
            raise ValueError("B and Q disagree on the number of curves")
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(Q))):
            raise ValueError("Gram matrices must be finite")
        if np.max(np.abs(Q - Q.T), initial=0.0) > 1e-10:
            raise ValueError("Q must be symmetric")
        eigs = np.linalg.eigvalsh(Q)
        norm = max(np.max(np.abs(eigs), initial=0.0), 0.0)
        if eigs.size and eigs[0] < -1e-8 * norm:
            raise ValueError("Q must be positive semidefinite")


def null_basis_eval(m: int, j: int, s):
    """Evaluate the j-th null-space basis function s^(j-1)/(j-1)!.

    Parameters
    ----------
    m : int
        Sobolev order; the null space has dimension m.
    j : int
        Basis index, 1-based, 1 <= j <= m.
    s : float or ndarray
        Evaluation point(s) in [0, 1].
    """
    if not 1 <= j <= m:
        raise IndexError(f"basis index j={j} out of range 1..{m}")
    return np.asarray(s, dtype=float) ** (j - 1) / math.factorial(j - 1)


@lru_cache(maxsize=8)
def _gauss_legendre(order: int):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return nodes, weights


def k1_eval(ctx: KernelContext, w: float, s: float) -> float:
    """Penalized-part kernel K1(w, s) for the order-m Sobolev space.

    Uses the closed form for m = 2 (the default order); other orders fall
    back to 64-node Gauss-Legendre quadrature on [0, min(w, s)], where the
    integrand is smooth.
    """
    if not (0.0 <= w <= 1.0 and 0.0 <= s <= 1.0):
        raise ValueError("kernel arguments must lie in [0, 1]")
    a = min(w, s)
    if a == 0.0:
        return 0.0
    if ctx.m == 2:
        return w * s * a - (w + s) * a * a / 2.0 + a ** 3 / 3.0
    nodes, weights = _gauss_legendre(64)
    u = 0.5 * a * (nodes + 1.0)
    scale = 1.0 / math.factorial(ctx.m - 1) ** 2
    vals = (w - u) ** (ctx.m - 1) * (s - u) ** (ctx.m - 1)
    return 0.5 * a * scale * float(weights @ vals)


def integrate_curve(curve: FunctionalCurve, weight: np.ndarray | None = None) -> float:
    """Trapezoidal integral of the curve, optionally against a weight.

    The weight is a vector of function values on the same grid; the rule is
    exact for integrands that are piecewise linear between grid points.
    """
    values = curve.values
    if weight is not None:
        weight = np.asarray(weight, dtype=float)
        if weight.shape != curve.grid.shape:
            raise ValueError("weight values must live on the curve grid")
        values = values * weight
    return float(trapezoid_weights(curve.grid) @ values)


def _shared_grid(curves) -> np.ndarray:
    if not curves:
        raise ValueError("need at least one curve")
    grid = curves[0].grid
    for c in curves[1:]:
        if c.grid.shape != grid.shape or not np.array_equal(c.grid, grid):
            raise ValueError("all curves must share one grid")
    return grid


def _g_matrix(m: int, points: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """G_m(points[i], nodes[g]) = (points_i - node_g)_+^(m-1) / (m-1)!."""
    diff = np.clip(points[:, None] - nodes[None, :], 0.0, None)
    if m == 1:
        # (x)_+^0 is the indicator of x > 0
        return (diff > 0.0).astype(float)
    return diff ** (m - 1) / math.factorial(m - 1)


def transformed_curves(ctx: KernelContext, curves) -> np.ndarray:
    """Transformed covariates Zt_i(u) = int Z_i(w) G_m(w, u) dw.

    Returns an (n_curves, n_quad_nodes) array of values on the context's
    quadrature nodes; the w-integral uses the trapezoidal rule on the
    shared curve grid.
    """
    grid = _shared_grid(curves)
    values = np.stack([c.values for c in curves])
    tw = trapezoid_weights(grid)
    gmat = _g_matrix(ctx.m, grid, ctx.quad_nodes)
    return values @ (tw[:, None] * gmat)


def compute_gram(ctx: KernelContext, curves) -> GramMatrices:
    """Assemble the B (null-space) and Q (kernel) Gram matrices.

    B[j, i] integrates xi_{j+1} against curve i on the shared grid; Q is
    the quadrature inner product of the transformed curves, symmetrized to
    suppress rounding asymmetry.
    """
    grid = _shared_grid(curves)
    values = np.stack([c.values for c in curves])
    tw = trapezoid_weights(grid)
    basis = np.stack([null_basis_eval(ctx.m, j, grid) for j in range(1, ctx.m + 1)])
    B = (basis * tw) @ values.T
    ztil = transformed_curves(ctx, curves)
    Q = (ztil * ctx.quad_weights) @ ztil.T
    Q = (Q + Q.T) / 2.0
    return GramMatrices(B=B, Q=Q)


def eval_beta(
    ctx: KernelContext,
    d: np.ndarray,
    c: np.ndarray,
    curves,
    s_out: np.ndarray,
) -> np.ndarray:
    """Evaluate the represented coefficient curve on output points.

    beta(s) = sum_j d_j xi_j(s) + sum_i c_i int Z_i(w) K1(w, s) dw, with
    the kernel term computed through the transformed curves:
    int Z_i(w) K1(w, s) dw = int Zt_i(u) G_m(s, u) du.
    """
    d = np.asarray(d, dtype=float)
    c = np.asarray(c, dtype=float)
    s_out = np.asarray(s_out, dtype=float)
    if d.shape != (ctx.m,):
        raise ValueError(f"d must have length m={ctx.m}")
    if c.shape != (len(curves),):
        raise ValueError("c must have one coefficient per curve")
    out = np.zeros_like(s_out)
    for j in range(1, ctx.m + 1):
        out += d[j - 1] * null_basis_eval(ctx.m, j, s_out)
    if c.size and np.any(c != 0.0):
        ztil = transformed_curves(ctx, curves)
        combo = c @ ztil
        gout = _g_matrix(ctx.m, s_out, ctx.quad_nodes)
        out += gout @ (ctx.quad_weights * combo)
    return out
