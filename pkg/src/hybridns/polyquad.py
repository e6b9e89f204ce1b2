"""Quadrature rules and orthonormal polynomial bases on triangles and edges.

Triangles are given by a ``(3, 2)`` vertex array, edges by a ``(2, 2)``
vertex array.  Bases are built from monomials centred at the domain
centroid and scaled by its diameter, then orthonormalized in L2 with
modified Gram-Schmidt, so the first ``dim(P^l)`` functions of a degree
``L`` basis span ``P^l`` for every ``l <= L``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


class DegenerateDomainError(ValueError):
    """Raised for triangles or edges with (numerically) zero measure."""


@dataclass(frozen=True)
class QuadRule:
    nodes: np.ndarray    # (nq, 2) physical coordinates
    weights: np.ndarray  # (nq,), sums to the domain measure
    exactness: int

    def integrate(self, values):
        """Integrate samples at the nodes; the leading axis indexes nodes."""
        return np.tensordot(self.weights, values, axes=(0, 0))


# Reference rules on the unit simplex in barycentric form, weights summing to 1.
_S6_A = 0.44594849091596488631832925388305
_S6_B = 0.091576213509770743459571463402202
_S6_WA = 0.22338158967801146569500700843312
_S6_WB = 0.10995174365532186763832632490021
_S7_A = (6.0 - math.sqrt(15.0)) / 21.0
_S7_B = (6.0 + math.sqrt(15.0)) / 21.0
_S7_WA = (155.0 - math.sqrt(15.0)) / 1200.0
_S7_WB = (155.0 + math.sqrt(15.0)) / 1200.0


def _orbit3(a):
    c = 1.0 - 2.0 * a
    return [(a, a, c), (a, c, a), (c, a, a)]


def _table_rule(exactness):
    if exactness <= 1:
        return np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0]), 1
    if exactness == 2:
        bary = _orbit3(1 / 6)
        return np.array(bary), np.full(3, 1 / 3), 2
    if exactness <= 4:
        bary = _orbit3(_S6_A) + _orbit3(_S6_B)
        w = [_S6_WA] * 3 + [_S6_WB] * 3
        return np.array(bary), np.array(w), 4
    if exactness == 5:
        bary = [(1 / 3, 1 / 3, 1 / 3)] + _orbit3(_S7_A) + _orbit3(_S7_B)
        w = [9 / 40] + [_S7_WA] * 3 + [_S7_WB] * 3
        return np.array(bary), np.array(w), 5
    return None


@lru_cache(maxsize=None)
def reference_triangle_rule(exactness: int):
    """Barycentric nodes and unit-sum weights exact to ``exactness``.

    Low orders come from tables (centroid, 3-, 6- and 7-point rules);
    higher orders use a collapsed Gauss-Jacobi x Gauss-Legendre product.
    """
    if exactness < 0:
        raise ValueError("exactness must be >= 0")
    table = _table_rule(exactness)
    if table is not None:
        return table
    m = (exactness + 2) // 2
    xj, wj = roots_jacobi(m, 1.0, 0.0)
    xl, wl = roots_legendre(m)
    s = 0.5 * (1.0 + xj)
    t = 0.5 * (1.0 + xl)
    S, Tt = np.meshgrid(s, t, indexing="ij")
    x = S.ravel()
    y = (Tt * (1.0 - S)).ravel()
    w = np.outer(wj / 4.0, wl / 2.0).ravel() * 2.0
    if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-13:
        raise ValueError(f"cannot build a triangle rule of exactness {exactness}")
    bary = np.column_stack([1.0 - x - y, x, y])
    return bary, w, 2 * m - 1


@lru_cache(maxsize=None)
def reference_edge_rule(exactness: int):
    """Gauss-Legendre nodes on [0, 1] with unit-sum weights."""
    if exactness < 0:
        raise ValueError("exactness must be >= 0")
    m = exactness // 2 + 1
    x, w = roots_legendre(m)
    return 0.5 * (1.0 + x), 0.5 * w, 2 * m - 1


def measure(vertices):
    v = np.asarray(vertices, dtype=float)
    if v.shape == (3, 2):
        e1, e2 = v[1] - v[0], v[2] - v[0]
        return 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
    if v.shape == (2, 2):
        return float(np.hypot(*(v[1] - v[0])))
    raise ValueError(f"unsupported domain with vertex array shape {v.shape}")


def make_quadrature(vertices, exactness: int) -> QuadRule:
    """Quadrature rule on a physical triangle or edge."""
    v = np.asarray(vertices, dtype=float)
    size = measure(v)
    if size <= 0.0:
        raise DegenerateDomainError("domain has zero measure")
    if v.shape == (3, 2):
        bary, w, exact = reference_triangle_rule(exactness)
        return QuadRule(bary @ v, w * size, exact)
    s, w, exact = reference_edge_rule(exactness)
    nodes = v[0] + np.outer(s, v[1] - v[0])
    return QuadRule(nodes, w * size, exact)


def monomial_exponents(degree: int, dim: int = 2) -> np.ndarray:
    """Exponents of all monomials of total degree <= ``degree``, graded."""
    if degree < 0:
        return np.zeros((0, dim), dtype=int)
    if dim == 1:
        return np.arange(degree + 1)[:, None]
    return np.array([(d - j, j) for d in range(degree + 1) for j in range(d + 1)])


def dim_poly(degree: int, dim: int = 2) -> int:
    if degree < 0:
        return 0
    if dim == 1:
        return degree + 1
    return (degree + 1) * (degree + 2) // 2


class PolyBasis:
    """Orthonormal basis of ``P^degree`` on a triangle or an edge.

    Each basis function is a combination of scaled monomials; ``coeffs`` has
    shape ``(dim, n_monomials)``.  On edges the monomials are in the
    arclength coordinate measured from the midpoint along ``tangent``, so a
    given edge gets the same basis regardless of which element asks for it.
    """

    def __init__(self, vertices, degree: int, quad: QuadRule | None = None):
        v = np.asarray(vertices, dtype=float)
        self.vertices = v
        self.degree = degree
        self.size = measure(v)
        if self.size <= 0.0:
            raise DegenerateDomainError("domain has zero measure")
        if degree < -1:
            raise ValueError("degree must be >= -1")
        self.is_edge = v.shape == (2, 2)
        self.center = v.mean(axis=0)
        if self.is_edge:
            self.tangent = (v[1] - v[0]) / self.size
            self.scale = self.size
            self.exponents = monomial_exponents(degree, 1)
        else:
            self.tangent = None
            self.scale = max(np.hypot(*(v[i] - v[j])) for i, j in ((0, 1), (1, 2), (0, 2)))
            self.exponents = monomial_exponents(degree, 2)
        n = len(self.exponents)
        if n == 0:
            self.coeffs = np.zeros((0, 0))
            return
        if quad is None or quad.exactness < 2 * degree:
            quad = make_quadrature(v, 2 * degree)
        mono = self.monomials(quad.nodes)
        gram = mono.T @ (quad.weights[:, None] * mono)
        self.coeffs = _mgs(gram)

    @property
    def dim(self) -> int:
        return len(self.exponents)

    def _local(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float)) - self.center
        if self.is_edge:
            return (p @ self.tangent)[:, None] / self.scale
        return p / self.scale

    def monomials(self, points):
        xi = self._local(points)
        return np.prod(xi[:, None, :] ** self.exponents[None, :, :], axis=2)

    def monomial_gradients(self, points):
        """Gradients w.r.t. physical coordinates, shape ``(np, nmono, 2)``."""
        if self.is_edge:
            raise ValueError("edge bases have no planar gradient")
        xi = self._local(points)
        e = self.exponents
        out = np.zeros((xi.shape[0], len(e), 2))
        for d in range(2):
            lowered = e.copy()
            lowered[:, d] = np.maximum(lowered[:, d] - 1, 0)
            vals = np.prod(xi[:, None, :] ** lowered[None, :, :], axis=2)
            out[:, :, d] = vals * e[None, :, d] / self.scale
        return out

    def eval(self, points):
        """Values at ``points``, shape ``(np, dim)``."""
        if self.dim == 0:
            return np.zeros((np.atleast_2d(points).shape[0], 0))
        return self.monomials(points) @ self.coeffs.T

    def grad(self, points):
        """Gradients at ``points``, shape ``(np, dim, 2)``."""
        if self.dim == 0:
            return np.zeros((np.atleast_2d(points).shape[0], 0, 2))
        return np.einsum("pmd,bm->pbd", self.monomial_gradients(points), self.coeffs)

    def gram(self, quad: QuadRule):
        vals = self.eval(quad.nodes)
        return vals.T @ (quad.weights[:, None] * vals)


def _mgs(gram):
    """Coefficients orthonormalizing monomials under the inner product ``gram``.

    Two passes of modified Gram-Schmidt; row ``i`` only involves monomials
    ``0..i``, which keeps the basis hierarchical.
    """
    n = gram.shape[0]
    c = np.eye(n)
    for _ in range(2):
        for i in range(n):
            for j in range(i):
                c[i] -= (c[i] @ gram @ c[j]) * c[j]
            c[i] /= math.sqrt(c[i] @ gram @ c[i])
    return c


def make_basis(vertices, degree: int, quad: QuadRule | None = None) -> PolyBasis:
    return PolyBasis(vertices, degree, quad)


def l2_project(f, basis: PolyBasis, quad: QuadRule):
    """Coefficients of the L2-orthogonal projection of ``f`` onto ``basis``.

    ``f`` maps an ``(np, 2)`` point array to ``(np,)`` or ``(np, ncomp)``
    values; vector fields are projected componentwise and the result has
    shape ``(dim, ncomp)``.
    """
    vals = np.asarray(f(quad.nodes), dtype=float)
    phi = basis.eval(quad.nodes)
    gram = phi.T @ (quad.weights[:, None] * phi)
    rhs = np.tensordot(phi * quad.weights[:, None], vals, axes=(0, 0))
    # the basis is orthonormal, but solving keeps the projector exact if
    # the caller passes a rule that differs from the orthonormalization one
    return np.linalg.solve(gram, rhs)
