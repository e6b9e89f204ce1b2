import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from hybridns.mesh import build_structured_mesh
from hybridns.polyquad import (DegenerateDomainError, dim_poly, l2_project, make_basis,
                               make_quadrature, monomial_exponents)

REF = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
TRI = np.array([[0.2, 0.1], [0.9, 0.3], [0.4, 0.8]])
TRI_AREA = 0.5 * ((0.9 - 0.2) * (0.8 - 0.1) - (0.3 - 0.1) * (0.4 - 0.2))


def ref_monomial_integral(a, b):
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


def test_dimensions():
    for deg in range(5):
        assert make_basis(TRI, deg).dim == (deg + 1) * (deg + 2) // 2
        assert make_basis(TRI[:2], deg).dim == deg + 1
    assert make_basis(TRI, -1).dim == 0
    assert make_basis(TRI, -1).eval(TRI).shape == (3, 0)
    assert dim_poly(-1) == 0


def test_constant_basis_normalization():
    b = make_basis(TRI, 0)
    np.testing.assert_allclose(b.eval(TRI), 1 / math.sqrt(TRI_AREA), rtol=1e-14)


def test_edge_gram_identity():
    edge = np.array([[0.0, 0.0], [0.6, 0.8]])
    b = make_basis(edge, 1)
    q = make_quadrature(edge, 4)
    assert b.dim == 2
    np.testing.assert_allclose(b.gram(q), np.eye(2), atol=1e-14)


@pytest.mark.parametrize("deg", [0, 1, 2, 3, 4])
def test_triangle_gram_identity(deg):
    small = 1e-3 * TRI
    for verts in (TRI, small):
        b = make_basis(verts, deg)
        np.testing.assert_allclose(b.gram(make_quadrature(verts, 2 * deg)), np.eye(b.dim),
                                   atol=1e-12)


def test_cubic_integral_against_adaptive_quadrature():
    rng = np.random.default_rng(3)
    b = make_basis(TRI, 3)
    c = rng.standard_normal(b.dim)
    q = make_quadrature(TRI, 3)
    ours = q.integrate(b.eval(q.nodes) @ c)

    # split the triangle at the middle vertex abscissa and integrate in y
    order = np.argsort(TRI[:, 0])
    p0, p1, p2 = TRI[order]

    def line(pa, pb, x):
        return pa[1] + (pb[1] - pa[1]) * (x - pa[0]) / (pb[0] - pa[0])

    def f(y, x):
        return float(b.eval(np.array([[x, y]]))[0] @ c)

    total = 0.0
    for xa, xb, lo_pts, hi_pts in ((p0[0], p1[0], (p0, p1), (p0, p2)),
                                    (p1[0], p2[0], (p1, p2), (p0, p2))):
        lo = lambda x, s=lo_pts: line(*s, x)  # noqa: E731
        hi = lambda x, s=hi_pts: line(*s, x)  # noqa: E731
        val, _ = integrate.dblquad(f, xa, xb, lambda x: min(lo(x), hi(x)),
                                   lambda x: max(lo(x), hi(x)), epsabs=1e-13, epsrel=1e-13)
        total += val
    assert ours == pytest.approx(total, rel=1e-11, abs=1e-13)


def test_centroid_rule():
    q = make_quadrature(TRI, 1)
    assert len(q.weights) == 1
    np.testing.assert_allclose(q.nodes[0], TRI.mean(axis=0))
    assert q.weights[0] == pytest.approx(TRI_AREA)


def test_six_point_rule():
    q = make_quadrature(REF, 4)
    assert len(q.weights) == 6
    x, y = q.nodes.T
    assert q.integrate(x ** 2 * y ** 2) == pytest.approx(1 / 180, rel=1e-14)


@pytest.mark.parametrize("k", [0, 1, 2])
def test_edge_gauss_points(k):
    q = make_quadrature(REF[:2], 2 * k + 3)
    assert len(q.weights) == k + 2


@pytest.mark.parametrize("exactness", range(0, 15))
def test_reference_exactness(exactness):
    q = make_quadrature(REF, exactness)
    assert q.exactness >= exactness
    assert np.all(q.weights > 0)
    assert q.weights.sum() == pytest.approx(0.5, rel=1e-14)
    x, y = q.nodes.T
    for a, b in monomial_exponents(exactness):
        exact = ref_monomial_integral(a, b)
        assert q.integrate(x ** a * y ** b) == pytest.approx(exact, rel=1e-13)


@pytest.mark.parametrize("exactness", range(0, 12))
def test_edge_exactness(exactness):
    edge = np.array([[0.0, 0.0], [2.0, 0.0]])
    q = make_quadrature(edge, exactness)
    for p in range(exactness + 1):
        assert q.integrate(q.nodes[:, 0] ** p) == pytest.approx(2.0 ** (p + 1) / (p + 1), rel=1e-13)


def test_degenerate_domain():
    with pytest.raises(DegenerateDomainError):
        make_basis(np.array([[0, 0], [1, 1], [2, 2]]), 1)
    with pytest.raises(DegenerateDomainError):
        make_quadrature(np.array([[0, 0], [0, 0]]), 2)


def test_projection_reproduces_polynomials():
    rng = np.random.default_rng(0)
    b = make_basis(TRI, 2)
    q = make_quadrature(TRI, 6)
    c = rng.standard_normal(b.dim)
    np.testing.assert_allclose(l2_project(lambda p: b.eval(p) @ c, b, q), c, atol=1e-12)


def test_projection_of_constant():
    b = make_basis(TRI, 0)
    q = make_quadrature(TRI, 2)
    area = q.weights.sum()
    assert l2_project(lambda p: np.full(len(p), 2.5), b, q)[0] == pytest.approx(2.5 * math.sqrt(area))


def test_projection_matches_weighted_least_squares():
    b = make_basis(TRI, 2)
    q = make_quadrature(TRI, 28)
    assert len(q.weights) >= 200
    f = lambda p: np.sin(math.pi * p[:, 0])  # noqa: E731
    proj = l2_project(f, b, q)
    # independent path: raw monomials and a weighted least-squares solve
    x, y = q.nodes.T
    A = np.column_stack([x ** i * y ** j for i, j in monomial_exponents(2)])
    sw = np.sqrt(q.weights)
    coef, *_ = np.linalg.lstsq(A * sw[:, None], f(q.nodes) * sw, rcond=None)
    pts = np.array([[0.4, 0.3], [0.5, 0.5], [0.6, 0.4]])
    P = np.column_stack([pts[:, 0] ** i * pts[:, 1] ** j for i, j in monomial_exponents(2)])
    np.testing.assert_allclose(b.eval(pts) @ proj, P @ coef, atol=1e-10)


def test_projection_residual_orthogonal_and_componentwise():
    b = make_basis(TRI, 3)
    q = make_quadrature(TRI, 16)

    def f(p):
        return np.column_stack([np.exp(p[:, 0]) * np.cos(p[:, 1]), np.sin(p[:, 0] * p[:, 1])])
    proj = l2_project(f, b, q)
    resid = f(q.nodes) - b.eval(q.nodes) @ proj
    moments = b.eval(q.nodes).T @ (q.weights[:, None] * resid)
    assert np.abs(moments).max() < 1e-12 * np.abs(proj).max()
    np.testing.assert_allclose(proj[:, 1], l2_project(lambda p: f(p)[:, 1], b, q), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 3), st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 3))
def test_projection_idempotent(deg, a, c, w):
    b = make_basis(TRI, deg)
    q = make_quadrature(TRI, 2 * deg + 10)
    f = lambda p: np.cos(w * p[:, 0] + a) * np.exp(c * p[:, 1])  # noqa: E731
    once = l2_project(f, b, q)
    twice = l2_project(lambda p: b.eval(p) @ once, b, q)
    np.testing.assert_allclose(twice, once, atol=1e-12 * max(1.0, np.abs(once).max()))


@pytest.mark.parametrize("deg", [0, 1, 2])
def test_projection_convergence_rate(deg):
    def f(p):
        return np.sin(math.pi * p[:, 0]) * np.sin(math.pi * p[:, 1])
    errs, hs = [], []
    for n in (2, 4, 8, 16):
        m = build_structured_mesh(n)
        total = 0.0
        for t in range(m.n_elements):
            verts = m.element_vertices(t)
            b = make_basis(verts, deg)
            q = make_quadrature(verts, 2 * deg + 8)
            c = l2_project(f, b, q)
            total += q.integrate((f(q.nodes) - b.eval(q.nodes) @ c) ** 2)
        errs.append(math.sqrt(total))
        hs.append(m.h)
    slope = math.log(errs[-2] / errs[-1]) / math.log(hs[-2] / hs[-1])
    assert abs(slope - (deg + 1)) < 0.1
