import math

import numpy as np
import pytest

from conftest import discretization
from hybridns.mesh import build_structured_mesh
from hybridns.mms import ManufacturedSolution, interpolation_study
from hybridns.polyquad import make_basis, make_quadrature
from hybridns.solver import check_divergence_free
from hybridns.spaces import (HybridPressure, HybridSpaces, HybridVelocity, UnisolvenceError,
                             build_rtn_space, rtn_dim, rtn_interpolate)
from hybridns.verify import stream_function_fields

TRI = np.array([[0.1, 0.2], [0.8, 0.1], [0.3, 0.7]])


def test_rtn_dimensions():
    assert rtn_dim(1) == 3
    assert rtn_dim(2) == 8
    assert build_rtn_space(TRI, 1).dim == 3
    assert build_rtn_space(TRI, 3).dim == 15
    with pytest.raises(ValueError):
        build_rtn_space(TRI, 0)


def _fit_residual(values, points, degree, verts):
    """Least-squares residual of fitting ``values`` by ``P^degree``."""
    basis = make_basis(verts, degree)
    A = basis.eval(points)
    coef, *_ = np.linalg.lstsq(A, values, rcond=None)
    return np.abs(A @ coef - values).max()


@pytest.mark.parametrize("ell", [1, 2, 3])
def test_rtn_divergence_and_normal_trace_degrees(ell):
    space = build_rtn_space(TRI, ell)
    q = make_quadrature(TRI, 12)
    div = space.div(q.nodes)
    assert _fit_residual(div, q.nodes, ell - 1, TRI) < 1e-11
    for i in range(3):
        edge = TRI[[i, (i + 1) % 3]]
        fq = make_quadrature(edge, 12)
        vals = space.normal_trace(fq.nodes, i)
        assert _fit_residual(vals, fq.nodes, ell - 1, edge) < 1e-11


@pytest.mark.parametrize("ell", [1, 2, 3])
def test_rtn_interpolation_is_a_projector(ell, rng):
    space = build_rtn_space(TRI, ell)
    c = rng.standard_normal(space.dim)
    np.testing.assert_allclose(rtn_interpolate(lambda p: space.eval(p).transpose(0, 2, 1) @ c, space),
                               c, atol=1e-12)


@pytest.mark.parametrize("ell", [1, 2])
def test_rtn_reproduces_constants(ell):
    space = build_rtn_space(TRI, ell)
    dofs = rtn_interpolate(lambda p: np.tile([1.0, 0.0], (len(p), 1)), space)
    pts = make_quadrature(TRI, 4).nodes
    vals = np.einsum("pjc,j->pc", space.eval(pts), dofs)
    np.testing.assert_allclose(vals, np.tile([1.0, 0.0], (len(pts), 1)), atol=1e-13)


def test_rtn_commutes_for_solenoidal_field():
    space = build_rtn_space(TRI, 2)
    dofs = rtn_interpolate(lambda p: np.column_stack([p[:, 1] ** 2, -p[:, 0] ** 2]), space)
    pts = make_quadrature(TRI, 6).nodes
    assert np.abs(space.div(pts) @ dofs).max() < 1e-12


def test_rtn_dof_moments():
    # normal moments of the interpolant equal those of the field
    space = build_rtn_space(TRI, 2)

    def field(p):
        return np.column_stack([np.sin(p[:, 0]) + p[:, 1], np.cos(p[:, 1] * p[:, 0])])
    dofs = rtn_interpolate(field, space)
    interp = lambda p: np.einsum("pjc,j->pc", space.eval(p), dofs)  # noqa: E731
    np.testing.assert_allclose(space.dofs(interp), dofs, atol=1e-12)


def test_rtn_unisolvence_scale_invariant():
    conds = [build_rtn_space(s * TRI, 3).condition for s in (1.0, 1e-2, 1e-4)]
    assert max(conds) / min(conds) < 1.01


def test_degenerate_rtn_fails():
    with pytest.raises(Exception) as info:
        build_rtn_space(np.array([[0, 0], [1, 0], [2, 1e-17]]), 1)
    assert info.type.__name__ in ("DegenerateDomainError", UnisolvenceError.__name__, "MeshError")


def test_dofmap_layout():
    sp = HybridSpaces(build_structured_mesh(2), 1)
    dm = sp.dofmap
    assert dm.n_u == 8 * rtn_dim(2) + 16 * 4
    assert dm.n_p == 8 * 3 + 16 * 2
    assert dm.size == dm.n_u + dm.n_p + 1
    assert sum(dm.counts.values()) == dm.size
    assert dm.velocity_fixed.sum() == 8 * 4
    l2g = dm.velocity_local_to_global(sp.mesh.element_faces)
    assert l2g.shape == (8, rtn_dim(2) + 12)
    assert len(np.unique(l2g[:, :rtn_dim(2)])) == 8 * rtn_dim(2)


def test_hybrid_vector_roundtrip(rng):
    sp = HybridSpaces(build_structured_mesh(2), 2)
    dm = sp.dofmap
    u = rng.standard_normal(dm.n_u)
    p = rng.standard_normal(dm.n_p)
    np.testing.assert_array_equal(HybridVelocity.from_vector(u, dm).to_vector(), u)
    np.testing.assert_array_equal(HybridPressure.from_vector(p, dm).to_vector(), p)
    w = HybridVelocity.from_vector(u, dm)
    np.testing.assert_array_equal((w + w - w).to_vector(), u)
    assert not HybridVelocity.zeros(dm).to_vector().any()


def test_constant_velocity_interpolation(k):
    disc = discretization(k, 4)
    sp = disc.spaces
    c = np.array([0.7, -1.3])
    hv = sp.interpolate_velocity(lambda p: np.tile(c, (len(p), 1)))
    for f in range(disc.mesh.n_faces):
        psi = sp.face_bases[f].eval(sp.face_quads[f].nodes)
        vals = np.stack([psi @ hv.face[f, :k + 1], psi @ hv.face[f, k + 1:]], axis=-1)
        np.testing.assert_allclose(vals, np.tile(c, (len(vals), 1)), atol=1e-13)
    vals = np.einsum("eqjc,ej->eqc", disc.hi_rtn, hv.cell)
    np.testing.assert_allclose(vals, np.broadcast_to(c, vals.shape), atol=1e-13)


@pytest.mark.parametrize("k", [1, 2])
def test_linear_pressure_interpolation(k):
    disc = discretization(k, 4)
    sp = disc.spaces
    q = lambda p: p[:, 0] + p[:, 1]  # noqa: E731
    hp = sp.interpolate_pressure(q)
    npk = disc.n_pcell
    for t in range(disc.mesh.n_elements):
        nodes = sp.element_quads[t].nodes
        np.testing.assert_allclose(sp.element_bases[t].eval(nodes)[:, :npk] @ hp.cell[t], q(nodes),
                                   atol=1e-13)
    for f in range(disc.mesh.n_faces):
        nodes = sp.face_quads[f].nodes
        np.testing.assert_allclose(sp.face_bases[f].eval(nodes) @ hp.face[f], q(nodes), atol=1e-13)


def test_pressure_mean_weights(k):
    disc = discretization(k, 4)
    sp = disc.spaces
    one = sp.interpolate_pressure(lambda p: np.ones(len(p))).to_vector()
    assert sp.pressure_mean_weights() @ one == pytest.approx(1.0, abs=1e-13)
    q = sp.interpolate_pressure(lambda p: np.sin(3 * p[:, 0]) * p[:, 1]).to_vector()
    exact = (1 - math.cos(3)) / 3 * 0.5
    assert sp.pressure_mean_weights() @ q == pytest.approx(exact, abs=1e-12)


def test_exact_solution_interpolant_is_discretely_solenoidal(k, rng):
    # on a mesh fine enough for the moment quadrature to be at round-off
    disc = discretization(k, 8)
    u = disc.spaces.interpolate_velocity(ManufacturedSolution().initial_velocity).to_vector()
    norm = math.sqrt(disc.l2_norm_sq(u))
    for _ in range(20):
        q = rng.standard_normal(disc.dofmap.n_p)
        assert abs(u @ (disc.Bglobal @ q)) <= 1e-11 * norm * np.linalg.norm(q)


def test_polynomial_stream_function_lands_in_z(k):
    disc = discretization(k, 4)
    for field in stream_function_fields():
        rep = check_divergence_free(disc, disc.interpolate(field))
        assert rep.passed(1e-12), rep


@pytest.mark.parametrize("k", [0, 1, 2])
def test_interpolation_rates_for_trig_field(k):
    v = lambda p: np.column_stack([np.sin(p[:, 1]), np.cos(p[:, 0])])  # noqa: E731
    res = interpolation_study(k, [4, 8, 16], v=v)
    assert abs(res["element_l2_eoc"][-1] - (k + 1)) < 0.15
    assert abs(res["trace_eoc"][-1] - (k + 0.5)) < 0.15
