"""Raviart-Thomas-Nedelec element space and the hybrid velocity/pressure spaces.

Element velocities live in ``RTN^{k+1}(T) = P^k(T)^2 + x P^k(T)`` and are
stored through their canonical degrees of freedom: moments against an
orthonormal basis of ``P^{k-1}(T)^2`` followed by normal moments
``int_F (v . n_TF) psi_j`` for each local face, with ``psi_j`` the
orthonormal ``P^k`` basis of the (globally oriented) face.  With this
choice the RTN interpolator of a field is just the list of its moments.

Face velocities are ``P^k(F)^2`` coefficients ordered ``[x-comp, y-comp]``;
element pressures use the first ``dim P^k`` functions of the element's
orthonormal ``P^{k+1}`` basis and face pressures the face basis.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .mesh import Mesh, from_arrays
from .polyquad import PolyBasis, QuadRule, dim_poly, make_quadrature, monomial_exponents


class UnisolvenceError(RuntimeError):
    """The RTN degree-of-freedom matrix is singular."""


def rtn_dim(ell: int) -> int:
    return ell * (ell + 2)


class RTNSpace:
    """``RTN^ell(T)`` with the DOF-dual basis.

    Parameters
    ----------
    vertices : (3, 2) array
        Triangle vertices, counterclockwise.
    ell : int
        RTN degree, ``ell >= 1``.
    face_bases : list of PolyBasis
        Orthonormal ``P^{ell-1}`` bases of the three local faces (local face
        ``i`` joins vertices ``i`` and ``i+1``).
    normals : (3, 2) array
        Outward unit normals of the local faces.
    element_basis : PolyBasis, optional
        Orthonormal element basis of degree ``>= ell - 2``; its leading
        functions are the interior moment tests.
    """

    def __init__(self, vertices, ell, face_bases, normals, element_basis=None,
                 quad: QuadRule | None = None, face_quads=None):
        if ell < 1:
            raise ValueError("RTN degree must be >= 1")
        self.vertices = np.asarray(vertices, dtype=float)
        self.ell = ell
        self.normals = np.asarray(normals, dtype=float)
        self.face_bases = face_bases
        if element_basis is None or element_basis.degree < ell - 2:
            element_basis = PolyBasis(self.vertices, ell)
        self.element_basis = element_basis
        # raw RTN functions are stored in the scaled monomials of degree ell
        if element_basis.degree == ell:
            self.mono = element_basis
        else:
            self.mono = PolyBasis(self.vertices, ell)
        self.n_interior = 2 * dim_poly(ell - 2)
        self.n_face = dim_poly(ell - 1, 1)
        self.dim = rtn_dim(ell)

        if quad is None or quad.exactness < 2 * ell:
            quad = make_quadrature(self.vertices, 2 * ell)
        if face_quads is None:
            face_quads = [make_quadrature(fb.vertices, 2 * ell) for fb in face_bases]
        self.quad = quad
        self.face_quads = face_quads

        raw = _raw_rtn(ell)
        vals = np.einsum("pm,jcm->pjc", self.mono.monomials(quad.nodes), raw)
        fvals = [np.einsum("pm,jcm->pjc", self.mono.monomials(fq.nodes), raw) for fq in face_quads]
        dofmat = self._dofs_from_values(vals, quad, fvals, face_quads)
        self.dof_matrix = dofmat
        # interior and face moments scale differently with h; equilibrating
        # the rows makes the condition number independent of the element size
        rows = np.linalg.norm(dofmat, axis=1)
        if np.any(rows == 0.0):
            raise UnisolvenceError("RTN DOF matrix has a zero row")
        scaled = dofmat / rows[:, None]
        self.condition = np.linalg.cond(scaled)
        if not np.isfinite(self.condition) or self.condition > 1e13:
            raise UnisolvenceError(f"RTN DOF matrix singular (cond={self.condition:.3e})")
        # basis_j = sum_i raw_i C[i, j] with dofs(basis_j) = e_j
        c = np.linalg.inv(scaled) / rows[None, :]
        self.coeffs = np.einsum("icm,ij->jcm", raw, c)

    def _dofs_from_values(self, vals, quad, face_vals, face_quads):
        """DOFs of fields sampled as ``(np, J, 2)`` arrays; returns ``(dim, J)``."""
        nint = self.n_interior // 2
        chi = self.element_basis.eval(quad.nodes)[:, :nint] * quad.weights[:, None]
        parts = [chi.T @ vals[:, :, 0], chi.T @ vals[:, :, 1]]
        for fb, fq, fv, n in zip(self.face_bases, face_quads, face_vals, self.normals):
            psi = fb.eval(fq.nodes) * fq.weights[:, None]
            parts.append(psi.T @ (fv @ n))
        return np.concatenate(parts)

    def eval(self, points):
        """Basis values, shape ``(np, dim, 2)``."""
        return np.einsum("pm,jcm->pjc", self.mono.monomials(points), self.coeffs)

    def grad(self, points):
        """Basis Jacobians ``d phi_c / d x_d``, shape ``(np, dim, 2, 2)``."""
        return np.einsum("pmd,jcm->pjcd", self.mono.monomial_gradients(points), self.coeffs)

    def div(self, points):
        g = self.grad(points)
        return g[..., 0, 0] + g[..., 1, 1]

    def normal_trace(self, points, face: int):
        return self.eval(points) @ self.normals[face]

    def dofs(self, field, quad: QuadRule | None = None, face_quads=None):
        """Canonical DOFs of a vector field ``field(points) -> (np, 2)``."""
        quad = quad or self.quad
        face_quads = face_quads or self.face_quads
        vals = np.asarray(field(quad.nodes), dtype=float)[:, None, :]
        fvals = [np.asarray(field(fq.nodes), dtype=float)[:, None, :] for fq in face_quads]
        return self._dofs_from_values(vals, quad, fvals, face_quads)[:, 0]


def _exps(degree):
    return monomial_exponents(degree, 2)


def _raw_rtn(ell):
    """Spanning set of ``RTN^ell`` in degree-``ell`` monomial coefficients."""
    exps = [tuple(e) for e in _exps(ell)]
    index = {e: i for i, e in enumerate(exps)}
    n = len(exps)
    raw = []
    for e in exps:
        if sum(e) <= ell - 1:
            for c in range(2):
                v = np.zeros((2, n))
                v[c, index[e]] = 1.0
                raw.append(v)
    for e in exps:
        if sum(e) == ell - 1:
            v = np.zeros((2, n))
            v[0, index[(e[0] + 1, e[1])]] = 1.0
            v[1, index[(e[0], e[1] + 1)]] = 1.0
            raw.append(v)
    raw = np.array(raw)
    assert len(raw) == rtn_dim(ell)
    return raw


def build_rtn_space(vertices, ell: int) -> RTNSpace:
    """Standalone ``RTN^ell`` space on a single triangle."""
    single = from_arrays(vertices, [[0, 1, 2]])
    faces = [PolyBasis(single.face_vertices(f), ell - 1) for f in single.element_faces[0]]
    return RTNSpace(single.element_vertices(0), ell, faces, single.normals[0])


def rtn_interpolate(field, space: RTNSpace, quad=None, face_quads=None):
    return space.dofs(field, quad, face_quads)


@dataclass
class DofMap:
    """Global layout: velocity cells, velocity faces, pressure cells,
    pressure faces, then one mean-value multiplier."""

    n_elements: int
    n_faces: int
    k: int
    boundary_faces: np.ndarray

    def __post_init__(self):
        k = self.k
        self.n_rtn = rtn_dim(k + 1)
        self.n_uface = 2 * (k + 1)
        self.n_pcell = dim_poly(k)
        self.n_pface = k + 1
        self.n_ucell_total = self.n_elements * self.n_rtn
        self.n_u = self.n_ucell_total + self.n_faces * self.n_uface
        self.n_pcell_total = self.n_elements * self.n_pcell
        self.n_p = self.n_pcell_total + self.n_faces * self.n_pface
        self.p_offset = self.n_u
        self.multiplier = self.n_u + self.n_p
        self.size = self.n_u + self.n_p + 1
        fixed = np.zeros(self.n_u, dtype=bool)
        bf = np.asarray(self.boundary_faces, dtype=np.int64)
        idx = self.n_ucell_total + bf[:, None] * self.n_uface + np.arange(self.n_uface)
        fixed[idx.ravel()] = True
        self.velocity_fixed = fixed
        self.velocity_free = np.flatnonzero(~fixed)

    @property
    def counts(self) -> dict:
        return {
            "velocity_cell": self.n_ucell_total,
            "velocity_face": self.n_u - self.n_ucell_total,
            "pressure_cell": self.n_pcell_total,
            "pressure_face": self.n_p - self.n_pcell_total,
            "multiplier": 1,
        }

    def velocity_local_to_global(self, element_faces) -> np.ndarray:
        """``(ne, n_rtn + 3 * n_uface)`` global velocity indices."""
        ne = self.n_elements
        cell = np.arange(ne)[:, None] * self.n_rtn + np.arange(self.n_rtn)
        face = (self.n_ucell_total + element_faces[:, :, None] * self.n_uface
                + np.arange(self.n_uface)).reshape(ne, -1)
        return np.hstack([cell, face])

    def pressure_local_to_global(self, element_faces) -> np.ndarray:
        """``(ne, n_pcell + 3 * n_pface)`` indices into the pressure block."""
        ne = self.n_elements
        cell = np.arange(ne)[:, None] * self.n_pcell + np.arange(self.n_pcell)
        face = (self.n_pcell_total + element_faces[:, :, None] * self.n_pface
                + np.arange(self.n_pface)).reshape(ne, -1)
        return np.hstack([cell, face])


@dataclass
class HybridVelocity:
    cell: np.ndarray  # (ne, n_rtn) RTN DOFs
    face: np.ndarray  # (nf, 2 (k+1)) face coefficients, [x..., y...]
    k: int

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.cell.ravel(), self.face.ravel()])

    @classmethod
    def from_vector(cls, vec, dofmap: DofMap):
        nc = dofmap.n_ucell_total
        return cls(vec[:nc].reshape(dofmap.n_elements, -1).copy(),
                   vec[nc:dofmap.n_u].reshape(dofmap.n_faces, -1).copy(), dofmap.k)

    @classmethod
    def zeros(cls, dofmap: DofMap):
        return cls.from_vector(np.zeros(dofmap.n_u), dofmap)

    def copy(self):
        return HybridVelocity(self.cell.copy(), self.face.copy(), self.k)

    def __sub__(self, other):
        return HybridVelocity(self.cell - other.cell, self.face - other.face, self.k)

    def __add__(self, other):
        return HybridVelocity(self.cell + other.cell, self.face + other.face, self.k)


@dataclass
class HybridPressure:
    cell: np.ndarray  # (ne, dim P^k)
    face: np.ndarray  # (nf, k + 1)
    k: int

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.cell.ravel(), self.face.ravel()])

    @classmethod
    def from_vector(cls, vec, dofmap: DofMap):
        nc = dofmap.n_pcell_total
        return cls(vec[:nc].reshape(dofmap.n_elements, -1).copy(),
                   vec[nc:dofmap.n_p].reshape(dofmap.n_faces, -1).copy(), dofmap.k)

    @classmethod
    def zeros(cls, dofmap: DofMap):
        return cls.from_vector(np.zeros(dofmap.n_p), dofmap)


def element_quad_exactness(k: int) -> int:
    return max(3 * (k + 1), 2 * (k + 2))


def face_quad_exactness(k: int) -> int:
    # the face part of the convective form has degree 3k + 2
    return max(2 * k + 3, 3 * k + 2)


def overintegration_exactness(k: int) -> int:
    return 2 * k + 8


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NS_THREADS", "1")))
    except ValueError:
        return 1


class HybridSpaces:
    """Element bases, face bases and RTN spaces for ``U_h^k x P_h^k``.

    Also holds batched quadrature tables used to interpolate arbitrary
    fields and to evaluate errors against analytic solutions.
    """

    def __init__(self, mesh: Mesh, k: int, overintegration: int | None = None):
        if k < 0:
            raise ValueError("k must be >= 0")
        self.mesh = mesh
        self.k = k
        self.dofmap = DofMap(mesh.n_elements, mesh.n_faces, k, mesh.boundary_faces)
        self.qe = element_quad_exactness(k)
        self.qf = face_quad_exactness(k)
        self.qhi = overintegration if overintegration is not None else overintegration_exactness(k)

        self.face_bases = [PolyBasis(mesh.face_vertices(f), k) for f in range(mesh.n_faces)]
        self.face_quads = [make_quadrature(mesh.face_vertices(f), self.qf) for f in range(mesh.n_faces)]
        nthreads = _threads()
        if nthreads > 1:
            with ThreadPoolExecutor(nthreads) as pool:
                built = list(pool.map(self._build_element, range(mesh.n_elements)))
        else:
            built = [self._build_element(t) for t in range(mesh.n_elements)]
        self.element_bases = [b[0] for b in built]
        self.element_quads = [b[1] for b in built]
        self.rtn = [b[2] for b in built]
        self._build_tables()

    def _build_element(self, t):
        mesh, k = self.mesh, self.k
        verts = mesh.element_vertices(t)
        quad = make_quadrature(verts, self.qe)
        basis = PolyBasis(verts, k + 1, quad)
        fids = mesh.element_faces[t]
        space = RTNSpace(verts, k + 1, [self.face_bases[f] for f in fids], mesh.normals[t],
                         element_basis=basis, quad=quad,
                         face_quads=[self.face_quads[f] for f in fids])
        return basis, quad, space

    def _build_tables(self):
        mesh = self.mesh
        ne, nf = mesh.n_elements, mesh.n_faces
        rule = [make_quadrature(mesh.element_vertices(t), self.qhi) for t in range(ne)]
        self.hi_points = np.array([r.nodes for r in rule])        # (ne, nq, 2)
        self.hi_weights = np.array([r.weights for r in rule])     # (ne, nq)
        self.hi_phi = np.array([b.eval(r.nodes) for b, r in zip(self.element_bases, rule)])
        self.hi_dphi = np.array([b.grad(r.nodes) for b, r in zip(self.element_bases, rule)])
        frule = [make_quadrature(mesh.face_vertices(f), self.qhi) for f in range(nf)]
        self.hi_face_points = np.array([r.nodes for r in frule])
        self.hi_face_weights = np.array([r.weights for r in frule])
        self.hi_face_psi = np.array([b.eval(r.nodes) for b, r in zip(self.face_bases, frule)])
        fv = mesh.vertices[mesh.faces]
        tang = (fv[:, 1] - fv[:, 0]) / mesh.face_lengths[:, None]
        self.face_normals = np.column_stack([tang[:, 1], -tang[:, 0]])

    # -- interpolation -------------------------------------------------

    def _cell_moments(self, values, n):
        """``int_T values * phi_a`` for the first ``n`` element functions."""
        return np.einsum("tq,tqa,tq...->ta...", self.hi_weights, self.hi_phi[:, :, :n], values)

    def _face_moments(self, values):
        return np.einsum("fq,fqj,fq...->fj...", self.hi_face_weights, self.hi_face_psi, values)

    def interpolate_velocity(self, v) -> HybridVelocity:
        """``I_{U,h}^k v``: RTN interpolation on cells, ``pi^k_F`` on faces."""
        mesh, k = self.mesh, self.k
        ne = mesh.n_elements
        cvals = np.asarray(v(self.hi_points.reshape(-1, 2))).reshape(ne, -1, 2)
        fvals = np.asarray(v(self.hi_face_points.reshape(-1, 2))).reshape(mesh.n_faces, -1, 2)
        nint = dim_poly(k - 1)
        interior = self._cell_moments(cvals, nint)  # (ne, nint, 2)
        interior = np.concatenate([interior[..., 0], interior[..., 1]], axis=1)
        normal_mom = self._face_moments(np.einsum("fqc,fc->fq", fvals, self.face_normals))
        signs = mesh.element_face_signs[:, :, None]
        cell_faces = (signs * normal_mom[mesh.element_faces]).reshape(ne, -1)
        cell = np.hstack([interior, cell_faces])
        face = self._face_moments(fvals)  # (nf, k+1, 2)
        face = np.concatenate([face[..., 0], face[..., 1]], axis=1)
        return HybridVelocity(cell, face, k)

    def interpolate_pressure(self, q) -> HybridPressure:
        """``I_{P,h}^k q``: ``pi^k_T`` on cells and ``pi^k_F`` on faces."""
        mesh, k = self.mesh, self.k
        cvals = np.asarray(q(self.hi_points.reshape(-1, 2))).reshape(mesh.n_elements, -1)
        fvals = np.asarray(q(self.hi_face_points.reshape(-1, 2))).reshape(mesh.n_faces, -1)
        return HybridPressure(self._cell_moments(cvals, dim_poly(k)), self._face_moments(fvals), k)

    def pressure_mean_weights(self) -> np.ndarray:
        """Row ``m`` with ``m . p = int_Omega p_h`` over the pressure block."""
        npc = dim_poly(self.k)
        w = np.zeros(self.dofmap.n_p)
        means = np.einsum("tq,tqa->ta", self.hi_weights, self.hi_phi[:, :, :npc])
        w[:self.dofmap.n_pcell_total] = means.ravel()
        return w


def interpolate_velocity(v, mesh: Mesh, k: int) -> HybridVelocity:
    return HybridSpaces(mesh, k).interpolate_velocity(v)


def interpolate_pressure(q, mesh: Mesh, k: int) -> HybridPressure:
    return HybridSpaces(mesh, k).interpolate_pressure(q)
