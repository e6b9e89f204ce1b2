"""Global assembly, Newton iteration and Crank-Nicolson time stepping.

The algebraic unknown is ``x = (u_free, p, lam)``: velocity DOFs except
boundary faces, all pressure DOFs, and one multiplier enforcing the
zero-mean pressure.  The Jacobian has the block form::

    [ J_uu   B   0 ]
    [ -B^T   0   m ]
    [  0    m^T  0 ]

Two linear solvers are available.  ``direct`` factorizes this matrix as
is.  ``condensed`` (the default) eliminates the element unknowns (RTN
velocity and cell pressure) element by element and factorizes the face
system only; the multiplier is replaced by pinning one face pressure and
shifting the result to zero mean, which gives the same Newton update
because constant pressures lie in the kernel of ``B``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from . import kernels
from .local_ops import build_kits
from .mesh import Mesh
from .polyquad import dim_poly
from .spaces import HybridPressure, HybridSpaces, HybridVelocity

log = logging.getLogger(__name__)

TIME_SCHEMES = ("trapezoidal", "midpoint")
BETA_UPDATES = ("iterate", "newton", "step")
LINEAR_SOLVERS = ("condensed", "direct")


class NewtonError(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = list(history)


class StepFailure(RuntimeError):
    """A time step failed; ``trajectory`` holds everything accepted so far."""

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


def automatic_steps(h: float, k: int) -> int:
    """``max(10, ceil(h^{-(k+1)/2}))``."""
    # the small shift keeps exact powers (h = 1/4, k = 1) from rounding up
    return max(10, math.ceil(h ** (-(k + 1) / 2) - 1e-9))


@dataclass(frozen=True)
class SchemeConfig:
    """Discretization and solver parameters.

    ``startup_steps`` Crank-Nicolson steps at the start are each replaced
    by two backward Euler half steps, which damps the stiff transient
    excited by the interpolated initial condition.  ``time_scheme`` picks
    between trapezoidal averaging of all velocity terms and evaluation at
    the midpoint.  ``beta_update`` selects whether ``beta_T`` follows the
    Newton iterate (``iterate``) or stays at its value from the previous
    step (``step``); ``newton`` follows the iterate and also
    differentiates ``beta_T`` in the Jacobian.
    """

    k: int = 1
    nu: float = 1.0
    t_final: float = 1.0
    cs: float = 1e-4
    stabilization: str = "hho"
    n_steps: int | None = None
    newton_tol: float = 1e-8
    newton_abs_floor: float = 1e-14
    newton_max_iter: int = 25
    convection: bool = True
    time_scheme: str = "trapezoidal"
    beta_update: str = "newton"
    startup_steps: int = 2
    linear_solver: str = "condensed"

    def __post_init__(self):
        if not 0 <= self.k <= 2:
            raise ValueError("k must be 0, 1 or 2")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")
        if self.cs <= 0:
            raise ValueError("cs must be positive")
        if self.t_final <= 0:
            raise ValueError("t_final must be positive")
        if self.newton_tol <= 0:
            raise ValueError("newton_tol must be positive")
        if self.time_scheme not in TIME_SCHEMES:
            raise ValueError(f"time_scheme must be one of {TIME_SCHEMES}")
        if self.beta_update not in BETA_UPDATES:
            raise ValueError(f"beta_update must be one of {BETA_UPDATES}")
        if self.linear_solver not in LINEAR_SOLVERS:
            raise ValueError(f"linear_solver must be one of {LINEAR_SOLVERS}")
        if self.n_steps is not None and self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        if self.startup_steps < 0:
            raise ValueError("startup_steps must be nonnegative")

    def steps_for(self, h: float) -> int:
        return self.n_steps if self.n_steps is not None else automatic_steps(h, self.k)


class _Pattern:
    """Fixed CSR sparsity with a map from COO entries to CSR slots."""

    def __init__(self, rows, cols, shape):
        key = rows.astype(np.int64) * shape[1] + cols
        uniq, self.slot = np.unique(key, return_inverse=True)
        self.nnz = len(uniq)
        self.shape = shape
        self.indices = (uniq % shape[1]).astype(np.int32)
        counts = np.bincount(uniq // shape[1], minlength=shape[0])
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int32)

    def matrix(self, entries, base=None):
        data = np.bincount(self.slot, entries, minlength=self.nnz)
        if base is not None:
            data += base
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)


@dataclass
class LinearSystem:
    """Assembled Newton system ``matrix @ dx = rhs`` in the ``x`` layout."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    dofmap: object


class Discretization:
    """Mesh, spaces, stacked local operators and the constant global structure.

    Independent of the viscosity and time step, so one instance serves a
    whole parameter sweep on a mesh.
    """

    def __init__(self, mesh: Mesh, k: int, stabilization: str = "hho"):
        self.mesh = mesh
        self.k = k
        self.stabilization = stabilization
        self.spaces = HybridSpaces(mesh, k)
        self.kits = build_kits(self.spaces, stabilization)
        self.dofmap = dm = self.spaces.dofmap
        kits = self.kits
        E = mesh.n_elements
        self.n_rtn = R = kits[0].n_rtn
        self.n_uloc = U = kits[0].n_u
        self.n_ploc = kits[0].n_p
        self.n_pcell = dim_poly(k)

        def stack(name):
            return np.ascontiguousarray(np.array([getattr(kt, name) for kt in kits]))

        self.A = stack("A")
        self.l2 = stack("l2")
        self.jump = stack("jump")
        self.h1 = stack("h1")
        self.B = stack("B")
        self.Rmat = stack("R")
        self.div = stack("div")
        self.samples = stack("samples")
        self.phi = phi = stack("phi")
        self.dphi = stack("dphi")
        qw = stack("qw")
        Q = phi.shape[1]
        self.wphi = np.ascontiguousarray(
            (phi * qw[:, :, None, None]).transpose(0, 2, 1, 3).reshape(E, R, 2 * Q))
        fn = stack("fn")
        self.ftn = np.ascontiguousarray(
            np.einsum("efqjc,efc->efqj", stack("ftrace"), fn).reshape(E, -1, R))
        self.fwh = np.ascontiguousarray(0.5 * stack("fw").reshape(E, -1))
        self.sflat = np.ascontiguousarray(stack("fsum").transpose(0, 3, 1, 2, 4).reshape(E, U, -1))
        self.dflat = np.ascontiguousarray(stack("fjump").transpose(0, 1, 2, 4, 3).reshape(E, -1, U))
        self.hi_rtn = np.array([r.eval(pts) for r, pts in zip(self.spaces.rtn, self.spaces.hi_points)])

        self.l2g_u = dm.velocity_local_to_global(mesh.element_faces)
        self.l2g_p = dm.pressure_local_to_global(mesh.element_faces)
        self.mean_weights = self.spaces.pressure_mean_weights()
        self.pressure_constant = self.spaces.interpolate_pressure(
            lambda pts: np.ones(len(pts))).to_vector()

        self.free = dm.velocity_free
        self.n_free = len(self.free)
        reduced = np.full(dm.n_u, -1, dtype=np.int64)
        reduced[self.free] = np.arange(self.n_free)
        self.reduced = reduced
        self.size = self.n_free + dm.n_p + 1
        self.Bglobal = sp.csr_matrix(
            (self.B.ravel(), (np.repeat(self.l2g_u[:, :R], self.n_ploc, axis=1).ravel(),
                              np.tile(self.l2g_p, (1, R)).ravel())),
            shape=(dm.n_u, dm.n_p))
        self._direct = None
        self._condensed = None
        self._face_dof_map()

    # -- sparsity structures (built lazily) ------------------------------

    @property
    def direct_structure(self):
        if self._direct is None:
            self._direct = _DirectStructure(self)
        return self._direct

    @property
    def condensed_structure(self):
        if self._condensed is None:
            self._condensed = _CondensedStructure(self)
        return self._condensed

    def _face_dof_map(self):
        """Element-local face slot of each face in its neighbours."""
        mesh = self.mesh
        slots = np.full((mesh.n_faces, 2), -1, dtype=np.int64)
        for side in range(2):
            elems = mesh.face_elements[:, side]
            ok = elems >= 0
            slots[ok, side] = np.argmax(
                mesh.element_faces[elems[ok]] == np.flatnonzero(ok)[:, None], axis=1)
        self.face_slots = slots
        self.normal_dof_offset = 2 * dim_poly(self.k - 1)

    # -- conversions -----------------------------------------------------

    def local_velocity(self, u_full):
        return u_full[self.l2g_u]

    def scatter_velocity(self, local):
        return np.bincount(self.l2g_u.ravel(), local.ravel(), minlength=self.dofmap.n_u)

    def forcing_vector(self, f: Callable, t: float):
        """``int f . v_T`` for every element RTN basis function."""
        pts = self.spaces.hi_points
        vals = np.asarray(f(t, pts.reshape(-1, 2))).reshape(pts.shape)
        cell = np.einsum("eq,eqic,eqc->ei", self.spaces.hi_weights, self.hi_rtn, vals)
        out = np.zeros(self.dofmap.n_u)
        out[:self.dofmap.n_ucell_total] = cell.ravel()
        return out

    def betas(self, u_full, cs):
        """``(beta_T, sampled ||u_T||_inf)`` for every element."""
        cells = np.ascontiguousarray(self.local_velocity(u_full)[:, :self.n_rtn])
        speed = kernels.linf_norms(self.samples, cells)
        return np.maximum(cs, speed), speed

    def beta_derivative(self, u_full, cs):
        """Gradient of ``beta_T`` with respect to the RTN coefficients of
        ``u_T`` (zero where the safeguard is active)."""
        cells = self.local_velocity(u_full)[:, :self.n_rtn]
        vals = np.einsum("esjc,ej->esc", self.samples, cells)
        mag = np.sqrt((vals ** 2).sum(axis=2))
        at = mag.argmax(axis=1)
        idx = np.arange(len(at))
        speed = mag[idx, at]
        active = speed > cs
        dirn = vals[idx, at] / np.where(active, speed, 1.0)[:, None]
        grad = np.einsum("ejc,ec->ej", self.samples[idx, at], dirn)
        return grad * active[:, None]

    def interpolate(self, v) -> np.ndarray:
        """Global velocity vector of ``I_U v`` with boundary faces zeroed."""
        vec = self.spaces.interpolate_velocity(v).to_vector()
        vec[self.dofmap.velocity_fixed] = 0.0
        return vec

    def l2_norm_sq(self, u_full):
        ul = self.local_velocity(u_full)
        return float(np.sum(ul * np.matmul(self.l2, ul[:, :, None])[:, :, 0]))

    def split(self, x):
        """``(u_full, p, lam)`` from an algebraic vector."""
        u = np.zeros(self.dofmap.n_u)
        u[self.free] = x[:self.n_free]
        return u, x[self.n_free:self.n_free + self.dofmap.n_p], x[-1]

    def join(self, u_full, p, lam=0.0):
        return np.concatenate([u_full[self.free], p, [lam]])

    # -- forms -----------------------------------------------------------

    def local_operator(self, u_loc, nu, beta, convection=True, jacobian=False):
        """``nu a_T + t_T(u, u, .) + j_beta,T`` applied to ``u`` per element,
        plus its Jacobian (``beta`` held fixed) if requested.  Without
        convection both ``t_T`` and ``j_beta,T`` are dropped."""
        if not convection:
            op = nu * self.A
            val = np.matmul(op, u_loc[:, :, None])[:, :, 0]
            return val, (op if jacobian else None)
        w = np.ascontiguousarray(u_loc[:, :self.n_rtn])
        N, N2 = kernels.convection(self.wphi, self.phi, self.dphi, self.ftn, self.fwh,
                                   self.sflat, self.dflat, w, np.ascontiguousarray(u_loc))
        op = N
        op += nu * self.A
        op += beta[:, None, None] * self.jump
        val = np.matmul(op, u_loc[:, :, None])[:, :, 0]
        if not jacobian:
            return val, None
        op[:, :, :self.n_rtn] += N2
        return val, op

    def convective_form(self, w_full, v_full, z_full) -> float:
        """Global ``t_h(w, v, z)``."""
        w = np.ascontiguousarray(self.local_velocity(w_full)[:, :self.n_rtn])
        v = np.ascontiguousarray(self.local_velocity(v_full))
        N, _ = kernels.convection(self.wphi, self.phi, self.dphi, self.ftn, self.fwh,
                                  self.sflat, self.dflat, w, v)
        return float(np.einsum("ei,eij,ej->", self.local_velocity(z_full), N, v))


class _DirectStructure:
    """Sparsity of the full saddle-point Jacobian."""

    def __init__(self, disc: Discretization):
        R, U, P = disc.n_rtn, disc.n_uloc, disc.n_ploc
        ru = disc.reduced[disc.l2g_u]
        rows = np.repeat(ru[:, :, None], U, axis=2)
        cols = np.repeat(ru[:, None, :], U, axis=1)
        self.keep = ((rows >= 0) & (cols >= 0)).ravel()
        uu_r, uu_c = rows.ravel()[self.keep], cols.ravel()[self.keep]
        po = disc.n_free
        brow = np.repeat(ru[:, :R, None], P, axis=2).ravel()
        bcol = po + np.repeat(disc.l2g_p[:, None, :], R, axis=1).ravel()
        bval = disc.B.ravel()
        lam = disc.size - 1
        mcol = np.flatnonzero(disc.mean_weights)
        mval = disc.mean_weights[mcol]
        const_r = np.concatenate([brow, bcol, po + mcol, np.full(len(mcol), lam)])
        const_c = np.concatenate([bcol, brow, np.full(len(mcol), lam), po + mcol])
        const_v = np.concatenate([bval, -bval, mval, mval])
        self.n_uu = len(uu_r)
        self.pattern = _Pattern(np.concatenate([uu_r, const_r]),
                                np.concatenate([uu_c, const_c]), (disc.size, disc.size))
        self.const = np.bincount(self.pattern.slot[self.n_uu:], const_v,
                                 minlength=self.pattern.nnz)
        self.uu_slot = self.pattern.slot[:self.n_uu]

    def matrix(self, jac_local):
        data = self.const + np.bincount(self.uu_slot, jac_local.ravel()[self.keep],
                                        minlength=self.pattern.nnz)
        p = self.pattern
        return sp.csr_matrix((data, p.indices.copy(), p.indptr.copy()), shape=p.shape)


class _CondensedStructure:
    """Index bookkeeping for element-wise elimination of cell unknowns.

    Local element vector: ``[velocity (U), pressure (P)]``.  Interior
    entries are the RTN block and the cell pressure; the rest are face
    unknowns (the skeleton).
    """

    def __init__(self, disc: Discretization):
        dm = disc.dofmap
        R, npc = disc.n_rtn, disc.n_pcell
        # skeleton numbering: free face velocities, then face pressures minus one
        face_u = np.arange(dm.n_ucell_total, dm.n_u)
        face_u = face_u[~dm.velocity_fixed[face_u]]
        self.pin = dm.n_pcell_total   # first coefficient of the first face
        face_p = np.arange(dm.n_pcell_total + 1, dm.n_p)
        umap = np.full(dm.n_u, -1, dtype=np.int64)
        umap[face_u] = np.arange(len(face_u))
        pmap = np.full(dm.n_p, -1, dtype=np.int64)
        pmap[face_p] = len(face_u) + np.arange(len(face_p))
        self.face_u, self.face_p = face_u, face_p
        self.n = len(face_u) + len(face_p)
        self.l2g = np.hstack([umap[disc.l2g_u[:, R:]], pmap[disc.l2g_p[:, npc:]]])
        self.cell_u = disc.l2g_u[:, :R]
        self.cell_p = disc.l2g_p[:, :npc]
        S = self.l2g.shape[1]
        rows = np.repeat(self.l2g[:, :, None], S, axis=2)
        cols = np.repeat(self.l2g[:, None, :], S, axis=1)
        self.keep = ((rows >= 0) & (cols >= 0)).ravel()
        self.pattern = _Pattern(rows.ravel()[self.keep], cols.ravel()[self.keep], (self.n, self.n))
        self.valid = self.l2g >= 0
        self.l2g_safe = np.where(self.valid, self.l2g, 0)

    def solve(self, disc: Discretization, jac_local, r_u, r_p):
        """Newton correction ``(du, dp)`` for the residual ``(r_u, r_p)``."""
        E = disc.mesh.n_elements
        R, U, P = disc.n_rtn, disc.n_uloc, disc.n_ploc
        npc = disc.n_pcell
        B = disc.B
        # blocks of the element matrix [[J, B], [-B^T, 0]] split into
        # interior (RTN, cell pressure) and skeleton (faces) unknowns
        I, S = R + npc, (U - R) + (P - npc)
        K_II = np.zeros((E, I, I))
        K_II[:, :R, :R] = jac_local[:, :R, :R]
        K_II[:, :R, R:] = B[:, :, :npc]
        K_II[:, R:, :R] = -B[:, :, :npc].transpose(0, 2, 1)
        K_IS = np.zeros((E, I, S))
        K_IS[:, :R, :U - R] = jac_local[:, :R, R:]
        K_IS[:, :R, U - R:] = B[:, :, npc:]
        K_SI = np.zeros((E, S, I))
        K_SI[:, :U - R, :R] = jac_local[:, R:, :R]
        K_SI[:, U - R:, :R] = -B[:, :, npc:].transpose(0, 2, 1)
        K_SS = np.zeros((E, S, S))
        K_SS[:, :U - R, :U - R] = jac_local[:, R:, R:]
        r_I = np.hstack([r_u[self.cell_u], r_p[self.cell_p]])
        X = np.linalg.solve(K_II, np.concatenate([K_IS, r_I[:, :, None]], axis=2))
        schur = K_SS - K_SI @ X[:, :, :-1]
        g = np.matmul(K_SI, X[:, :, -1:])[:, :, 0]
        rhs = np.concatenate([r_u[self.face_u], r_p[self.face_p]])
        rhs -= np.bincount(self.l2g_safe.ravel(), (g * self.valid).ravel(), minlength=self.n)
        mat = self.pattern.matrix(schur.ravel()[self.keep]).tocsc()
        d_skel = _factor_solve(mat, rhs)
        d_loc = np.where(self.valid, d_skel[self.l2g_safe], 0.0)
        d_int = X[:, :, -1] - np.matmul(X[:, :, :-1], d_loc[:, :, None])[:, :, 0]

        du = np.zeros(disc.dofmap.n_u)
        dp = np.zeros(disc.dofmap.n_p)
        du[self.face_u] = d_skel[:len(self.face_u)]
        dp[self.face_p] = d_skel[len(self.face_u):]
        du[self.cell_u.ravel()] = d_int[:, :R].ravel()
        dp[self.cell_p.ravel()] = d_int[:, R:].ravel()
        return du, dp


def _factor_solve(mat, rhs):
    """Sparse LU with a symmetric fill-reducing ordering and diagonal
    pivots; falls back to partial pivoting if the solve is inaccurate."""
    lu = splu(mat, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
              options={"SymmetricMode": True})
    x = lu.solve(rhs)
    scale = np.linalg.norm(rhs)
    if scale > 0 and not np.linalg.norm(mat @ x - rhs) <= 1e-10 * scale:
        log.debug("diagonal pivoting inaccurate, refactorizing with partial pivoting")
        x = splu(mat, permc_spec="COLAMD").solve(rhs)
    return x


@dataclass
class DivergenceReport:
    max_divergence: float
    max_normal_jump: float
    max_boundary_normal: float
    norm: float

    def passed(self, tol: float = 1e-10) -> bool:
        return max(self.max_divergence, self.max_normal_jump, self.max_boundary_normal) <= tol

    @property
    def worst(self) -> float:
        return max(self.max_divergence, self.max_normal_jump, self.max_boundary_normal)


def check_divergence_free(disc: Discretization, u) -> DivergenceReport:
    """Relative measures of ``div u_T``, normal-trace jumps and boundary flux.

    Element divergences are measured as ``h_T ||div u_T||_{L2(T)}`` and face
    quantities as ``h_F^{1/2} ||.||_{L2(F)}``, all divided by ``||u||_{0,h}``.
    A zero field gives zeros.
    """
    u_full = u.to_vector() if isinstance(u, HybridVelocity) else np.asarray(u, dtype=float)
    mesh, k = disc.mesh, disc.k
    cells = disc.local_velocity(u_full)[:, :disc.n_rtn]
    norm = math.sqrt(max(disc.l2_norm_sq(u_full), 0.0))
    div = np.einsum("eaj,ej->ea", disc.div, cells)
    div_norm = mesh.diameters * np.sqrt((div ** 2).sum(axis=1))

    nf1 = k + 1
    off = disc.normal_dof_offset
    slots = disc.face_slots
    first = mesh.face_elements[:, 0]
    flux = cells[first[:, None], off + slots[:, 0:1] * nf1 + np.arange(nf1)]
    interior = ~mesh.is_boundary_face
    second = mesh.face_elements[interior, 1]
    jump = flux[interior] + cells[second[:, None], off + slots[interior, 1:2] * nf1 + np.arange(nf1)]
    hf = np.sqrt(mesh.face_lengths)
    jump_norm = hf[interior] * np.sqrt((jump ** 2).sum(axis=1))
    bnd = mesh.is_boundary_face
    bnd_norm = hf[bnd] * np.sqrt((flux[bnd] ** 2).sum(axis=1))

    if norm == 0.0:
        return DivergenceReport(0.0, 0.0, 0.0, 0.0)

    def rel(a):
        return float(a.max()) / norm if a.size else 0.0

    return DivergenceReport(rel(div_norm), rel(jump_norm), rel(bnd_norm), norm)


@dataclass
class TransientState:
    step: int
    t: float
    velocity: np.ndarray       # full velocity vector, boundary faces zero
    pressure: np.ndarray       # pressure block
    beta: np.ndarray
    speed: np.ndarray          # sampled ||u_T||_inf
    newton_iterations: int = 0
    residual: float = 0.0
    residual_history: list = field(default_factory=list)

    def hybrid_velocity(self, disc):
        return HybridVelocity.from_vector(self.velocity, disc.dofmap)

    def hybrid_pressure(self, disc):
        return HybridPressure.from_vector(self.pressure, disc.dofmap)


@dataclass
class Trajectory:
    config: SchemeConfig
    n_steps: int
    dt: float
    diagnostics: list = field(default_factory=list)
    states: list = field(default_factory=list)

    @property
    def final(self):
        return self.states[-1] if self.states else None

    def mean_newton_iterations(self) -> float:
        its = [d["newton_iterations"] for d in self.diagnostics if d["step"] > 0]
        return float(np.mean(its)) if its else 0.0


class TimeStepper:
    """Implicit steps solved by Newton's method."""

    def __init__(self, disc: Discretization, config: SchemeConfig, forcing: Callable | None):
        if disc.k != config.k:
            raise ValueError("discretization and config disagree on k")
        self.disc = disc
        self.config = config
        self.forcing = forcing
        self._force_cache = {}

    def force(self, t):
        if self.forcing is None:
            return np.zeros(self.disc.dofmap.n_u)
        # consecutive steps share an end point; keep the last few loads
        vec = self._force_cache.get(t)
        if vec is None:
            if len(self._force_cache) > 4:
                self._force_cache.clear()
            vec = self._force_cache[t] = self.disc.forcing_vector(self.forcing, t)
        return vec

    def old_operator(self, old: TransientState):
        """``[nu a + t + j_beta](u^n)`` as a global vector."""
        disc, cfg = self.disc, self.config
        val, _ = disc.local_operator(disc.local_velocity(old.velocity), cfg.nu, old.beta,
                                     cfg.convection, False)
        return disc.scatter_velocity(val)

    def linearize(self, x, old, dt, f_old, f_new, old_op, jacobian=True, beta=None, theta=0.5):
        """Residual blocks ``(r_u, r_p, r_lam)`` at ``x`` and the element
        Jacobian blocks of the momentum equation.

        ``old_op`` is ``[nu a + t + j_beta](u^n)``, needed by the
        trapezoidal rule when ``theta < 1``.  ``beta`` overrides the
        stabilization weights, which otherwise follow
        ``config.beta_update``.  ``theta`` weights the new state (1/2 is
        Crank-Nicolson, 1 is backward Euler).
        """
        disc, cfg = self.disc, self.config
        u, p, lam = disc.split(x)
        u_old = old.velocity
        midpoint = cfg.time_scheme == "midpoint"
        y = theta * u + (1.0 - theta) * u_old if midpoint else u
        if beta is None:
            beta = old.beta if cfg.beta_update == "step" else disc.betas(y, cfg.cs)[0]
        y_loc = disc.local_velocity(y)
        val, jac = disc.local_operator(y_loc, cfg.nu, beta, cfg.convection, jacobian)
        if jacobian and cfg.convection and cfg.beta_update == "newton":
            ju = np.matmul(disc.jump, y_loc[:, :, None])[:, :, 0]
            jac[:, :, :disc.n_rtn] += ju[:, :, None] * disc.beta_derivative(y, cfg.cs)[:, None, :]
        mass = np.matmul(disc.l2, disc.local_velocity(u - u_old)[:, :, None])[:, :, 0] / dt
        if midpoint:
            r_u = disc.scatter_velocity(mass + val)
        else:
            r_u = disc.scatter_velocity(mass + theta * val)
            if theta < 1.0:
                r_u += (1.0 - theta) * old_op
        r_u -= theta * f_new + (1.0 - theta) * f_old
        r_u += disc.Bglobal @ p
        r_p = -(disc.Bglobal.T @ u) + disc.mean_weights * lam
        r_lam = float(disc.mean_weights @ p)
        r_u[disc.dofmap.velocity_fixed] = 0.0
        jl = disc.l2 / dt + theta * jac if jacobian else None
        return (r_u, r_p, r_lam), jl, beta

    def residual_vector(self, parts):
        r_u, r_p, r_lam = parts
        return np.concatenate([r_u[self.disc.free], r_p, [r_lam]])

    def assemble_residual_jacobian(self, x, old, dt, f_old=None, f_new=None, beta=None,
                                   theta=0.5) -> LinearSystem:
        """Full saddle-point Jacobian and residual at ``x``."""
        f_old = self.force(old.t) if f_old is None else f_old
        f_new = self.force(old.t + dt) if f_new is None else f_new
        parts, jl, _ = self.linearize(x, old, dt, f_old, f_new, self.old_operator(old),
                                      beta=beta, theta=theta)
        return LinearSystem(self.disc.direct_structure.matrix(jl), self.residual_vector(parts),
                            self.disc.dofmap)

    def _correction(self, parts, jl):
        disc = self.disc
        if self.config.linear_solver == "direct":
            mat = disc.direct_structure.matrix(jl).tocsc()
            return splu(mat, permc_spec="COLAMD").solve(self.residual_vector(parts))
        r_u, r_p, r_lam = parts
        du, dp = disc.condensed_structure.solve(disc, jl, r_u, r_p)
        return disc.join(du, dp, 0.0)

    def _normalize_pressure(self, x):
        """Shift the pressure to zero mean and reset the multiplier (exact
        for the condensed solver, where the multiplier is never used)."""
        disc = self.disc
        n0, n1 = disc.n_free, disc.n_free + disc.dofmap.n_p
        z = disc.pressure_constant
        x[n0:n1] -= (disc.mean_weights @ x[n0:n1]) / (disc.mean_weights @ z) * z
        x[-1] = 0.0
        return x

    def step(self, old: TransientState, dt: float, newton_tol: float | None = None,
             theta: float = 0.5) -> TransientState:
        disc, cfg = self.disc, self.config
        tol = cfg.newton_tol if newton_tol is None else newton_tol
        t_new = old.t + dt
        f_old, f_new = self.force(old.t), self.force(t_new)
        old_op = self.old_operator(old) if theta < 1.0 and cfg.time_scheme == "trapezoidal" else None
        x = disc.join(old.velocity, old.pressure, 0.0)
        history = []
        for it in range(cfg.newton_max_iter + 1):
            parts, jl, _ = self.linearize(x, old, dt, f_old, f_new, old_op, theta=theta)
            rn = float(np.linalg.norm(self.residual_vector(parts)))
            history.append(rn)
            if it > 0 and rn <= max(tol * history[0], cfg.newton_abs_floor):
                break
            if it == cfg.newton_max_iter:
                raise NewtonError(
                    f"Newton did not converge in {cfg.newton_max_iter} iterations "
                    f"at t={t_new:.6g} (residual {rn:.3e}, initial {history[0]:.3e})", history)
            x = x - self._correction(parts, jl)
            if cfg.linear_solver == "condensed":
                x = self._normalize_pressure(x)
        u, p, _ = disc.split(x)
        beta, speed = disc.betas(u, cfg.cs)
        return TransientState(old.step + 1, t_new, u, p.copy(), beta, speed,
                              newton_iterations=len(history) - 1, residual=history[-1],
                              residual_history=history)

    def advance(self, old: TransientState, dt: float, startup: bool = False) -> TransientState:
        """One step of size ``dt``; ``startup`` uses two backward Euler half steps."""
        if not startup:
            return self.step(old, dt)
        half = self.step(old, 0.5 * dt, theta=1.0)
        new = self.step(half, 0.5 * dt, theta=1.0)
        new.step = old.step + 1
        new.newton_iterations += half.newton_iterations
        return new


def newton_solve(stepper: TimeStepper, old: TransientState, dt: float, tol: float = 1e-8):
    """Solve one Crank-Nicolson step from the previous state."""
    return stepper.step(old, dt, newton_tol=tol)


def initial_state(disc: Discretization, u0, cs: float, t0: float = 0.0) -> TransientState:
    """State holding ``I_U u0`` (``u0`` a callable, HybridVelocity or vector)."""
    if callable(u0):
        vec = disc.interpolate(u0)
    elif isinstance(u0, HybridVelocity):
        vec = u0.to_vector().copy()
        vec[disc.dofmap.velocity_fixed] = 0.0
    else:
        vec = np.array(u0, dtype=float)
    beta, speed = disc.betas(vec, cs)
    return TransientState(0, t0, vec, np.zeros(disc.dofmap.n_p), beta, speed)


def run_transient(config: SchemeConfig, disc: Discretization, u0, forcing=None,
                  observer: Callable | None = None, keep_states: bool = False,
                  div_tol: float = 1e-10) -> Trajectory:
    """March from ``I_U u0`` to ``t_final``.

    ``observer(state)`` is called on the initial state and after every
    accepted step.  Per-step diagnostics are always kept; full states only
    with ``keep_states`` (the final state is kept regardless).  A Newton
    failure raises :class:`StepFailure` carrying the partial trajectory.
    """
    n = config.steps_for(disc.mesh.h)
    dt = config.t_final / n
    traj = Trajectory(config, n, dt)
    state = initial_state(disc, u0, config.cs)
    stepper = TimeStepper(disc, config, forcing)

    def record(s):
        rep = check_divergence_free(disc, s.velocity)
        traj.diagnostics.append({
            "step": s.step, "t": s.t, "newton_iterations": s.newton_iterations,
            "residual": s.residual, "energy": disc.l2_norm_sq(s.velocity),
            "pressure_mean": float(disc.mean_weights @ s.pressure),
            "max_divergence": rep.max_divergence, "max_normal_jump": rep.max_normal_jump,
            "max_boundary_normal": rep.max_boundary_normal,
            "divergence_free": rep.passed(div_tol),
        })
        if keep_states:
            traj.states.append(s)
        if observer is not None:
            observer(s)

    record(state)
    for i in range(n):
        try:
            state = stepper.advance(state, dt, startup=i < config.startup_steps)
        except NewtonError as exc:
            raise StepFailure(str(exc), traj) from exc
        record(state)
        log.debug("step %d t=%.4f newton=%d", state.step, state.t, state.newton_iterations)
    if not keep_states:
        traj.states.append(state)
    return traj


def with_overrides(config: SchemeConfig, **kw) -> SchemeConfig:
    return replace(config, **kw)
