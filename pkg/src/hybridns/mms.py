"""Manufactured solution, time-discrete error norms and the EOC harness.

Exact solution on the unit square::

    u = g(t) (16 y(1-y)(1-2y) sin^2(pi x), -8 pi y^2 (1-y)^2 sin(2 pi x))
    p = g(t) sin(pi x) cos(pi y),        g(t) = (3 + 2 cos 4t) / 5
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .local_ops import chi_indicator, stabilization_form
from .mesh import Mesh, build_structured_mesh
from .solver import Discretization, SchemeConfig, StepFailure, run_transient

log = logging.getLogger(__name__)

PI = math.pi
CSV_FIELDS = ("k", "nu", "n", "h", "Ntf", "tnorm_err", "tnorm_eoc",
              "E_err", "E_eoc", "max_ReT", "newton_avg_iters")


def _xy(points):
    pts = np.asarray(points, dtype=float)
    return pts[..., 0], pts[..., 1]


class ManufacturedSolution:
    """Closed-form fields; every method takes ``(t, points)`` with points
    of shape ``(..., 2)``."""

    @staticmethod
    def time_factor(t):
        return (3.0 + 2.0 * np.cos(4.0 * t)) / 5.0

    @staticmethod
    def time_factor_derivative(t):
        return -8.0 * np.sin(4.0 * t) / 5.0

    @staticmethod
    def _profiles(x, y):
        """Spatial factors ``u1 = a(y) s(x)`` and ``u2 = b(y) c(x)`` with
        their first and second derivatives."""
        a = 16.0 * (y - 3.0 * y ** 2 + 2.0 * y ** 3)
        da = 16.0 * (1.0 - 6.0 * y + 6.0 * y ** 2)
        dda = 16.0 * (-6.0 + 12.0 * y)
        s = np.sin(PI * x) ** 2
        ds = PI * np.sin(2 * PI * x)
        dds = 2 * PI ** 2 * np.cos(2 * PI * x)
        b = -8.0 * PI * y ** 2 * (1.0 - y) ** 2
        db = -16.0 * PI * y * (1.0 - y) * (1.0 - 2.0 * y)
        ddb = -16.0 * PI * (1.0 - 6.0 * y + 6.0 * y ** 2)
        c = np.sin(2 * PI * x)
        dc = 2 * PI * np.cos(2 * PI * x)
        ddc = -4 * PI ** 2 * np.sin(2 * PI * x)
        return (a, da, dda, s, ds, dds), (b, db, ddb, c, dc, ddc)

    def velocity(self, t, points):
        x, y = _xy(points)
        (a, _, _, s, _, _), (b, _, _, c, _, _) = self._profiles(x, y)
        return self.time_factor(t) * np.stack([a * s, b * c], axis=-1)

    def velocity_gradient(self, t, points):
        """``[..., i, j] = d u_i / d x_j``."""
        x, y = _xy(points)
        (a, da, _, s, ds, _), (b, db, _, c, dc, _) = self._profiles(x, y)
        g = np.stack([np.stack([a * ds, da * s], axis=-1),
                      np.stack([b * dc, db * c], axis=-1)], axis=-2)
        return self.time_factor(t) * g

    def velocity_laplacian(self, t, points):
        x, y = _xy(points)
        (a, _, dda, s, _, dds), (b, _, ddb, c, _, ddc) = self._profiles(x, y)
        return self.time_factor(t) * np.stack([a * dds + dda * s, b * ddc + ddb * c], axis=-1)

    def velocity_time_derivative(self, t, points):
        return self.velocity(t, points) * (self.time_factor_derivative(t) / self.time_factor(t))

    def divergence(self, t, points):
        g = self.velocity_gradient(t, points)
        return g[..., 0, 0] + g[..., 1, 1]

    def pressure(self, t, points):
        x, y = _xy(points)
        return self.time_factor(t) * np.sin(PI * x) * np.cos(PI * y)

    def pressure_gradient(self, t, points):
        x, y = _xy(points)
        g = self.time_factor(t)
        return g * np.stack([PI * np.cos(PI * x) * np.cos(PI * y),
                             -PI * np.sin(PI * x) * np.sin(PI * y)], axis=-1)

    def forcing(self, t, points, nu):
        """``du/dt - nu lap u + (u . grad) u + grad p``."""
        u = self.velocity(t, points)
        conv = np.einsum("...ij,...j->...i", self.velocity_gradient(t, points), u)
        return (self.velocity_time_derivative(t, points) - nu * self.velocity_laplacian(t, points)
                + conv + self.pressure_gradient(t, points))

    def forcing_field(self, nu, potential_gradient=None):
        """Forcing as a ``f(t, points)`` callable, optionally plus a gradient."""
        def f(t, points):
            val = self.forcing(t, points, nu)
            if potential_gradient is not None:
                val = val + potential_gradient(t, points)
            return val
        return f

    def initial_velocity(self, points):
        return self.velocity(0.0, points)


def eoc(errors, hs):
    """``log(e_i / e_{i+1}) / log(h_i / h_{i+1})`` for consecutive levels."""
    e = np.asarray(errors, dtype=float)
    h = np.asarray(hs, dtype=float)
    return np.log(e[:-1] / e[1:]) / np.log(h[:-1] / h[1:])


class ErrorAccumulator:
    """Accumulates both time-discrete error measures step by step.

    ``|||e|||^2 = max_n ||e^n||_{0,h}^2 + trapz(nu ||e||_{1,h}^2 + |e|_{beta,h}^2)``
    with ``e^n = u_h^n - I_U u(t^n)``, and

    ``E^2 = max_n ||R_h u_h^n - u(t^n)||^2 + trapz(nu ||grad_h(R_h u_h - u)||^2)``

    evaluated with the over-integration rule.
    """

    def __init__(self, disc: Discretization, exact: ManufacturedSolution, nu: float,
                 dt: float):
        self.disc = disc
        self.exact = exact
        self.nu = nu
        self.dt = dt
        sp = disc.spaces
        self._pts = sp.hi_points
        self._w = sp.hi_weights
        self._phi = sp.hi_phi
        self._dphi = sp.hi_dphi
        self.max_l2 = 0.0
        self.integral = 0.0
        self.max_rec = 0.0
        self.rec_integral = 0.0
        self._prev = None
        self.max_reynolds = 0.0
        self.chi_history = []

    def _measures(self, state):
        disc, nu = self.disc, self.nu
        interp = disc.interpolate(lambda p: self.exact.velocity(state.t, p))
        e = disc.local_velocity(state.velocity - interp)
        def form(mats):
            return (e * np.matmul(mats, e[:, :, None])[:, :, 0]).sum(axis=1)
        l2 = float(form(disc.l2).sum())
        h1 = float(form(disc.h1).sum())
        jb = float(state.beta @ form(disc.jump))

        coef = np.matmul(disc.Rmat, disc.local_velocity(state.velocity)[:, :, None])[:, :, 0]
        coef = coef.reshape(len(coef), 2, -1)
        rec = np.einsum("eqb,ecb->eqc", self._phi, coef)
        drec = np.einsum("eqbd,ecb->eqcd", self._dphi, coef)
        pts = self._pts.reshape(-1, 2)
        diff = rec - self.exact.velocity(state.t, pts).reshape(rec.shape)
        gdiff = drec - self.exact.velocity_gradient(state.t, pts).reshape(drec.shape)
        rl2 = float(np.einsum("eq,eqc->", self._w, diff ** 2))
        rh1 = float(np.einsum("eq,eqcd->", self._w, gdiff ** 2))
        return l2, nu * h1 + jb, rl2, nu * rh1

    def observe(self, state):
        l2, dyn, rl2, rdyn = self._measures(state)
        self.max_l2 = max(self.max_l2, l2)
        self.max_rec = max(self.max_rec, rl2)
        if self._prev is not None:
            self.integral += 0.5 * self.dt * (self._prev[0] + dyn)
            self.rec_integral += 0.5 * self.dt * (self._prev[1] + rdyn)
        self._prev = (dyn, rdyn)
        mesh = self.disc.mesh
        if self.nu > 0:
            re = (state.beta + state.speed) * mesh.diameters / self.nu
        else:
            re = np.full(mesh.n_elements, np.inf)
        self.max_reynolds = max(self.max_reynolds, float(re.max()))
        self.chi_history.append(chi_indicator(state.beta, state.speed, re))

    @property
    def tnorm(self) -> float:
        return math.sqrt(self.max_l2 + self.integral)

    @property
    def reconstruction(self) -> float:
        return math.sqrt(self.max_rec + self.rec_integral)


@dataclass
class LevelResult:
    n: int
    h: float
    n_steps: int
    tnorm_err: float
    E_err: float
    max_reynolds: float
    chi_max: float
    newton_avg_iters: float
    divergence_free: bool
    max_divergence: float


@dataclass
class ConvergenceReport:
    config: SchemeConfig
    levels: list = field(default_factory=list)
    failure: str | None = None

    @property
    def hs(self):
        return [lv.h for lv in self.levels]

    @property
    def tnorm_eoc(self):
        return eoc([lv.tnorm_err for lv in self.levels], self.hs) if len(self.levels) > 1 else np.array([])

    @property
    def E_eoc(self):
        return eoc([lv.E_err for lv in self.levels], self.hs) if len(self.levels) > 1 else np.array([])

    def rows(self):
        te, ee = self.tnorm_eoc, self.E_eoc
        out = []
        for i, lv in enumerate(self.levels):
            out.append({
                "k": self.config.k, "nu": self.config.nu, "n": lv.n, "h": lv.h,
                "Ntf": lv.n_steps, "tnorm_err": lv.tnorm_err,
                "tnorm_eoc": te[i - 1] if i else None,
                "E_err": lv.E_err, "E_eoc": ee[i - 1] if i else None,
                "max_ReT": lv.max_reynolds, "newton_avg_iters": lv.newton_avg_iters,
            })
        return out

    def to_csv(self, header=True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(CSV_FIELDS)
        for row in self.rows():
            writer.writerow([_fmt(row[f]) for f in CSV_FIELDS])
        return buf.getvalue()


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.16e}"


def solve_level(config: SchemeConfig, mesh: Mesh, exact: ManufacturedSolution | None = None,
                disc: Discretization | None = None, potential_gradient=None):
    """One transient solve of the manufactured problem with error tracking."""
    exact = exact or ManufacturedSolution()
    disc = disc or Discretization(mesh, config.k, config.stabilization)
    n_steps = config.steps_for(mesh.h)
    acc = ErrorAccumulator(disc, exact, config.nu, config.t_final / n_steps)
    forcing = exact.forcing_field(config.nu, potential_gradient)
    traj = run_transient(config, disc, exact.initial_velocity, forcing, observer=acc.observe)
    return traj, acc


def eoc_study(config: SchemeConfig, levels, pattern: str = "diagonal",
              exact: ManufacturedSolution | None = None,
              cache: dict | None = None) -> ConvergenceReport:
    """Run the manufactured problem on structured meshes ``n in levels``.

    ``cache`` (a dict) keeps the discretizations between calls, so sweeps
    over the viscosity build each mesh level once.
    """
    levels = sorted(set(int(n) for n in levels))
    if len(levels) < 2:
        raise ValueError("an EOC study needs at least two levels")
    report = ConvergenceReport(config)
    for n in levels:
        key = (n, pattern, config.k, config.stabilization)
        disc = cache.get(key) if cache is not None else None
        if disc is None:
            disc = Discretization(build_structured_mesh(n, pattern), config.k, config.stabilization)
            if cache is not None:
                cache[key] = disc
        mesh = disc.mesh
        try:
            traj, acc = solve_level(config, mesh, exact, disc=disc)
        except StepFailure as exc:
            report.failure = f"n={n}: {exc}"
            log.error("study aborted: %s", report.failure)
            break
        # the initial interpolant is not a solved state; only accepted steps count
        diags = [d for d in traj.diagnostics if d["step"] > 0]
        report.levels.append(LevelResult(
            n=n, h=mesh.h, n_steps=traj.n_steps, tnorm_err=acc.tnorm,
            E_err=acc.reconstruction, max_reynolds=acc.max_reynolds,
            chi_max=max(acc.chi_history), newton_avg_iters=traj.mean_newton_iterations(),
            divergence_free=all(d["divergence_free"] for d in diags),
            max_divergence=max(max(d["max_divergence"], d["max_normal_jump"],
                                   d["max_boundary_normal"]) for d in diags),
        ))
        log.info("k=%d nu=%g n=%d tnorm=%.3e E=%.3e", config.k, config.nu, n,
                 acc.tnorm, acc.reconstruction)
    return report


INTERPOLATION_MEASURES = ("element_l2", "trace", "scaled_trace", "stabilization")


def interpolation_errors(disc: Discretization, v) -> dict:
    """Approximation errors of ``I_U v`` for a vector field ``v(points)``.

    ``element_l2`` is ``||v - v_T||`` over the domain, ``trace`` is
    ``(sum_T ||v - v_T||_{dT}^2)^{1/2}``, ``scaled_trace`` weights each
    element by ``h_T`` and ``stabilization`` is ``(sum_T s_T(Iv, Iv))^{1/2}``.
    All integrals use the over-integration rules.
    """
    sp_, mesh = disc.spaces, disc.mesh
    u = disc.local_velocity(sp_.interpolate_velocity(v).to_vector())
    cells = u[:, :disc.n_rtn]
    vals = np.einsum("eqjc,ej->eqc", disc.hi_rtn, cells)
    exact = np.asarray(v(sp_.hi_points.reshape(-1, 2))).reshape(vals.shape)
    l2 = float(np.einsum("eq,eqc->", sp_.hi_weights, (vals - exact) ** 2))
    trace = scaled = 0.0
    for t, rtn in enumerate(sp_.rtn):
        for f in mesh.element_faces[t]:
            pts = sp_.hi_face_points[f]
            diff = np.einsum("qjc,j->qc", rtn.eval(pts), cells[t]) - np.asarray(v(pts))
            val = float(sp_.hi_face_weights[f] @ (diff ** 2).sum(axis=1))
            trace += val
            scaled += mesh.diameters[t] * val
    stab = sum(stabilization_form(kit, u[t], u[t]) for t, kit in enumerate(disc.kits))
    return {"element_l2": math.sqrt(l2), "trace": math.sqrt(trace),
            "scaled_trace": math.sqrt(scaled), "stabilization": math.sqrt(max(stab, 0.0))}


def interpolation_study(k: int, levels, pattern: str = "diagonal", v=None,
                        stabilization: str = "hho") -> dict:
    """Interpolation errors of ``v`` (default: the manufactured velocity at
    ``t = 0``) over structured meshes; returns ``{"h": [...], measure: [...]}``
    plus ``measure + "_eoc"`` slope arrays."""
    v = v or ManufacturedSolution().initial_velocity
    out = {"h": []}
    for name in INTERPOLATION_MEASURES:
        out[name] = []
    for n in sorted(set(int(n) for n in levels)):
        mesh = build_structured_mesh(n, pattern)
        errs = interpolation_errors(Discretization(mesh, k, stabilization), v)
        out["h"].append(mesh.h)
        for name in INTERPOLATION_MEASURES:
            out[name].append(errs[name])
    for name in INTERPOLATION_MEASURES:
        out[name + "_eoc"] = eoc(out[name], out["h"])
    return out
