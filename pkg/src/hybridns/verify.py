"""Structural checks of the discretization.

Each check returns a :class:`CheckResult` holding the measured quantity
and the threshold it is compared against.  :func:`run_suite` runs them
all on one structured mesh; the command line ``--mode verify`` and the
acceptance tests both go through it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .local_ops import stabilization_form
from .mesh import Mesh, build_structured_mesh
from .polyquad import monomial_exponents
from .solver import Discretization, SchemeConfig, TimeStepper, initial_state, run_transient

PI = math.pi


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (threshold {self.threshold:.1e}) {self.detail}".rstrip()


def _below(name, value, threshold, detail=""):
    return CheckResult(name, float(value), threshold, bool(value <= threshold), detail)


def random_polynomial(degree: int, rng, components: int = 2):
    """Random polynomial field of the given total degree on the plane.

    Returns a callable ``f(points) -> (np, components)`` (or ``(np,)`` when
    ``components == 1``) together with its gradient callable.
    """
    exps = monomial_exponents(degree)
    coef = rng.standard_normal((components, len(exps)))

    def mono(points):
        p = np.asarray(points, dtype=float)
        return np.prod(p[:, None, :] ** exps[None, :, :], axis=2)

    def mono_grad(points):
        p = np.asarray(points, dtype=float)
        g = np.zeros((len(p), len(exps), 2))
        for d in range(2):
            e = exps.copy()
            fac = e[:, d].astype(float)
            e[:, d] = np.maximum(e[:, d] - 1, 0)
            g[:, :, d] = fac * np.prod(p[:, None, :] ** e[None, :, :], axis=2)
        return g

    def f(points):
        val = mono(points) @ coef.T
        return val[:, 0] if components == 1 else val

    def grad(points):
        g = np.einsum("pmd,cm->pcd", mono_grad(points), coef)
        return g[:, 0] if components == 1 else g

    return f, grad


# -- local consistency ----------------------------------------------------

def check_commutation(disc: Discretization, rng, n_fields: int = 50, tol: float = 1e-11):
    """``div(I v) = pi^k(div v)`` for random degree ``k+2`` fields.

    Both sides are compared through their moments against the orthonormal
    ``P^k`` basis of each element.
    """
    sp_ = disc.spaces
    npk = disc.n_pcell
    pts = sp_.hi_points
    worst = 0.0
    for _ in range(n_fields):
        v, grad = random_polynomial(disc.k + 2, rng)
        cells = disc.local_velocity(sp_.interpolate_velocity(v).to_vector())[:, :disc.n_rtn]
        lhs = np.einsum("eaj,ej->ea", disc.div, cells)
        g = grad(pts.reshape(-1, 2)).reshape(pts.shape[:2] + (2, 2))
        dv = g[..., 0, 0] + g[..., 1, 1]
        rhs = np.einsum("eq,eqa,eq->ea", sp_.hi_weights, sp_.hi_phi[:, :, :npk], dv)
        scale = max(np.abs(rhs).max(), 1.0)
        worst = max(worst, np.abs(lhs - rhs).max() / scale)
    return _below("rtn_commutation", worst, tol, f"{n_fields} fields of degree {disc.k + 2}")


def check_gradient_consistency(disc: Discretization, rng, n_fields: int = 10, tol: float = 1e-11):
    """``G_T I_P q = grad q`` for random ``q`` of degree ``k+1``."""
    sp_ = disc.spaces
    worst = 0.0
    for _ in range(n_fields):
        q, grad = random_polynomial(disc.k + 1, rng, components=1)
        ploc = sp_.interpolate_pressure(q).to_vector()[disc.l2g_p]
        for t, kit in enumerate(disc.kits):
            nodes = sp_.element_quads[t].nodes
            g = np.einsum("qjc,j->qc", kit.phi, kit.G @ ploc[t])
            exact = grad(nodes)
            worst = max(worst, np.abs(g - exact).max() / max(np.abs(exact).max(), 1.0))
    return _below("gradient_consistency", worst, tol, f"{n_fields} fields of degree {disc.k + 1}")


def check_reconstruction(disc: Discretization, rng, n_fields: int = 10, tol: float = 1e-11,
                         stab_tol: float = 1e-20):
    """``R_T I_U v = v`` for ``v`` of degree ``k+1`` and ``s_T(I v, I v) = 0``.

    Returns two results: the reconstruction error (relative) and the
    largest stabilization value (absolute).
    """
    sp_ = disc.spaces
    worst = 0.0
    stab = 0.0
    for _ in range(n_fields):
        v, _ = random_polynomial(disc.k + 1, rng)
        uloc = disc.local_velocity(sp_.interpolate_velocity(v).to_vector())
        for t, kit in enumerate(disc.kits):
            nodes = sp_.element_quads[t].nodes
            coef = (kit.R @ uloc[t]).reshape(2, -1)
            rec = sp_.element_bases[t].eval(nodes) @ coef.T
            exact = v(nodes)
            worst = max(worst, np.abs(rec - exact).max() / max(np.abs(exact).max(), 1.0))
            stab = max(stab, abs(stabilization_form(kit, uloc[t], uloc[t])))
    return (_below("reconstruction_reproduction", worst, tol),
            _below("stabilization_vanishes", stab, stab_tol, "absolute"))


# -- global properties ----------------------------------------------------

def stream_function_fields():
    """Divergence-free polynomial fields with zero normal trace on the unit
    square, as curls of ``x(1-x)y(1-y) m(x, y)``."""
    multipliers = [
        (lambda x, y: 1.0 + 0 * x, lambda x, y: 0 * x, lambda x, y: 0 * x),
        (lambda x, y: x, lambda x, y: 1.0 + 0 * x, lambda x, y: 0 * x),
        (lambda x, y: y ** 2, lambda x, y: 0 * x, lambda x, y: 2 * y),
        (lambda x, y: x * y, lambda x, y: y, lambda x, y: x),
        (lambda x, y: x ** 2 - 2 * y + 0.5, lambda x, y: 2 * x, lambda x, y: -2.0 + 0 * x),
    ]
    fields = []
    for m, mx, my in multipliers:
        def curl(points, m=m, mx=mx, my=my):
            x, y = points[:, 0], points[:, 1]
            b = x * (1 - x) * y * (1 - y)
            bx = (1 - 2 * x) * y * (1 - y)
            by = x * (1 - x) * (1 - 2 * y)
            psi_x = bx * m(x, y) + b * mx(x, y)
            psi_y = by * m(x, y) + b * my(x, y)
            return np.stack([psi_y, -psi_x], axis=-1)
        fields.append(curl)
    return fields


def _h1_norm(disc, u):
    ul = disc.local_velocity(u)
    return math.sqrt(max(float(np.einsum("ei,eij,ej->", ul, disc.h1, ul)), 0.0))


def check_non_dissipativity(disc: Discretization, rng, n_random: int = 20, tol: float = 1e-12):
    """``|t_h(w, v, v)| <= tol ||w||_{1,h} ||v||_{1,h}^2`` for discretely
    divergence-free ``w`` and random ``v`` with zero boundary faces."""
    fixed = disc.dofmap.velocity_fixed
    ws = [disc.interpolate(field) for field in stream_function_fields()]
    norms = [_h1_norm(disc, w) for w in ws]
    worst = 0.0
    for _ in range(n_random):
        v = rng.standard_normal(disc.dofmap.n_u)
        v[fixed] = 0.0
        nv = _h1_norm(disc, v)
        for w, nw in zip(ws, norms):
            worst = max(worst, abs(disc.convective_form(w, v, v)) / (nw * nv ** 2))
    return _below("non_dissipativity", worst, tol, f"5 solenoidal w, {n_random} random v")


def _shortened(config, disc, n_steps):
    """The first ``n_steps`` steps of the configured run."""
    return replace(config, n_steps=n_steps,
                   t_final=config.t_final * n_steps / config.steps_for(disc.mesh.h))


def check_divergence_free_steps(disc: Discretization, config: SchemeConfig, n_steps: int = 4,
                                tol: float = 1e-10):
    """Every accepted step of the manufactured problem lies in ``Z_h``."""
    from .mms import ManufacturedSolution
    exact = ManufacturedSolution()
    cfg = _shortened(config, disc, n_steps)
    traj = run_transient(cfg, disc, exact.initial_velocity, exact.forcing_field(cfg.nu))
    worst = max(max(d["max_divergence"], d["max_normal_jump"], d["max_boundary_normal"])
                for d in traj.diagnostics if d["step"] > 0)
    return _below("divergence_free_steps", worst, tol, f"{n_steps} steps")


def potential_gradient(t, points):
    """Gradient of ``phi = sin(pi x) cos(pi y)``."""
    x, y = points[..., 0], points[..., 1]
    return np.stack([PI * np.cos(PI * x) * np.cos(PI * y),
                     -PI * np.sin(PI * x) * np.sin(PI * y)], axis=-1)


def check_pressure_robustness(disc: Discretization, config: SchemeConfig, n_steps: int = 5):
    """Adding ``grad phi`` to the forcing leaves the velocity unchanged.

    Returns the velocity result (max over steps of the difference in
    ``||.||_{0,h}`` relative to the velocity size, against ten times the
    Newton tolerance) and the pressure result (relative pressure change,
    which must be of order one).
    """
    from .mms import ManufacturedSolution
    exact = ManufacturedSolution()
    cfg = _shortened(config, disc, n_steps)
    runs = []
    for grad in (None, potential_gradient):
        traj = run_transient(cfg, disc, exact.initial_velocity,
                             exact.forcing_field(cfg.nu, grad), keep_states=True)
        runs.append(traj.states)
    du = max(math.sqrt(disc.l2_norm_sq(a.velocity - b.velocity)) for a, b in zip(*runs))
    size = max(math.sqrt(disc.l2_norm_sq(a.velocity)) for a in runs[0])
    pa, pb = runs[0][-1].pressure, runs[1][-1].pressure
    dp = np.linalg.norm(pa - pb) / max(np.linalg.norm(pa), 1e-300)
    vel = _below("pressure_robust_velocity", du / size, 10 * cfg.newton_tol)
    pres = CheckResult("pressure_robust_pressure", float(dp), 0.1, bool(dp >= 0.1),
                       "relative pressure change must be O(1)")
    return vel, pres


def jacobian_order(disc: Discretization, config: SchemeConfig, rng,
                   eps=(1e-3, 1e-4, 1e-5), freeze_beta: bool | None = None):
    """Observed order of ``r(x + e d) - r(x) - e J d`` in ``e``.

    With ``freeze_beta`` the stabilization weights are held at their
    values at ``x`` on both sides, which is what a Jacobian that does not
    differentiate ``beta_T`` is exact for.  By default ``beta_T`` is frozen
    unless the configuration differentiates it.
    """
    from .mms import ManufacturedSolution
    if freeze_beta is None:
        freeze_beta = config.beta_update != "newton"
    exact = ManufacturedSolution()
    stepper = TimeStepper(disc, config, exact.forcing_field(config.nu))
    old = initial_state(disc, exact.initial_velocity, config.cs)
    dt = config.t_final / config.steps_for(disc.mesh.h)
    x = disc.join(old.velocity, rng.standard_normal(disc.dofmap.n_p), 0.0)
    x[:disc.n_free] += 0.1 * rng.standard_normal(disc.n_free)
    d = rng.standard_normal(disc.size)
    f_old, f_new = stepper.force(old.t), stepper.force(old.t + dt)
    beta = disc.betas(disc.split(x)[0], config.cs)[0] if freeze_beta else None
    base = stepper.assemble_residual_jacobian(x, old, dt, f_old, f_new, beta=beta)
    jd = base.matrix @ d
    errs = []
    for e in eps:
        r = stepper.assemble_residual_jacobian(x + e * d, old, dt, f_old, f_new, beta=beta).rhs
        errs.append(np.linalg.norm(r - base.rhs - e * jd))
    errs = np.array(errs)
    orders = np.log(errs[:-1] / errs[1:]) / np.log(np.asarray(eps[:-1]) / np.asarray(eps[1:]))
    return orders, errs


def check_jacobian(disc: Discretization, config: SchemeConfig, rng, min_order: float = 1.9):
    orders, errs = jacobian_order(disc, config, rng)
    order = float(orders.min())
    return CheckResult("jacobian_fd_order", order, min_order, bool(order >= min_order),
                       "orders " + ", ".join(f"{o:.2f}" for o in orders))


def run_suite(k: int = 1, n: int = 4, seed: int = 0, pattern: str = "diagonal",
              mesh: Mesh | None = None, config: SchemeConfig | None = None,
              disc: Discretization | None = None) -> list[CheckResult]:
    """Run every structural check on one mesh."""
    rng = np.random.default_rng(seed)
    config = config or SchemeConfig(k=k)
    if disc is None:
        mesh = mesh or build_structured_mesh(n, pattern)
        disc = Discretization(mesh, config.k, config.stabilization)
    results = [check_commutation(disc, rng), check_gradient_consistency(disc, rng)]
    results.extend(check_reconstruction(disc, rng))
    results.append(check_non_dissipativity(disc, rng))
    results.append(check_divergence_free_steps(disc, config))
    results.extend(check_pressure_robustness(disc, config))
    results.append(check_jacobian(disc, config, rng))
    return results

