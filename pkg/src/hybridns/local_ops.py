"""Element-local operators: velocity reconstruction, stabilizations,
pressure gradient, the convective forms and the discrete L2 product.

A local hybrid velocity vector has ``n_rtn + 3 * 2 (k+1)`` entries: the
element RTN DOFs followed by the three face blocks in local face order.
A local hybrid pressure vector has ``dim P^k + 3 (k+1)`` entries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .polyquad import dim_poly
from .spaces import HybridSpaces

STABILIZATIONS = ("hho", "dofi")


@dataclass
class LocalKit:
    """Dense operator matrices of one element.  Immutable by convention."""

    element: int
    k: int
    h: float
    area: float
    lam: float
    n_rtn: int
    n_u: int
    n_p: int
    # quadrature caches
    qw: np.ndarray        # (nq,) element weights
    phi: np.ndarray       # (nq, n_rtn, 2) RTN values
    dphi: np.ndarray      # (nq, n_rtn, 2, 2) RTN Jacobians [comp, deriv]
    fw: np.ndarray        # (3, mF) face weights
    fn: np.ndarray        # (3, 2) outward normals
    ftrace: np.ndarray    # (3, mF, n_rtn, 2) RTN traces
    fjump: np.ndarray     # (3, mF, n_u, 2) values of v_F - v_T
    fsum: np.ndarray      # (3, mF, n_u, 2) values of v_F + v_T
    samples: np.ndarray   # (ns, n_rtn, 2) RTN values at L-infinity sample points
    # operators
    R: np.ndarray            # (2 dim P^{k+1}, n_u)
    stiffness_poly: np.ndarray  # (2 dim P^{k+1},) * 2
    interp_poly: np.ndarray  # (n_u, 2 dim P^{k+1}) I_{U,T} on P^{k+1}(T)^2
    delta: np.ndarray        # (n_u, n_u)  I_{U,T} R_T - Id
    s: np.ndarray            # (n_u, n_u)  delta^T stab_inner delta
    stab_inner: np.ndarray   # (n_u, n_u)
    A: np.ndarray            # (n_u, n_u)
    G: np.ndarray            # (n_rtn, n_p)
    B: np.ndarray            # (n_rtn, n_p)  b_T(v, q) = v_T . B q
    mass_rtn: np.ndarray     # (n_rtn, n_rtn)
    jump: np.ndarray         # (n_u, n_u)  sum_F int (v_F - v_T).(w_F - w_T)
    l2: np.ndarray           # (n_u, n_u)  (.,.)_{0,T}
    h1: np.ndarray           # (n_u, n_u)  ||.||_{1,T}^2
    div: np.ndarray          # (dim P^k, n_rtn) divergence in the P^k basis
    poly_mean: np.ndarray    # (dim P^{k+1},) integrals of the scalar basis


def _pad(mat, n):
    out = np.zeros((n, n))
    out[:mat.shape[0], :mat.shape[1]] = mat
    return out


def build_kit(spaces: HybridSpaces, t: int, stabilization: str = "hho") -> LocalKit:
    if stabilization not in STABILIZATIONS:
        raise ValueError(f"unknown stabilization {stabilization!r}")
    mesh, k = spaces.mesh, spaces.k
    rtn = spaces.rtn[t]
    basis = spaces.element_bases[t]
    quad = spaces.element_quads[t]
    fids = mesh.element_faces[t]
    h = float(mesh.diameters[t])
    area = float(mesh.areas[t])
    normals = mesh.normals[t]
    nR = rtn.dim
    nf1 = k + 1
    n_u = nR + 6 * nf1
    npk = dim_poly(k)
    n_p = npk + 3 * nf1
    nP1 = basis.dim

    qw = quad.weights
    phi = rtn.eval(quad.nodes)
    dphi = rtn.grad(quad.nodes)
    sphi = basis.eval(quad.nodes)
    sdphi = basis.grad(quad.nodes)

    fquads = [spaces.face_quads[f] for f in fids]
    mF = len(fquads[0].weights)
    fw = np.array([fq.weights for fq in fquads])
    ftrace = np.array([rtn.eval(fq.nodes) for fq in fquads])
    fvals = np.zeros((3, mF, n_u, 2))   # face unknowns
    ctrace = np.zeros((3, mF, n_u, 2))  # element trace
    for i, (f, fq) in enumerate(zip(fids, fquads)):
        psi = spaces.face_bases[f].eval(fq.nodes)
        off = nR + 2 * nf1 * i
        fvals[i, :, off:off + nf1, 0] = psi
        fvals[i, :, off + nf1:off + 2 * nf1, 1] = psi
        ctrace[i, :, :nR, :] = ftrace[i]
    fjump = fvals - ctrace
    fsum = fvals + ctrace

    # velocity reconstruction in P^{k+1}(T)^2, coefficient index c * nP1 + b
    kphi = np.einsum("q,qad,qbd->ab", qw, sdphi, sdphi)
    poly_mean = qw @ sphi
    rhs = np.zeros((2, nP1, n_u))
    rhs[:, :, :nR] = np.einsum("q,qjcd,qbd->cbj", qw, dphi, sdphi)
    for i, fq in enumerate(fquads):
        gn = basis.grad(fq.nodes) @ normals[i]  # (mF, nP1)
        rhs += np.einsum("q,qb,qjc->cbj", fq.weights, gn, fjump[i])
    mean = np.zeros((2, n_u))
    if k == 0:
        for i in range(3):
            d_tf = mesh.face_distances[t, i]
            mean += 0.5 * d_tf * np.einsum("q,qjc->cj", fw[i], fvals[i])
    else:
        mean[:, :nR] = np.einsum("q,qjc->cj", qw, phi)
    coef = np.zeros((2, nP1, n_u))
    coef[:, 1:, :] = np.linalg.solve(kphi[1:, 1:], rhs[:, 1:, :])
    coef[:, 0, :] = (mean - np.einsum("b,cbj->cj", poly_mean[1:], coef[:, 1:, :])) / poly_mean[0]
    R = coef.reshape(2 * nP1, n_u)
    kfull = np.kron(np.eye(2), kphi)

    # interpolator of P^{k+1}(T)^2 into the local hybrid space
    interp = np.zeros((n_u, 2, nP1))
    nint = dim_poly(k - 1)
    if nint:
        gram = np.einsum("q,qa,qb->ab", qw, sphi[:, :nint], sphi)
        interp[:nint, 0, :] = gram
        interp[nint:2 * nint, 1, :] = gram
    for i, (f, fq) in enumerate(zip(fids, fquads)):
        psi = spaces.face_bases[f].eval(fq.nodes)
        vals = basis.eval(fq.nodes)
        mom = np.einsum("q,qj,qb->jb", fq.weights, psi, vals)
        row = 2 * nint + i * nf1
        interp[row:row + nf1] = mom[:, None, :] * normals[i][None, :, None]
        off = nR + 2 * nf1 * i
        interp[off:off + nf1, 0, :] = mom
        interp[off + nf1:off + 2 * nf1, 1, :] = mom
    interp = interp.reshape(n_u, 2 * nP1)
    delta = interp @ R - np.eye(n_u)

    jump = np.einsum("fq,fqic,fqjc->ij", fw, fjump, fjump)
    mass_rtn = np.einsum("q,qic,qjc->ij", qw, phi, phi)
    lam = 3.0 * h ** 2 / area
    if stabilization == "hho":
        inner = jump / h
    else:
        face_mass = np.einsum("fq,fqic,fqjc->ij", fw, fvals, fvals)
        inner = lam / h ** 2 * _pad(mass_rtn, n_u) + face_mass / h
    s = delta.T @ inner @ delta
    s = 0.5 * (s + s.T)
    A = R.T @ kfull @ R + s
    A = 0.5 * (A + A.T)

    divphi = dphi[..., 0, 0] + dphi[..., 1, 1]
    div = np.einsum("q,qa,qj->aj", qw, sphi[:, :npk], divphi)
    B = np.zeros((nR, n_p))
    B[:, :npk] = -div.T
    for i, (f, fq) in enumerate(zip(fids, fquads)):
        psi = spaces.face_bases[f].eval(fq.nodes)
        B[:, npk + i * nf1:npk + (i + 1) * nf1] = np.einsum(
            "q,qi,qj->ij", fq.weights, ftrace[i] @ normals[i], psi)
    G = np.linalg.solve(mass_rtn, B)

    grad_gram = np.einsum("q,qicd,qjcd->ij", qw, dphi, dphi)
    l2 = _pad(mass_rtn, n_u) + h * jump
    h1 = _pad(grad_gram, n_u) + jump / h

    verts = mesh.element_vertices(t)
    mids = 0.5 * (verts + np.roll(verts, -1, axis=0))
    samples = rtn.eval(np.vstack([quad.nodes, verts, mids]))

    return LocalKit(
        element=t, k=k, h=h, area=area, lam=lam, n_rtn=nR, n_u=n_u, n_p=n_p,
        qw=qw, phi=phi, dphi=dphi, fw=fw, fn=normals, ftrace=ftrace,
        fjump=fjump, fsum=fsum, samples=samples,
        R=R, stiffness_poly=kfull, interp_poly=interp, delta=delta, s=s, stab_inner=inner, A=A,
        G=G, B=B, mass_rtn=mass_rtn, jump=jump, l2=l2, h1=h1, div=div,
        poly_mean=poly_mean,
    )


def build_kits(spaces: HybridSpaces, stabilization: str = "hho") -> list[LocalKit]:
    return [build_kit(spaces, t, stabilization) for t in range(spaces.mesh.n_elements)]


# -- forms on a single element ------------------------------------------

def velocity_reconstruction(kit: LocalKit, v):
    """Coefficients of ``R_T^{k+1} v`` (components stacked)."""
    return kit.R @ v


def stabilization_form(kit: LocalKit, w, v) -> float:
    """``s_T(w, v)`` evaluated in factored form, which keeps values on
    near-kernel arguments free of cancellation error."""
    return float((kit.delta @ w) @ kit.stab_inner @ (kit.delta @ v))


def coupling_form(kit: LocalKit, v, q) -> float:
    """``b_T(v, q) = int_T v_T . G_T q``."""
    return float(v[:kit.n_rtn] @ kit.B @ q)


def convection_matrices(kit: LocalKit, w_cell, v=None):
    """Matrices of the convective form with the advecting field fixed.

    Returns ``N`` with ``N[i, j] = t_T(w, e_j, e_i)`` and, when ``v`` is
    given, ``N2`` with ``N2[i, a] = t_T(e_a, v, e_i)`` (``a`` over the RTN
    block only, since ``t_T`` sees just the element part of ``w``).
    """
    nR = kit.n_rtn
    wq = np.einsum("qjc,j->qc", kit.phi, w_cell)
    adv = np.einsum("qjcd,qd->qjc", kit.dphi, wq)
    N = 0.5 * np.einsum("fq,fq,fqic,fqjc->ij", kit.fw,
                        np.einsum("fqjc,j,fc->fq", kit.ftrace, w_cell, kit.fn),
                        kit.fsum, kit.fjump)
    N[:nR, :nR] += np.einsum("q,qic,qjc->ij", kit.qw, kit.phi, adv)
    if v is None:
        return N
    vgrad = np.einsum("qjcd,j->qcd", kit.dphi, v[:nR])
    N2 = np.zeros((kit.n_u, nR))
    N2[:nR] = np.einsum("q,qic,qad,qcd->ia", kit.qw, kit.phi, kit.phi, vgrad)
    jv = np.einsum("fqjc,j->fqc", kit.fjump, v)
    an = np.einsum("fqac,fc->fqa", kit.ftrace, kit.fn)
    N2 += 0.5 * np.einsum("fq,fqa,fqc,fqic->ia", kit.fw, an, jv, kit.fsum)
    return N, N2


def convective_form(kit: LocalKit, w, v, z) -> float:
    """``t_T(w, v, z)``."""
    return float(z @ convection_matrices(kit, w[:kit.n_rtn]) @ v)


def convective_stabilization(kit: LocalKit, beta: float, w, v) -> float:
    """``j_{beta,T}(w, v)``."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return float(beta * (w @ kit.jump @ v))


def convective_stabilization_matrix(kit: LocalKit, beta: float):
    if beta <= 0:
        raise ValueError("beta must be positive")
    return beta * kit.jump


def discrete_l2_product(kit: LocalKit, w, v) -> float:
    return float(w @ kit.l2 @ v)


def linf_velocity(kit: LocalKit, v_cell) -> float:
    """Sampled estimate of ``||v_T||_{L^inf(T)}`` (a lower bound)."""
    vals = np.einsum("sjc,j->sc", kit.samples, v_cell)
    return float(np.sqrt((vals ** 2).sum(axis=1)).max())


def linf_gradient(kit: LocalKit, v_cell) -> float:
    """Sampled estimate of ``||grad v_T||_{L^inf(T)}`` (Frobenius norm)."""
    g = np.einsum("qjcd,j->qcd", kit.dphi, v_cell)
    return float(np.sqrt((g ** 2).sum(axis=(1, 2))).max())


def local_norms(kit: LocalKit, v, beta: float, nu: float | None = None) -> dict:
    """Local norms of a hybrid velocity.

    Keys: ``l2`` (``||v||_{0,T}``), ``h1`` (``||v||_{1,T}``), ``beta``
    (``|v|_{beta,T}``) and ``w1inf`` (sampled ``||v||_{1,inf,T}``).  ``nu``
    is accepted for symmetry with the global energy norm and, if given,
    adds ``energy = ||v||_{0,T}^2 + nu ||v||_{1,T}^2 + |v|_{beta,T}^2``.
    """
    out = {
        "l2": float(np.sqrt(max(v @ kit.l2 @ v, 0.0))),
        "h1": float(np.sqrt(max(v @ kit.h1 @ v, 0.0))),
        "beta": float(np.sqrt(max(beta * (v @ kit.jump @ v), 0.0))),
    }
    jumps = np.einsum("fqjc,j->fqc", kit.fjump, v)
    face_max = float(np.sqrt((jumps ** 2).sum(axis=-1)).max())
    out["w1inf"] = linf_gradient(kit, v[:kit.n_rtn]) + face_max / kit.h
    if nu is not None:
        out["energy"] = out["l2"] ** 2 + nu * out["h1"] ** 2 + out["beta"] ** 2
    return out


def beta_parameter(kit: LocalKit, u_cell, cs: float = 1e-4) -> float:
    """``beta_T = max(c_s, ||u_T||_inf)``."""
    if cs <= 0:
        raise ValueError("safeguard constant must be positive")
    return max(cs, linf_velocity(kit, u_cell))


def local_reynolds(kit: LocalKit, beta: float, u_cell, nu: float) -> float:
    """``Re_T = (beta_T + ||u||_inf) h_T / nu`` with the discrete ``u_T``."""
    speed = beta + linf_velocity(kit, u_cell)
    return np.inf if nu == 0 else speed * kit.h / nu


def chi_indicator(betas, speeds, reynolds) -> float:
    """``max ||u||_inf / beta_T`` over convection-dominated elements, 0 if none."""
    mask = np.asarray(reynolds) > 1.0
    if not mask.any():
        return 0.0
    return float(np.max(np.asarray(speeds)[mask] / np.asarray(betas)[mask]))
