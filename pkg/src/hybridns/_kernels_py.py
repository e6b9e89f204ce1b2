"""NumPy implementation of the batched element kernels.

Array conventions (``E`` elements, ``Q`` element nodes, ``F = 3 * mF * 2``
flattened face-node-component slots):

``wphi``   (E, R, 2Q)  RTN values times weights, flattened over (q, c)
``phi``    (E, Q, R, 2)
``dphi``   (E, Q, R, 2, 2)
``ftn``    (E, 3 mF, R) RTN normal traces
``fwh``    (E, 3 mF) half face weights
``sflat``  (E, U, F) values of v_F + v_T
``dflat``  (E, F, U) values of v_F - v_T
"""
import numpy as np


def convection(wphi, phi, dphi, ftn, fwh, sflat, dflat, w, v):
    """Batched convective matrices.

    Returns ``N`` of shape (E, U, U) with ``N[e, i, j] = t_T(w, e_j, e_i)``
    and ``N2`` of shape (E, U, R) with ``N2[e, i, a] = t_T(e_a, v, e_i)``.
    """
    E, Q, R, _ = phi.shape
    U = sflat.shape[1]

    wq = np.einsum("eqjc,ej->eqc", phi, w)
    adv = np.einsum("eqjcd,eqd->eqcj", dphi, wq).reshape(E, 2 * Q, R)
    wn = np.einsum("exj,ej->ex", ftn, w)
    coef = np.repeat(fwh * wn, 2, axis=1)
    N = np.matmul(sflat * coef[:, None, :], dflat)
    N[:, :R, :R] += np.matmul(wphi, adv)

    vgrad = np.einsum("eqjcd,ej->eqcd", dphi, v[:, :R])
    tmp = np.einsum("eqad,eqcd->eqca", phi, vgrad).reshape(E, 2 * Q, R)
    N2 = np.zeros((E, U, R))
    N2[:, :R, :] = np.matmul(wphi, tmp)
    jv = np.matmul(dflat, v[:, :, None])[..., 0].reshape(E, -1, 2)
    x = (fwh[:, :, None, None] * jv[:, :, :, None] * ftn[:, :, None, :]).reshape(E, -1, R)
    N2 += np.matmul(sflat, x)
    return N, N2


def linf_norms(samples, coeffs):
    """Sampled max of ``|v_T|`` per element; ``samples`` is (E, S, R, 2)."""
    vals = np.einsum("esjc,ej->esc", samples, coeffs)
    return np.sqrt((vals ** 2).sum(axis=2)).max(axis=1)
