"""Compressible neo-Hookean kernels: stresses, tangent moduli and their sensitivities.

All functions are vectorised over leading axes. Deformation gradients may be
given as in-plane ``(..., 2, 2)`` arrays (embedded in 3D with ``F33 = 1``) or
as full ``(..., 3, 3)`` arrays. Velocity gradients ``G`` follow the same rule
with a zero third row and column. Outputs are always 3D.

Sensitivity kernels (``dtau_*``) return the derivative with respect to ``t``
of the parent quantity under the configuration perturbation
``F -> (I + t G) F``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "MaterialParams",
    "embed",
    "cauchy_stress",
    "kirchhoff_stress",
    "tangent_D",
    "tangent_A",
    "jaumann_moduli",
    "truesdell_moduli",
    "dtau_kirchhoff",
    "dtau_cauchy",
    "dtau_jaumann_moduli",
    "dtau_truesdell_moduli",
    "dtau_A",
]

I3 = np.eye(3)
_DD = np.einsum("ij,kl->ijkl", I3, I3)
_SYM = np.einsum("ik,jl->ijkl", I3, I3) + np.einsum("il,jk->ijkl", I3, I3)


@dataclass(frozen=True)
class MaterialParams:
    """Bulk modulus ``K`` and shear modulus ``mu`` in Pa."""

    K: float
    mu: float

    def __post_init__(self):
        if not (self.K > 0 and self.mu > 0):
            raise ValueError(f"moduli must be positive, got K={self.K}, mu={self.mu}")


def embed(A) -> np.ndarray:
    """Embed in-plane ``(..., 2, 2)`` tensors in 3D with a unit 33 entry for F."""
    A = np.asarray(A, dtype=float)
    if A.shape[-2:] == (3, 3):
        return A
    out = np.zeros(A.shape[:-2] + (3, 3))
    out[..., :2, :2] = A
    out[..., 2, 2] = 1.0
    return out


def _embed_grad(G) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    if G.shape[-2:] == (3, 3):
        return G
    out = np.zeros(G.shape[:-2] + (3, 3))
    out[..., :2, :2] = G
    return out


def _s(x, nd: int):
    """Broadcast a scalar field over ``nd`` trailing tensor axes."""
    x = np.asarray(x, dtype=float)
    return x.reshape(x.shape + (1,) * nd)


def _kinematics(F):
    F = embed(F)
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise ValueError("nonpositive Jacobian det F")
    b = F @ np.swapaxes(F, -1, -2)
    return F, J, b


def _tr(a):
    return np.trace(a, axis1=-2, axis2=-1)


def _outer_sum(t):
    """t_ij d_kl + d_ij t_kl."""
    return np.einsum("...ij,kl->...ijkl", t, I3) + np.einsum("ij,...kl->...ijkl", I3, t)


def _bracket(t):
    """(d_ik t_lj + t_il d_jk + d_il t_kj + t_ik d_jl) / 2."""
    return 0.5 * (np.einsum("ik,...lj->...ijkl", I3, t)
                  + np.einsum("...il,jk->...ijkl", t, I3)
                  + np.einsum("il,...kj->...ijkl", I3, t)
                  + np.einsum("...ik,jl->...ijkl", t, I3))


def _mu_group(b):
    """2/9 tr(b) dd - 2/3 (b d + d b) + bracket(b): linear in b."""
    return (2.0 / 9.0) * _s(_tr(b), 4) * _DD - (2.0 / 3.0) * _outer_sum(b) + _bracket(b)


def _geometric(s):
    """s_jl d_ik."""
    return np.einsum("ik,...jl->...ijkl", I3, s)


# --------------------------------------------------------------------- stresses


def cauchy_stress(F, K, mu) -> np.ndarray:
    """sigma = K (J-1) I + mu J^{-5/3} (b - tr(b)/3 I)."""
    F, J, b = _kinematics(F)
    dev = b - _s(_tr(b) / 3.0, 2) * I3
    return _s(K * (J - 1.0), 2) * I3 + _s(mu * J ** (-5.0 / 3.0), 2) * dev


def kirchhoff_stress(F, K, mu) -> np.ndarray:
    """tau = J sigma = K J (J-1) I + mu J^{-2/3} (b - tr(b)/3 I)."""
    F, J, b = _kinematics(F)
    dev = b - _s(_tr(b) / 3.0, 2) * I3
    return _s(K * J * (J - 1.0), 2) * I3 + _s(mu * J ** (-2.0 / 3.0), 2) * dev


# ---------------------------------------------------------------------- moduli


def tangent_D(F, K, mu) -> np.ndarray:
    """Cauchy-level tangent relating the Truesdell stress rate to the rate of deformation."""
    F, J, b = _kinematics(F)
    trb = _s(_tr(b), 4)
    c = _s(mu * J ** (-5.0 / 3.0), 4)
    return (_s(K * (2 * J - 1), 4) * _DD - _s(K * (J - 1), 4) * _SYM
            + c * ((2.0 / 9.0) * trb * _DD - (2.0 / 3.0) * _outer_sum(b)
                   + (1.0 / 3.0) * trb * _SYM))


def tangent_A(F, K, mu) -> np.ndarray:
    """A_ijkl = D_ijkl + sigma_jl d_ik."""
    return tangent_D(F, K, mu) + _geometric(cauchy_stress(F, K, mu))


def jaumann_moduli(F, K, mu) -> np.ndarray:
    """Kirchhoff-level moduli of the Jaumann rate."""
    F, J, b = _kinematics(F)
    return (_s(K * (2 * J - 1) * J, 4) * _DD
            + _s(mu * J ** (-2.0 / 3.0), 4) * _mu_group(b))


def truesdell_moduli(F, K, mu) -> np.ndarray:
    """D^TK = D^JK - bracket(tau); equals J times ``tangent_D``."""
    return jaumann_moduli(F, K, mu) - _bracket(kirchhoff_stress(F, K, mu))


# ----------------------------------------------------------------- sensitivities


def dtau_kirchhoff(F, G, K, mu) -> np.ndarray:
    """Derivative of the Kirchhoff stress."""
    F, J, b = _kinematics(F)
    G = _embed_grad(G)
    divV = _tr(G)
    db = G @ b + b @ np.swapaxes(G, -1, -2)
    c = mu * J ** (-2.0 / 3.0)
    dev_b = b - _s(_tr(b) / 3.0, 2) * I3
    dev_db = db - _s(_tr(db) / 3.0, 2) * I3
    return (_s(K * (2 * J - 1) * J * divV, 2) * I3
            - _s((2.0 / 3.0) * c * divV, 2) * dev_b
            + _s(c, 2) * dev_db)


def dtau_cauchy(F, G, K, mu) -> np.ndarray:
    """Derivative of the Cauchy stress, (dtau - tau div V) / J."""
    F, J, _ = _kinematics(F)
    G = _embed_grad(G)
    tau = kirchhoff_stress(F, K, mu)
    return (dtau_kirchhoff(F, G, K, mu) - tau * _s(_tr(G), 2)) / _s(J, 2)


def dtau_jaumann_moduli(F, G, K, mu) -> np.ndarray:
    """Derivative of the Jaumann moduli."""
    F, J, b = _kinematics(F)
    G = _embed_grad(G)
    divV = _tr(G)
    db = G @ b + b @ np.swapaxes(G, -1, -2)
    c = mu * J ** (-2.0 / 3.0)
    return (_s(K * (4 * J - 1) * J * divV, 4) * _DD
            - _s((2.0 / 3.0) * c * divV, 4) * _mu_group(b)
            + _s(c, 4) * _mu_group(db))


def dtau_truesdell_moduli(F, G, K, mu) -> np.ndarray:
    """Derivative of the Truesdell moduli, dD^JK - bracket(dtau)."""
    return dtau_jaumann_moduli(F, G, K, mu) - _bracket(dtau_kirchhoff(F, G, K, mu))


def dtau_A(F, G, K, mu) -> np.ndarray:
    """Derivative of A: (dD^TK - D^TK div V) / J + dsigma_jl d_ik."""
    F, J, _ = _kinematics(F)
    G = _embed_grad(G)
    DTK = truesdell_moduli(F, K, mu)
    dDTK = dtau_truesdell_moduli(F, G, K, mu)
    return ((dDTK - DTK * _s(_tr(G), 4)) / _s(J, 4)
            + _geometric(dtau_cauchy(F, G, K, mu)))
