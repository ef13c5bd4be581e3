"""Vectorised P1/Q1 element kernels and a reusable sparse assembly pattern."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import ElementInversionError, Mesh, build_quadrature, shape_functions

__all__ = ["Block", "Discretization", "SparsePattern", "det2", "inv2"]


def det2(A: np.ndarray) -> np.ndarray:
    return A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]


def inv2(A: np.ndarray) -> np.ndarray:
    d = det2(A)
    out = np.empty_like(A)
    out[..., 0, 0] = A[..., 1, 1] / d
    out[..., 1, 1] = A[..., 0, 0] / d
    out[..., 0, 1] = -A[..., 0, 1] / d
    out[..., 1, 0] = -A[..., 1, 0] / d
    return out


@dataclass(frozen=True, eq=False)
class Block:
    """Elements of one kind with precomputed reference-configuration data.

    ``grads0`` holds basis gradients w.r.t. reference coordinates,
    shape ``(m, nq, nen, 2)``; ``wdet0`` holds quadrature weight times
    reference det J, shape ``(m, nq)``.
    """

    kind: str
    ids: np.ndarray
    conn: np.ndarray
    N: np.ndarray
    grads0: np.ndarray
    wdet0: np.ndarray

    @property
    def nen(self) -> int:
        return self.conn.shape[1]

    @property
    def nq(self) -> int:
        return self.N.shape[0]

    def dofs(self) -> np.ndarray:
        """Full DOF numbers per element, ordered (a0x, a0y, a1x, ...)."""
        d = np.empty((len(self.conn), 2 * self.nen), dtype=np.int64)
        d[:, 0::2] = 2 * self.conn
        d[:, 1::2] = 2 * self.conn + 1
        return d


class Discretization:
    """Quadrature-point geometry for a mesh, evaluated against its reference nodes.

    Deformation gradients and current-configuration gradients are computed
    from nodal positions ``y`` through the reference gradients, which is
    exact for the isoparametric maps used here.

    With ``collapse_affine`` the tri3 rule is folded into a single point at
    the centroid carrying the summed weight. Every integrand assembled here
    is constant on a linear triangle, so the result equals the 3-point rule
    up to roundoff at a third of the pointwise work.
    """

    def __init__(self, mesh: Mesh, collapse_affine: bool = False):
        self.mesh = mesh
        self.blocks: list[Block] = []
        for kind, ids, cb in mesh.blocks:
            rule = build_quadrature(kind)
            if collapse_affine and kind == "tri3":
                rule = type(rule)(kind, rule.points.mean(axis=0, keepdims=True),
                                  rule.weights.sum(keepdims=True))
            N, dN = shape_functions(kind, rule.points)
            X = mesh.nodes[cb]
            J = np.einsum("qad,mai->mqid", dN, X)
            det = det2(J)
            if det.min() <= 0:
                bad = int(np.argmin(det.min(axis=1)))
                raise ElementInversionError(int(ids[bad]), float(det.min()))
            grads0 = np.einsum("qad,mqdi->mqai", dN, inv2(J))
            self.blocks.append(Block(kind, ids, cb, N, grads0, rule.weights * det))

    @property
    def n_qp(self) -> int:
        return sum(b.conn.shape[0] * b.nq for b in self.blocks)

    def qp_coordinates(self, y: np.ndarray | None = None) -> np.ndarray:
        """Coordinates of all quadrature points, block-major, ``(n_qp, 2)``."""
        y = self.mesh.nodes if y is None else y
        return np.concatenate(
            [np.einsum("qa,mai->mqi", b.N, y[b.conn]).reshape(-1, 2) for b in self.blocks])

    def deformation_gradients(self, y: np.ndarray) -> list[np.ndarray]:
        """``F = dy/dY`` per block, shape ``(m, nq, 2, 2)``.

        Evaluated as ``I + grad(y - Y)`` so that the reference configuration
        gives exactly the identity.
        """
        u = y - self.mesh.nodes
        return [np.eye(2) + np.einsum("mai,mqaJ->mqiJ", u[b.conn], b.grads0)
                for b in self.blocks]

    def field_gradients(self, u: np.ndarray, grads: list[np.ndarray]) -> list[np.ndarray]:
        """Gradient ``du_c/dx_d`` of nodal field(s) ``(..., n, 2)`` per block.

        Returns arrays of shape ``(..., m, nq, 2, 2)``.
        """
        return [np.einsum("...mac,mqad->...mqcd", u[..., b.conn, :], g)
                for b, g in zip(self.blocks, grads)]

    def current(self, F: list[np.ndarray]) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Current-configuration basis gradients and weights from ``F`` per block."""
        grads, wdet = [], []
        for b, Fb in zip(self.blocks, F):
            J = det2(Fb)
            if J.min() <= 0:
                bad = int(np.argmin(J.min(axis=1)))
                raise ElementInversionError(int(b.ids[bad]), float(J.min()))
            grads.append(np.einsum("mqaJ,mqJk->mqak", b.grads0, inv2(Fb)))
            wdet.append(b.wdet0 * J)
        return grads, wdet


class SparsePattern:
    """Fixed CSC sparsity for repeated assembly of element matrices.

    Parameters
    ----------
    elem_eqs : list of ndarray
        Per block, equation numbers ``(m, ndof_e)``; -1 marks eliminated DOFs.
    n : int
        Number of equations.
    """

    def __init__(self, elem_eqs: list[np.ndarray], n: int):
        self.n = n
        rows, cols, self._vec_idx = [], [], []
        for eqs in elem_eqs:
            k = eqs.shape[1]
            rows.append(np.repeat(eqs, k, axis=1).ravel())
            cols.append(np.tile(eqs, (1, k)).ravel())
            self._vec_idx.append(eqs.ravel())
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        self._keep = (r >= 0) & (c >= 0)
        key = c[self._keep] * n + r[self._keep]
        uniq, self._slot = np.unique(key, return_inverse=True)
        self._indices = (uniq % n).astype(np.int32)
        colnum = uniq // n
        self._indptr = np.searchsorted(colnum, np.arange(n + 1)).astype(np.int32)
        self.nnz = len(uniq)

    def matrix(self, Ke: list[np.ndarray]) -> sp.csc_matrix:
        """Assemble element matrices ``(m, ndof_e, ndof_e)`` (one array per block)."""
        data = np.concatenate([k.reshape(-1) for k in Ke])[self._keep]
        vals = np.bincount(self._slot, weights=data, minlength=self.nnz)
        return sp.csc_matrix((vals, self._indices, self._indptr), shape=(self.n, self.n))

    def vector(self, fe: list[np.ndarray]) -> np.ndarray:
        """Assemble element vectors ``(..., m, ndof_e)`` into ``(..., n)``."""
        lead = fe[0].shape[:-2]
        out = np.zeros(lead + (self.n,))
        for f, idx in zip(fe, self._vec_idx):
            flat = f.reshape(lead + (-1,))
            ok = idx >= 0
            if lead:
                for j in np.ndindex(*lead):
                    out[j] += np.bincount(idx[ok], weights=flat[j][..., ok], minlength=self.n)
            else:
                out += np.bincount(idx[ok], weights=flat[ok], minlength=self.n)
        return out
