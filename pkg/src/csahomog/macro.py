"""Incremental macroscopic problem with Newton iterations (updated Lagrangian).

Each iteration evaluates the coefficient backend at the current deformation
gradients, assembles ``int A grad(du) : grad(v)`` and ``int S : grad(v)`` on the
current iterate configuration and solves for the correction. Tractions are
dead loads defined on the reference boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable
import time

import numpy as np
from scipy.sparse.linalg import splu

from .fem import Discretization, SparsePattern
from .mesh import Mesh

__all__ = ["LoadCase", "MacroProblem", "MacroState", "StepLog", "assemble_macro",
           "newton_solve", "green_strain", "NOISE_STRAIN"]

NOISE_STRAIN = 1e-12


@dataclass
class LoadCase:
    """Boundary data as functions of reference coordinates ``X (k, 2)`` and load ratio ``r``.

    ``dirichlet`` maps a facet tag to a prescribed displacement, ``traction``
    maps a facet tag to a traction in Pa. Ratios run ``r_k = k / (n_steps - 1)``.
    """

    n_steps: int = 10
    dirichlet: dict = field(default_factory=dict)
    traction: dict = field(default_factory=dict)
    body_force: Callable | None = None

    def __post_init__(self):
        both = set(self.dirichlet) & set(self.traction)
        if both:
            raise ValueError(f"facet tags {sorted(both)} carry both Dirichlet and traction data")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    def ratio(self, step: int) -> float:
        return step / (self.n_steps - 1) if self.n_steps > 1 else 1.0


class MacroProblem:
    """Reference macro mesh, boundary conditions and assembly patterns."""

    def __init__(self, mesh: Mesh, load: LoadCase):
        self.mesh = mesh
        self.load = load
        self.disc = Discretization(mesh)
        self.n_qp = self.disc.n_qp
        n = mesh.n_nodes
        fixed_nodes = np.unique(np.concatenate(
            [mesh.facet_nodes(t) for t in load.dirichlet] or [np.zeros(0, int)]))
        for t in list(load.dirichlet) + list(load.traction):
            if not np.any(mesh.facet_tags == t):
                raise ValueError(f"no facets tagged {t} in the macro mesh")
        self.fixed_tags = {t: mesh.facet_nodes(t) for t in load.dirichlet}
        fixed = np.zeros(2 * n, bool)
        fixed[2 * fixed_nodes] = True
        fixed[2 * fixed_nodes + 1] = True
        self.fixed = fixed
        self.free_index = np.full(2 * n, -1, dtype=np.int64)
        self.free_index[~fixed] = np.arange(int((~fixed).sum()))
        self.n_free = int((~fixed).sum())
        dofs = [b.dofs() for b in self.disc.blocks]
        self.pattern = SparsePattern([self.free_index[d] for d in dofs], self.n_free)
        self.full = SparsePattern(dofs, 2 * n)
        self.length = float(np.sqrt(sum(b.wdet0.sum() for b in self.disc.blocks)))

    def prescribed(self, r: float) -> np.ndarray:
        """Nodal displacement array with Dirichlet values set (zeros elsewhere)."""
        u = np.zeros((self.mesh.n_nodes, 2))
        for tag, nodes in self.fixed_tags.items():
            u[nodes] = np.broadcast_to(self.load.dirichlet[tag](self.mesh.nodes[nodes], r),
                                       (len(nodes), 2))
        return u

    def external_force(self, r: float) -> np.ndarray:
        """Consistent nodal forces of tractions (2-point Gauss per facet) and body force."""
        f = np.zeros(2 * self.mesh.n_nodes)
        gp = np.array([-1.0, 1.0]) / np.sqrt(3.0)
        for tag, fun in self.load.traction.items():
            sel = self.mesh.facets[self.mesh.facet_tags == tag]
            Xa, Xb = self.mesh.nodes[sel[:, 0]], self.mesh.nodes[sel[:, 1]]
            L = np.linalg.norm(Xb - Xa, axis=1)
            for s in gp:
                Na, Nb = 0.5 * (1 - s), 0.5 * (1 + s)
                X = Na * Xa + Nb * Xb
                h = np.broadcast_to(fun(X, r), (len(X), 2)) * (0.5 * L)[:, None]
                for nodes, N in ((sel[:, 0], Na), (sel[:, 1], Nb)):
                    np.add.at(f, 2 * nodes, N * h[:, 0])
                    np.add.at(f, 2 * nodes + 1, N * h[:, 1])
        if self.load.body_force is not None:
            fe = []
            for b in self.disc.blocks:
                X = np.einsum("qa,mai->mqi", b.N, self.mesh.nodes[b.conn])
                bf = np.broadcast_to(self.load.body_force(X.reshape(-1, 2), r),
                                     (X.shape[0] * X.shape[1], 2)).reshape(X.shape)
                fe.append(np.einsum("mqi,qa,mq->mai", bf, b.N, b.wdet0).reshape(len(X), -1))
            f += self.full.vector(fe)
        return f

    def deformation_gradients(self, u: np.ndarray) -> np.ndarray:
        """``F = I + grad_X u`` at all quadrature points, ``(nqp, 2, 2)``."""
        return np.concatenate([f.reshape(-1, 2, 2) for f in self.block_gradients(u)])

    def block_gradients(self, u: np.ndarray) -> list[np.ndarray]:
        """``F = I + grad_X u`` per block, ``(m, nq, 2, 2)``; exactly ``I`` for ``u = 0``."""
        return [np.eye(2) + np.einsum("mai,mqaJ->mqiJ", u[b.conn], b.grads0)
                for b in self.disc.blocks]

    def interpolate(self, u: np.ndarray) -> np.ndarray:
        """Nodal field values at all quadrature points, ``(nqp, 2)``."""
        return np.concatenate([np.einsum("qa,mai->mqi", b.N, u[b.conn]).reshape(-1, 2)
                               for b in self.disc.blocks])


@dataclass
class MacroState:
    """Converged macro configuration after ``step`` (``-1`` before the first)."""

    u: np.ndarray
    F: np.ndarray
    step: int = -1

    @classmethod
    def initial(cls, problem: MacroProblem) -> "MacroState":
        return cls(np.zeros((problem.mesh.n_nodes, 2)),
                   np.broadcast_to(np.eye(2), (problem.n_qp, 2, 2)).copy())

    def current_mesh(self, problem: MacroProblem) -> Mesh:
        return problem.mesh.with_nodes(problem.mesh.nodes + self.u)


@dataclass
class StepLog:
    step: int
    residuals: list = field(default_factory=list)
    n_new: list = field(default_factory=list)
    converged: bool = False
    reason: str = ""
    times: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.residuals)


def _split(arr: np.ndarray, problem: MacroProblem) -> list[np.ndarray]:
    out, k = [], 0
    for b in problem.disc.blocks:
        n = len(b.conn) * b.nq
        out.append(arr[k:k + n].reshape((len(b.conn), b.nq) + arr.shape[1:]))
        k += n
    return out


def assemble_macro(problem: MacroProblem, u: np.ndarray, A: np.ndarray,
                   S: np.ndarray) -> tuple[object, np.ndarray]:
    """Free-DOF tangent and full internal-force vector on the configuration ``X + u``."""
    grads, wdet = problem.disc.current(problem.block_gradients(u))
    Ke, fe = [], []
    for b, g, w, Ab, Sb in zip(problem.disc.blocks, grads, wdet, _split(A, problem),
                               _split(S, problem)):
        Ag = np.einsum("mqijkl,mqbl,mq->mqijkb", Ab, g, w)
        Ke.append(np.einsum("mqijkb,mqaj->maibk", Ag, g).reshape(len(g), 2 * b.nen, 2 * b.nen))
        fe.append(np.einsum("mqij,mqaj,mq->mai", Sb, g, w).reshape(len(g), -1))
    return problem.pattern.matrix(Ke), problem.full.vector(fe)


def green_strain(F: np.ndarray) -> np.ndarray:
    return 0.5 * (np.swapaxes(F, -1, -2) @ F - np.eye(2))


def newton_solve(problem: MacroProblem, state: MacroState, backend, step: int,
                 eps: float = 1e-6, max_iter: int = 25, patience: int = 4,
                 callback: Callable | None = None) -> tuple[MacroState, StepLog]:
    """Solve load step ``step`` starting from the converged ``state``.

    The residual norm is taken over free DOFs and compared with
    ``eps * |f_ext|`` (or the reaction norm when there is no external force).
    Residuals below the force a strain of ``NOISE_STRAIN`` would produce
    through the largest tangent modulus count as converged, so that an
    unloaded step is not chased into roundoff of the micro solutions.
    The step stops early with reason ``"oscillation"`` when the best residual
    has not improved for ``patience`` iterations during which no centroids
    were created, and with ``"inverted"`` (keeping the last admissible
    iterate) when an update drives ``det F`` to zero or below. ``callback(step, it, F, field, u)`` sees every iteration.
    Backends with a ``tag`` attribute receive ``(step, iteration)`` before
    each evaluation.
    """
    r = problem.load.ratio(step)
    f_ext = problem.external_force(r)
    free = ~problem.fixed
    u = state.u.copy()
    pres = problem.prescribed(r)
    fixed_nodes = problem.fixed.reshape(-1, 2)
    u[fixed_nodes] = pres[fixed_nodes]
    log = StepLog(step)
    t_backend = t_asm = t_lin = 0.0
    best, stall = np.inf, 0
    u_prev = u.copy()
    for it in range(max_iter):
        F = problem.deformation_gradients(u)
        if np.any(np.linalg.det(F) <= 0):
            log.reason = "inverted"
            u = u_prev
            break
        u_prev = u.copy()
        if hasattr(backend, "tag"):
            backend.tag = (step, it)
        t0 = time.perf_counter()
        cf = backend.get_coefficients(F)
        t1 = time.perf_counter()
        K, f_int = assemble_macro(problem, u, cf.A, cf.S)
        t2 = time.perf_counter()
        t_backend += t1 - t0
        t_asm += t2 - t1
        res = f_ext - f_int
        rn = float(np.linalg.norm(res[free]))
        scale = float(np.linalg.norm(f_ext))
        if scale == 0.0:
            scale = float(np.linalg.norm(f_int[~free]))
        floor = NOISE_STRAIN * float(np.abs(cf.A).max()) * problem.length
        log.residuals.append(rn)
        log.n_new.append(int(cf.n_new))
        if callback is not None:
            callback(step, it, F, cf, u)
        if rn <= max(eps * scale, floor):
            log.converged, log.reason = True, "converged"
            break
        if rn < best:
            best, stall = rn, 0
        elif cf.n_new == 0:
            stall += 1
        else:
            stall = 0
        if stall >= patience:
            log.reason = "oscillation"
            break
        t3 = time.perf_counter()
        du = splu(K.tocsc()).solve(res[free])
        t_lin += time.perf_counter() - t3
        u.reshape(-1)[free] += du
    else:
        log.reason = "max_iter"
    log.times = {"backend": t_backend, "assembly": t_asm, "linear": t_lin}
    new = MacroState(u, problem.deformation_gradients(u), step)
    return new, log
