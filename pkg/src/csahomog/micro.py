"""Periodic cell problem in the updated-Lagrangian setting.

A micro state is the current nodal configuration ``y`` of a periodic cell,
its macroscopic deformation ``FM`` (the cell's lattice vectors are ``FM``
times the reference periods) and the characteristic responses computed on
that configuration. Nodal positions always satisfy
``y[slave] - y[master] = FM @ shift``.

Corrector modes are ordered ``11, 22, 12, 21`` (``MODES``); sensitivities are
stored for the three symmetric modes ``11, 22, 12`` (``SENS_MODES``), the shear
one being the derivative along the symmetrised mode ``(E12 + E21) / 2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import splu

from .fem import Discretization, SparsePattern, det2
from .material import MaterialParams, cauchy_stress, dtau_A, dtau_cauchy, embed, tangent_A
from .mesh import ElementInversionError, PeriodicCell

__all__ = [
    "MODES",
    "SENS_MODES",
    "MicroError",
    "MicroConvergenceError",
    "CoefficientSet",
    "MicroState",
    "StepInfo",
    "MicroProblem",
    "DirectSolver",
    "GalerkinSolver",
    "assemble_tangent",
    "solve_correctors",
    "homogenized_coefficients",
    "coefficient_sensitivities",
    "micro_update",
    "equilibrate",
    "micro_step",
    "mode_matrix",
]

MODES = ((0, 0), (1, 1), (0, 1), (1, 0))
SENS_MODES = ("11", "22", "12")
_MODE_INDEX = {m: i for i, m in enumerate(MODES)}


def mode_matrix(p: int, q: int) -> np.ndarray:
    E = np.zeros((2, 2))
    E[p, q] = 1.0
    return E


class MicroError(RuntimeError):
    """Failure of a micro solve (inversion or non-convergence)."""


class MicroConvergenceError(MicroError):
    def __init__(self, message: str, norms=()):
        super().__init__(message)
        self.norms = list(norms)


@dataclass(frozen=True)
class CoefficientSet:
    """Homogenized tangent ``A`` (2,2,2,2), stress ``S`` (2,2) and optional sensitivities.

    ``dA`` has shape (3,2,2,2,2) and ``dS`` (3,2,2), indexed by ``SENS_MODES``.
    """

    A: np.ndarray
    S: np.ndarray
    dA: np.ndarray | None = None
    dS: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class MicroState:
    y: np.ndarray
    FM: np.ndarray
    correctors: np.ndarray | None = None
    coeffs: CoefficientSet | None = None


@dataclass
class StepInfo:
    """Counters accumulated over one or more micro steps."""

    steps: int = 0
    equilibrium_iterations: int = 0
    factorizations: int = 0
    substeps: int = 0
    norms: list = field(default_factory=list)
    correction: np.ndarray | None = None

    def add(self, other: "StepInfo") -> None:
        self.steps += other.steps
        self.equilibrium_iterations += other.equilibrium_iterations
        self.factorizations += other.factorizations
        self.substeps += other.substeps


class DirectSolver:
    """Sparse LU factorisation of the reduced periodic operator."""

    def factor(self, K):
        lu = splu(K.tocsc(), permc_spec="MMD_AT_PLUS_A")
        return lu.solve


class GalerkinSolver:
    """Galerkin projection on an orthonormal basis ``Phi`` (n_red, M)."""

    def __init__(self, Phi: np.ndarray):
        self.Phi = np.asarray(Phi, float)

    def factor(self, K):
        Phi = self.Phi
        if Phi.shape[1] == 0:
            return lambda rhs: np.zeros(np.shape(rhs))
        Kr = Phi.T @ (K @ Phi)
        lu = sla.lu_factor(Kr)

        def solve(rhs):
            return Phi @ sla.lu_solve(lu, Phi.T @ rhs)

        return solve


class MicroProblem:
    """Static data for one periodic cell: discretisation, materials, DOF map, tolerances.

    Parameters
    ----------
    cell : PeriodicCell
    materials : dict
        Region tag to :class:`MaterialParams`.
    eps : float
        Equilibrium tolerance on ``max|dw|`` relative to the cell size.
    max_iter : int
        Maximum equilibrium iterations.
    max_levels : int
        Recursive halving levels tried on inversion or non-convergence.
    """

    def __init__(self, cell: PeriodicCell, materials: dict, eps: float = 1e-9,
                 max_iter: int = 20, max_levels: int = 8):
        self.cell = cell
        self.mesh = cell.mesh
        self.disc = Discretization(cell.mesh, collapse_affine=True)
        self.eps = eps
        self.max_iter = max_iter
        self.max_levels = max_levels
        self.length = float(np.sqrt(np.prod(cell.period)))
        missing = set(np.unique(cell.mesh.regions).tolist()) - set(materials)
        if missing:
            raise ValueError(f"no material for region tag(s) {sorted(missing)}")
        self.materials = dict(materials)
        self.Kq, self.muq = [], []
        for b in self.disc.blocks:
            reg = cell.mesh.regions[b.ids]
            Kv = np.array([materials[r].K for r in reg])
            mv = np.array([materials[r].mu for r in reg])
            self.Kq.append(np.repeat(Kv[:, None], b.nq, axis=1))
            self.muq.append(np.repeat(mv[:, None], b.nq, axis=1))
        eqs = [cell.reduced_index[b.dofs()] for b in self.disc.blocks]
        self.n_red = cell.n_reduced
        self.pattern = SparsePattern(eqs, self.n_red)

    def initial_state(self) -> MicroState:
        return MicroState(self.mesh.nodes.copy(), np.eye(2))


@dataclass(eq=False)
class MicroSystem:
    """Assembled operator and quadrature data on one configuration."""

    K: object
    r: np.ndarray
    vol: float
    F: list
    sig: list
    At: list
    grads: list
    w: list


def assemble_tangent(problem: MicroProblem, y: np.ndarray, matrix: bool = True) -> MicroSystem:
    """Assemble ``a_Y`` (with the 1/|Y| factor) and the residual ``-<sigma : grad v>``."""
    disc = problem.disc
    F2 = disc.deformation_gradients(y)
    grads, wdet = disc.current(F2)
    vol = float(sum(w.sum() for w in wdet))
    F3 = [embed(f) for f in F2]
    sig, At, Ke, re = [], [], [], []
    for b, Fb, g, w, Kq, mq in zip(disc.blocks, F3, grads, wdet, problem.Kq, problem.muq):
        s = cauchy_stress(Fb, Kq, mq)[..., :2, :2]
        sig.append(s)
        re.append(-np.einsum("mqij,mqaj,mq->mai", s, g, w).reshape(len(g), -1) / vol)
        if matrix:
            A = tangent_A(Fb, Kq, mq)[..., :2, :2, :2, :2]
            At.append(A)
            Ag = np.einsum("mqijkl,mqbl,mq->mqijkb", A, g, w)
            k = np.einsum("mqijkb,mqaj->maibk", Ag, g)
            Ke.append(k.reshape(len(g), 2 * b.nen, 2 * b.nen) / vol)
    K = problem.pattern.matrix(Ke) if matrix else None
    r = problem.pattern.vector(re)
    return MicroSystem(K, r, vol, F3, sig, At, grads, wdet)


def solve_correctors(problem: MicroProblem, system: MicroSystem, solve=None,
                     solver=None) -> np.ndarray:
    """Characteristic responses for the four modes as nodal fields ``(4, n, 2)``."""
    if solve is None:
        solve = (solver or DirectSolver()).factor(system.K)
    fe = []
    for A, g, w in zip(system.At, system.grads, system.w):
        s = np.stack([A[..., p, q] for p, q in MODES])
        fe.append(-np.einsum("Mmqij,mqaj,mq->Mmai", s, g, w).reshape(4, len(g), -1)
                  / system.vol)
    rhs = problem.pattern.vector(fe)
    X = solve(np.ascontiguousarray(rhs.T))
    return problem.cell.expand(np.asarray(X).T)


def _xi_gradients(problem, system, correctors):
    """Gradients of Xi = omega + Pi for each mode, per block ``(4, m, nq, 2, 2)``."""
    H = problem.disc.field_gradients(correctors, system.grads)
    for h in H:
        for M, (p, q) in enumerate(MODES):
            h[M, ..., p, q] += 1.0
    return H


def _to_tensor(mat: np.ndarray) -> np.ndarray:
    """Mode-pair matrix ``(..., 4, 4)`` to a ``(..., 2, 2, 2, 2)`` tensor."""
    out = np.empty(mat.shape[:-2] + (2, 2, 2, 2))
    for I, (i, j) in enumerate(MODES):
        for J, (k, l) in enumerate(MODES):
            out[..., i, j, k, l] = mat[..., I, J]
    return out


def homogenized_coefficients(problem: MicroProblem, system: MicroSystem,
                             correctors: np.ndarray, H=None) -> CoefficientSet:
    """``A_ijkl = a_Y(Xi^kl, Xi^ij)`` and ``S = <sigma>``."""
    H = _xi_gradients(problem, system, correctors) if H is None else H
    Amat = np.zeros((4, 4))
    S = np.zeros((2, 2))
    for A, h, w, s in zip(system.At, H, system.w, system.sig):
        Z = np.einsum("mqabcd,Kmqcd->Kmqab", A, h)
        Amat += np.einsum("Kmqab,Imqab,mq->IK", Z, h, w)
        S += np.einsum("mqij,mq->ij", s, w)
    return CoefficientSet(_to_tensor(Amat / system.vol), S / system.vol)


def coefficient_sensitivities(problem: MicroProblem, system: MicroSystem,
                              correctors: np.ndarray, coeffs: CoefficientSet,
                              H=None) -> tuple[np.ndarray, np.ndarray]:
    """Directional derivatives of ``A`` and ``S`` along the three symmetric strain modes.

    The velocity field of mode ``rs`` is ``Xi^rs`` (symmetrised for the shear
    mode), so its gradient at each quadrature point is ``H^rs``.
    """
    H = _xi_gradients(problem, system, correctors) if H is None else H
    vol = system.vol
    Amat = np.empty((4, 4))
    for I, (i, j) in enumerate(MODES):
        for J, (k, l) in enumerate(MODES):
            Amat[I, J] = coeffs.A[i, j, k, l]
    dA = np.zeros((3, 4, 4))
    dS = np.zeros((3, 2, 2))
    for blk, Fb, A, h, w, s, Kq, mq in zip(problem.disc.blocks, system.F, system.At, H,
                                            system.w, system.sig, problem.Kq, problem.muq):
        Z = np.einsum("mqabcd,Kmqcd->Kmqab", A, h)          # A : H^K
        for r, G in enumerate((h[0], h[1], 0.5 * (h[2] + h[3]))):
            divV = G[..., 0, 0] + G[..., 1, 1]
            wd = w * divV
            dsig = dtau_cauchy(Fb, G, Kq, mq)[..., :2, :2]
            dS[r] += np.einsum("mqij,mq->ij", s - coeffs.S, wd)
            dS[r] += np.einsum("mqij,mq->ij", dsig, w)
            dAt = dtau_A(Fb, G, Kq, mq)[..., :2, :2, :2, :2]
            dZ = np.einsum("mqabcd,Kmqcd->Kmqab", dAt, h)
            HG = np.einsum("Kmqce,mqed->Kmqcd", h, G)        # H G
            ZG = np.einsum("mqabcd,Kmqcd->Kmqab", A, HG)     # A : (H G)
            # P^K_cd = d_kc G_ld for K = (k, l)
            P = np.zeros_like(h)
            for K_, (k, l) in enumerate(MODES):
                P[K_, ..., k, :] = G[..., l, :]
            ZP = np.einsum("mqabcd,Kmqcd->Kmqab", A, P)
            t = (np.einsum("Kmqab,Imqab,mq->IK", dZ, h, w)
                 + np.einsum("Kmqab,Imqab,mq->IK", Z, h, wd)
                 - np.einsum("Kmqab,Imqab,mq->IK", ZG, h, w)
                 - np.einsum("Kmqab,Imqab,mq->IK", Z, HG, w)
                 + np.einsum("Kmqab,Imqab,mq->IK", ZP, h, w)
                 + np.einsum("Kmqab,Imqab,mq->IK", Z, P, w))
            dA[r] += t
    divs = np.zeros(3)
    for h, w in zip(H, system.w):
        for r, G in enumerate((h[0], h[1], 0.5 * (h[2] + h[3]))):
            divs[r] += np.einsum("mq,mq->", w, G[..., 0, 0] + G[..., 1, 1])
    dA = dA / vol - Amat[None] * (divs / vol)[:, None, None]
    return _to_tensor(dA), dS / vol


def _check_inversion(problem: MicroProblem, y: np.ndarray) -> None:
    for b, F in zip(problem.disc.blocks, problem.disc.deformation_gradients(y)):
        d = det2(F)
        if d.min() <= 0:
            e = int(np.argmin(d.min(axis=1)))
            raise ElementInversionError(int(b.ids[e]), float(d.min()))


def micro_update(problem: MicroProblem, state: MicroState, g: np.ndarray) -> MicroState:
    """Move the cell by ``dw = (omega^pq + Pi^pq) g_pq``; ``FM`` becomes ``(I + g) FM``."""
    g = np.asarray(g, float)
    dw = state.y @ g.T
    if state.correctors is not None:
        dw = dw + np.einsum("Mnc,M->nc", state.correctors,
                            np.array([g[p, q] for p, q in MODES]))
    y = state.y + dw
    _check_inversion(problem, y)
    return MicroState(y, (np.eye(2) + g) @ state.FM)


@dataclass(eq=False)
class EquilibriumResult:
    state: MicroState
    system: MicroSystem
    iterations: int
    norms: list
    correction: np.ndarray


def equilibrate(problem: MicroProblem, state: MicroState, solver=None,
                eps: float | None = None, max_iter: int | None = None) -> EquilibriumResult:
    """Newton iterations ``a_Y(dw, v) = -<sigma : grad v>`` until ``max|dw|`` is small.

    Returns the equilibrated state (without correctors), the system assembled
    on the final configuration, the iteration count, the correction norms and
    the accumulated reduced correction vector.
    """
    solver = solver or DirectSolver()
    eps = problem.eps if eps is None else eps
    max_iter = problem.max_iter if max_iter is None else max_iter
    y = state.y
    norms = []
    total = np.zeros(problem.n_red)
    for j in range(max_iter + 1):
        system = assemble_tangent(problem, y)
        if norms and norms[-1] <= eps:
            break
        if j == max_iter:
            last = f"{norms[-1]:.3e}" if norms else "n/a"
            raise MicroConvergenceError(
                f"equilibrium not reached in {max_iter} iterations (last |dw| = {last})", norms)
        dx = np.asarray(solver.factor(system.K)(system.r))
        total += dx
        du = problem.cell.expand(dx)
        norms.append(float(np.abs(du).max()) / problem.length)
        if not np.isfinite(norms[-1]):
            raise MicroConvergenceError("equilibrium iteration diverged", norms)
        y = y + du
    return EquilibriumResult(MicroState(y, state.FM), system, len(norms), norms, total)


def _advance(problem, state, target, solver, info, level, keep):
    """Drive ``state`` to macroscopic deformation ``target``; halve on failure."""
    g = target @ np.linalg.inv(state.FM) - np.eye(2)
    try:
        prov = micro_update(problem, state, g)
        eq = equilibrate(problem, prov, solver)
    except (ElementInversionError, MicroConvergenceError):
        if level >= problem.max_levels:
            raise
        info.substeps += 1
        mid = state.FM + 0.5 * (target - state.FM)
        half = _advance(problem, state, mid, solver, info, level + 1, keep)
        return _advance(problem, half[0], target, solver, info, level + 1, keep)
    info.equilibrium_iterations += eq.iterations
    info.factorizations += eq.iterations + 1
    info.norms.extend(eq.norms)
    keep.append(eq.correction)
    corr = solve_correctors(problem, eq.system, solver=solver)
    H = _xi_gradients(problem, eq.system, corr)
    coeffs = homogenized_coefficients(problem, eq.system, corr, H)
    return MicroState(eq.state.y, eq.state.FM, corr, coeffs), eq.system, H


def micro_step(problem: MicroProblem, state: MicroState, g, sensitivities: bool = True,
               solver=None) -> tuple[CoefficientSet, MicroState, StepInfo]:
    """Update, equilibrate, solve correctors, and evaluate coefficients.

    Parameters
    ----------
    problem : MicroProblem
    state : MicroState
        Starting state; not modified.
    g : array_like, shape (2, 2)
        Macroscopic displacement-gradient increment on the current cell.
    sensitivities : bool
        Also evaluate ``dA`` and ``dS``.
    solver : DirectSolver or GalerkinSolver, optional

    Returns
    -------
    coeffs, new_state, info
        ``info.correction`` holds the reduced equilibrium corrections.
    """
    solver = solver or DirectSolver()
    info = StepInfo(steps=1)
    target = (np.eye(2) + np.asarray(g, float)) @ state.FM
    keep: list = []
    try:
        new, system, H = _advance(problem, state, target, solver, info, 0, keep)
    except ElementInversionError as exc:
        raise MicroError(f"micro cell inverted: {exc}") from exc
    except MicroConvergenceError as exc:
        raise MicroError(str(exc)) from exc
    coeffs = new.coeffs
    if sensitivities:
        dA, dS = coefficient_sensitivities(problem, system, new.correctors, coeffs, H)
        coeffs = replace(coeffs, dA=dA, dS=dS)
        new = replace(new, coeffs=coeffs)
    info.correction = np.sum(keep, axis=0) if keep else np.zeros(problem.n_red)
    return coeffs, new, info
