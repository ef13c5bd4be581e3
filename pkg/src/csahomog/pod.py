"""Proper orthogonal decomposition of micro solutions and reduced micro solves.

Offline, the cell is driven along strain ramps and the periodic correctors
and equilibrium corrections of every step are collected as columns of ``V``.
The basis consists of the leading eigenvectors of ``V V^T``, computed through
the small ``V^T V`` problem unless the dense path is requested. Online, every
linear solve of a micro step is replaced by a Galerkin solve on ``Phi``.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
from pathlib import Path
import struct

import numpy as np
from scipy import linalg as sla

from .backends import BackendFailure, CoefficientField
from .csa import polar_decompose, rotate2, rotate4
from .micro import (CoefficientSet, GalerkinSolver, MicroError, MicroProblem, MicroState,
                    StepInfo, micro_step)

__all__ = ["RAMP_MODES", "SnapshotBank", "ReducedBasis", "generate_snapshots",
           "build_basis", "truncation_rank", "reduced_micro_step", "save_basis",
           "load_basis", "PODBackend", "PODError"]

log = logging.getLogger(__name__)

MAGIC = b"CSAPOD01"
SNAPSHOTS_PER_STEP = 5


class PODError(RuntimeError):
    pass


def _ramp_direction(mode: str) -> np.ndarray:
    p, q = int(mode[0]) - 1, int(mode[1]) - 1
    E = np.zeros((2, 2))
    E[p, q] = E[q, p] = 1.0
    return E


RAMP_MODES = ("11", "22", "12")


@dataclass
class SnapshotBank:
    """Snapshot matrix ``V`` (n_red, ncol) with a label per column.

    Labels are ``(mode, sign, step, kind)`` where ``kind`` is ``0..3`` for
    the correctors and ``4`` for the equilibrium correction of the step.
    """

    V: np.ndarray
    labels: list
    bounds: dict
    n_steps: int


def generate_snapshots(problem: MicroProblem, bounds=0.015, n_steps: int = 10,
                       modes=RAMP_MODES, solver=None) -> SnapshotBank:
    """Drive the cell along ``F(k) = I + k/(n_steps-1) eps E^pq`` for each mode and sign.

    ``bounds`` is either a scalar magnitude or a mapping ``mode -> (min, max)``.
    The shear direction is the symmetric ``E^12 + E^21`` so that every ramp
    state is a pure stretch.
    """
    if n_steps < 2:
        raise ValueError("n_steps must be at least 2")
    if np.isscalar(bounds):
        bounds = {m: (-float(bounds), float(bounds)) for m in modes}
    cols, labels = [], []
    cell = problem.cell
    for mode in modes:
        lo, hi = bounds[mode]
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise ValueError(f"ramp bounds for mode {mode} must be finite")
        E = _ramp_direction(mode)
        for sign, eps in (("min", lo), ("max", hi)):
            state = problem.initial_state()
            for k in range(n_steps):
                target = np.eye(2) + k / (n_steps - 1) * eps * E
                g = target @ np.linalg.inv(state.FM) - np.eye(2)
                try:
                    _, state, info = micro_step(problem, state, g, sensitivities=False,
                                                solver=solver)
                except MicroError as exc:
                    raise PODError(f"ramp {mode}/{sign} failed at strain "
                                   f"{k / (n_steps - 1) * eps!r}: {exc}") from exc
                cols.extend(cell.restrict(state.correctors))
                cols.append(info.correction)
                labels.extend((mode, sign, k, j) for j in range(SNAPSHOTS_PER_STEP))
    V = np.array(cols).T
    return SnapshotBank(V, labels, dict(bounds), n_steps)


@dataclass
class ReducedBasis:
    """Orthonormal columns ``Phi`` (N, M) and the full descending spectrum."""

    Phi: np.ndarray
    eigenvalues: np.ndarray
    delta: float
    checksum: str = ""

    @property
    def N(self) -> int:
        return self.Phi.shape[0]

    @property
    def M(self) -> int:
        return self.Phi.shape[1]

    def tail_ratio(self, M: int | None = None) -> float:
        lam = self.eigenvalues
        M = self.M if M is None else M
        total = lam.sum()
        return float(np.sqrt(lam[M:].sum() / total)) if total > 0 else 0.0


def truncation_rank(eigenvalues: np.ndarray, delta: float, rank: int) -> int:
    """Smallest ``M <= rank`` with ``sqrt(sum_{l>M} lam / sum lam) < delta``.

    ``delta = 0`` keeps every numerically nonzero eigenvalue.
    """
    lam = np.asarray(eigenvalues, float)
    total = lam.sum()
    if rank == 0 or total <= 0:
        return 0
    if delta <= 0:
        return rank
    tail = np.concatenate([np.cumsum(lam[::-1])[::-1], [0.0]])
    ok = np.sqrt(np.maximum(tail, 0.0) / total) < delta
    return int(min(np.argmax(ok), rank))


def build_basis(bank: SnapshotBank | np.ndarray, delta: float, dense: bool = False,
                checksum: str = "") -> ReducedBasis:
    """Eigenpairs of ``V V^T`` truncated by the tail criterion.

    Parameters
    ----------
    bank : SnapshotBank or ndarray
    delta : float
        Tail tolerance; 0 keeps the numerical rank.
    dense : bool
        Solve the ``N x N`` problem directly instead of the snapshot problem.
    """
    V = bank.V if isinstance(bank, SnapshotBank) else np.asarray(bank, float)
    N, n = V.shape
    if n == 0:
        raise ValueError("empty snapshot bank")
    if dense:
        lam, vec = np.linalg.eigh(V @ V.T)
    else:
        lam, vec = np.linalg.eigh(V.T @ V)
    lam, vec = lam[::-1], vec[:, ::-1]
    lam = np.maximum(lam, 0.0)
    tol = lam[0] * max(N, n) * np.finfo(float).eps if len(lam) else 0.0
    rank = int(np.sum(lam > tol)) if lam[0] > 0 else 0
    M = truncation_rank(lam, delta, rank)
    if rank == 0:
        log.warning("all snapshots vanish; the reduced basis is empty")
    if dense:
        Phi = vec[:, :M]
    else:
        Phi = V @ vec[:, :M] / np.sqrt(lam[:M])
        # one reorthogonalisation pass; lifting loses orthogonality for small lam
        Q, R = np.linalg.qr(Phi)
        Phi = Q * np.sign(np.diag(R))
    spectrum = np.zeros(min(N, n) if not dense else N)
    k = min(len(spectrum), len(lam))
    spectrum[:k] = lam[:k]
    return ReducedBasis(np.ascontiguousarray(Phi), spectrum, float(delta), checksum)


def reduced_micro_step(problem: MicroProblem, state: MicroState, g, basis: ReducedBasis,
                       sensitivities: bool = False):
    """Micro step with every inner linear solve replaced by a Galerkin solve on the basis."""
    if basis.N != problem.n_red:
        raise PODError(f"basis has {basis.N} rows but the cell has {problem.n_red} unknowns")
    try:
        return micro_step(problem, state, g, sensitivities, solver=GalerkinSolver(basis.Phi))
    except (MicroError, np.linalg.LinAlgError, sla.LinAlgError) as exc:
        raise PODError(f"reduced micro step failed: {exc}") from exc


def save_basis(basis: ReducedBasis, path) -> None:
    """Binary sidecar: magic, N, M, delta, checksum, spectrum, then ``Phi`` column-major."""
    cs = basis.checksum.encode().ljust(64, b"\0")[:64]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<qqdq", basis.N, basis.M, basis.delta, len(basis.eigenvalues)))
        fh.write(cs)
        fh.write(np.asarray(basis.eigenvalues, "<f8").tobytes())
        fh.write(np.asarray(basis.Phi, "<f8").tobytes(order="F"))


def load_basis(path, checksum: str | None = None) -> ReducedBasis:
    """Read a sidecar; with ``checksum`` given, reject a basis built for another cell."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise PODError(f"{path}: not a POD basis file")
    N, M, delta, ne = struct.unpack_from("<qqdq", data, 8)
    off = 8 + 32
    cs = data[off:off + 64].rstrip(b"\0").decode()
    off += 64
    lam = np.frombuffer(data, "<f8", ne, off).copy()
    off += 8 * ne
    if len(data) != off + 8 * N * M:
        raise PODError(f"{path}: truncated basis file")
    Phi = np.frombuffer(data, "<f8", N * M, off).reshape((N, M), order="F").copy()
    if checksum is not None and cs != checksum:
        raise PODError(f"{path}: basis built for mesh {cs[:12]}, cell is {checksum[:12]}")
    return ReducedBasis(Phi, lam, delta, cs)


class PODBackend:
    """Coefficient backend with one reduced micro state per quadrature point.

    Each point is driven to the stretch ``U`` of ``F = R U`` (the training
    ramps are pure stretches) and the coefficients are rotated by ``R``.
    """

    name = "pod"

    def __init__(self, problem: MicroProblem, basis: ReducedBasis, n_qp: int):
        self.problem = problem
        self.basis = basis
        self.info = StepInfo()
        self.states = [problem.initial_state()] * n_qp
        _, s0, info = reduced_micro_step(problem, self.states[0], np.zeros((2, 2)), basis)
        self.info.add(info)
        self.states = [s0] * n_qp

    def get_coefficients(self, F: np.ndarray) -> CoefficientField:
        R, U = polar_decompose(F)
        n = len(self.states)
        A = np.empty((n, 2, 2, 2, 2))
        S = np.empty((n, 2, 2))
        solved = 0
        for q in range(n):
            st = self.states[q]
            if not np.array_equal(U[q], st.FM):
                g = U[q] @ np.linalg.inv(st.FM) - np.eye(2)
                try:
                    _, st, info = reduced_micro_step(self.problem, st, g, self.basis)
                except PODError as exc:
                    raise BackendFailure(q, exc) from exc
                self.info.add(info)
                self.states[q] = st
                solved += info.steps
            c: CoefficientSet = st.coeffs
            A[q] = rotate4(R[q], c.A)
            S[q] = rotate2(R[q], c.S)
        self.info.steps += n - solved
        return CoefficientField(A, S, 0, n)
