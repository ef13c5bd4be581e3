"""Clustering and sensitivity-based approximation of homogenized coefficients.

Macroscopic deformation states are the symmetric stretches ``e = U - I`` of the
polar decomposition ``F = R U`` at each macro quadrature point, written as
points ``(e11, e22, e12)`` in R^3. Each centroid is a ball of radius ``rho``
around a strain at which a micro problem was solved together with its
coefficient sensitivities; points inside one or more balls get blended
first-order extrapolations rotated back by ``R``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging

import numpy as np

from .backends import CoefficientField
from .micro import CoefficientSet, MicroError, MicroProblem, MicroState, StepInfo, micro_step

__all__ = [
    "StrainPoint",
    "Centroid",
    "CentroidRegistry",
    "CentroidFailure",
    "polar_decompose",
    "strain_coordinates",
    "strain_tensor",
    "classify",
    "kmeans",
    "cover_uncovered",
    "relative_deformation",
    "blend_weights",
    "rotate2",
    "rotate4",
    "approximate_coefficients",
    "approximate_microstructure",
    "CSABackend",
]

log = logging.getLogger(__name__)

_METRIC_SCALE = {"plain": 1.0, "tensor": float(np.sqrt(2.0))}


def polar_decompose(F) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(R, U)`` with ``F = R U`` for ``(..., 2, 2)`` input, via eigh of ``F^T F``."""
    F = np.asarray(F, float)
    det = F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if np.any(det <= 0):
        raise ValueError("polar decomposition needs det F > 0")
    C = np.swapaxes(F, -1, -2) @ F
    lam, V = np.linalg.eigh(C)
    s = np.sqrt(lam)
    U = (V * s[..., None, :]) @ np.swapaxes(V, -1, -2)
    Uinv = (V / s[..., None, :]) @ np.swapaxes(V, -1, -2)
    return F @ Uinv, U


def strain_coordinates(U, metric: str = "plain") -> np.ndarray:
    """``U - I`` as points ``(e11, e22, c * e12)`` with ``c`` set by the metric."""
    U = np.asarray(U, float)
    c = _METRIC_SCALE[metric]
    return np.stack([U[..., 0, 0] - 1.0, U[..., 1, 1] - 1.0,
                     c * 0.5 * (U[..., 0, 1] + U[..., 1, 0])], axis=-1)


def strain_tensor(e, metric: str = "plain") -> np.ndarray:
    """Inverse of :func:`strain_coordinates`: symmetric ``(..., 2, 2)`` strain."""
    e = np.asarray(e, float)
    s = e[..., 2] / _METRIC_SCALE[metric]
    return np.stack([np.stack([e[..., 0], s], -1), np.stack([s, e[..., 1]], -1)], -2)


@dataclass(frozen=True)
class StrainPoint:
    e: np.ndarray
    R: np.ndarray
    qp_index: int = -1


@dataclass(eq=False)
class Centroid:
    """A solved micro state at strain ``center`` with its sensitivities."""

    id: int
    center: np.ndarray
    state: MicroState
    coeffs: CoefficientSet
    source: int
    info: StepInfo
    created: tuple = (-1, -1)


class CentroidFailure(RuntimeError):
    def __init__(self, center, source: int, cause: Exception):
        super().__init__(f"micro solve failed for centroid at {np.asarray(center).tolist()} "
                         f"driven from centroid {source}: {cause}")
        self.center = center
        self.source = source


@dataclass(eq=False)
class CentroidRegistry:
    """Append-only list of centroids sharing one radius."""

    rho: float
    seed: int = 0
    metric: str = "plain"
    centroids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.metric not in _METRIC_SCALE:
            raise ValueError(f"unknown strain metric {self.metric!r}")

    def __len__(self) -> int:
        return len(self.centroids)

    @property
    def centers(self) -> np.ndarray:
        if not self.centroids:
            return np.zeros((0, 3))
        return np.array([c.center for c in self.centroids])

    def append(self, c: Centroid) -> None:
        self.centroids.append(c)

    def table(self) -> str:
        """Text snapshot: one line per centroid."""
        lines = ["# id e11 e22 e12 source equilibrium_iterations factorizations substeps "
                 "step iter"]
        for c in self.centroids:
            e = " ".join(repr(float(v)) for v in c.center)
            lines.append(f"{c.id} {e} {c.source} {c.info.equilibrium_iterations} "
                         f"{c.info.factorizations} {c.info.substeps} {c.created[0]} {c.created[1]}")
        return "\n".join(lines) + "\n"


def _distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=-1)


def classify(points: np.ndarray, registry: CentroidRegistry) -> tuple[list, np.ndarray]:
    """Index sets of balls strictly containing each point, and the uncovered point indices."""
    points = np.atleast_2d(points)
    if not len(registry):
        return [np.zeros(0, dtype=int) for _ in points], np.arange(len(points))
    d = _distances(points, registry.centers)
    inside = d < registry.rho
    sets = [np.flatnonzero(row) for row in inside]
    return sets, np.flatnonzero(~inside.any(axis=1))


def kmeans(E: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from k-means++ seeds; returns ``(centers, labels)``."""
    n = len(E)
    centers = np.empty((k, E.shape[1]))
    centers[0] = E[rng.integers(n)]
    d2 = np.sum((E - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = E[idx]
        d2 = np.minimum(d2, np.sum((E - centers[j]) ** 2, axis=1))
    labels = None
    for _ in range(max_iter):
        new = np.argmin(_distances(E, centers), axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = E[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers, labels


def cover_uncovered(E: np.ndarray, rho: float, seed: int = 0) -> np.ndarray:
    """Smallest-k K-means cover: every point within ``rho`` (strict) of its center.

    Centers are returned in lexicographic order.
    """
    E = np.atleast_2d(np.asarray(E, float))
    n_distinct = len(np.unique(E, axis=0))
    for k in range(1, n_distinct + 1):
        rng = np.random.default_rng([seed, k])
        centers, labels = kmeans(E, k, rng)
        if np.all(np.linalg.norm(E - centers[labels], axis=1) < rho):
            break
    else:  # pragma: no cover - k = n_distinct always covers
        centers = np.unique(E, axis=0)
    centers = np.unique(centers, axis=0)
    return centers[np.lexsort(centers.T[::-1])]


def relative_deformation(e_hat, e_c) -> np.ndarray:
    """``g = (e_hat + I)(e_c + I)^{-1} - I`` for 2x2 strain tensors."""
    I = np.eye(2)
    return (np.asarray(e_hat) + I) @ np.linalg.inv(np.asarray(e_c) + I) - I


def blend_weights(e, index_set, registry: CentroidRegistry) -> np.ndarray:
    """Normalised ``(rho - |e - e_c|)^2`` over the balls in ``index_set``."""
    centers = registry.centers[np.asarray(index_set, dtype=int)]
    d = (registry.rho - np.linalg.norm(centers - np.asarray(e), axis=1)) ** 2
    return d / d.sum()


def rotate2(R, S) -> np.ndarray:
    return np.einsum("...ip,...jq,...pq->...ij", R, R, S)


def rotate4(R, A) -> np.ndarray:
    return np.einsum("...ip,...jq,...kr,...ls,...pqrs->...ijkl", R, R, R, R, A)


def _extrapolate(c: Centroid, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gs = 0.5 * (g + g.T)
    coef = np.array([gs[0, 0], gs[1, 1], 2.0 * gs[0, 1]])
    A = c.coeffs.A + np.tensordot(coef, c.coeffs.dA, axes=1)
    S = c.coeffs.S + np.tensordot(coef, c.coeffs.dS, axes=1)
    return A, S


def _members(point: StrainPoint, registry: CentroidRegistry, index_set=None):
    if index_set is None:
        index_set, _ = classify(point.e[None], registry)
        index_set = index_set[0]
    if len(index_set) == 0:
        j = int(np.argmin(np.linalg.norm(registry.centers - point.e, axis=1)))
        log.warning("strain %s not covered; using nearest centroid %d", point.e.tolist(), j)
        return np.array([j]), np.ones(1)
    return np.asarray(index_set), blend_weights(point.e, index_set, registry)


def approximate_coefficients(point: StrainPoint, registry: CentroidRegistry,
                             index_set=None) -> CoefficientSet:
    """Blend first-order extrapolations from the covering centroids, then rotate by ``R``."""
    idx, w = _members(point, registry, index_set)
    e_hat = strain_tensor(point.e, registry.metric)
    A = np.zeros((2, 2, 2, 2))
    S = np.zeros((2, 2))
    for j, wj in zip(idx, w):
        c = registry.centroids[j]
        g = relative_deformation(e_hat, strain_tensor(c.center, registry.metric))
        Aj, Sj = _extrapolate(c, g)
        A += wj * Aj
        S += wj * Sj
    return CoefficientSet(rotate4(point.R, A), rotate2(point.R, S))


def approximate_microstructure(point: StrainPoint, registry: CentroidRegistry,
                               index_set=None) -> np.ndarray:
    """Blended, rotated nodal coordinates of the reconstructed cell."""
    from .micro import MODES

    idx, w = _members(point, registry, index_set)
    e_hat = strain_tensor(point.e, registry.metric)
    y = 0.0
    for j, wj in zip(idx, w):
        c = registry.centroids[j]
        g = relative_deformation(e_hat, strain_tensor(c.center, registry.metric))
        yj = c.state.y + c.state.y @ g.T
        yj = yj + np.einsum("Mnc,M->nc", c.state.correctors,
                            np.array([g[p, q] for p, q in MODES]))
        y = y + wj * yj
    center = y.mean(axis=0)
    return (y - center) @ np.asarray(point.R).T + center


class CSABackend:
    """Coefficient backend that grows a centroid registry on demand.

    Parameters
    ----------
    problem : MicroProblem
    rho : float
        Ball radius in strain space.
    seed : int
        Seed for the K-means initialisation.
    metric : {"plain", "tensor"}
        Weight of the shear coordinate.
    threads : int
        Parallel centroid solves.
    """

    name = "csa"

    def __init__(self, problem: MicroProblem, rho: float, seed: int = 0,
                 metric: str = "plain", threads: int = 1):
        self.problem = problem
        self.registry = CentroidRegistry(rho, seed, metric)
        self.threads = max(1, int(threads))
        self.info = StepInfo()
        self.tag = (-1, -1)
        self.last_sets: list = []

    def _solve(self, center: np.ndarray, source: Centroid):
        metric = self.registry.metric
        Ul = np.eye(2) + strain_tensor(center, metric)
        Um = np.eye(2) + strain_tensor(source.center, metric)
        g = Ul @ np.linalg.inv(Um) - np.eye(2)
        try:
            coeffs, state, info = micro_step(self.problem, source.state, g)
        except MicroError as exc:
            raise CentroidFailure(center, source.id, exc) from exc
        return coeffs, state, info

    def _seed(self) -> None:
        coeffs, state, info = micro_step(self.problem, self.problem.initial_state(),
                                         np.zeros((2, 2)))
        self.info.add(info)
        self.registry.append(Centroid(0, np.zeros(3), state, coeffs, -1, info, self.tag))

    def grow(self, e: np.ndarray) -> int:
        """Create centroids until every point of ``e`` is covered; return how many."""
        n0 = len(self.registry)
        if not n0:
            self._seed()
        _, unc = classify(e, self.registry)
        if not len(unc):
            return len(self.registry) - n0
        reg = self.registry
        centers = cover_uncovered(e[unc], reg.rho, reg.seed + len(reg))
        existing = reg.centers
        sources = [reg.centroids[int(np.argmin(np.linalg.norm(existing - c, axis=1)))]
                   for c in centers]
        if self.threads > 1 and len(centers) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(self._solve, centers, sources))
        else:
            results = [self._solve(c, s) for c, s in zip(centers, sources)]
        for c, s, (coeffs, state, info) in zip(centers, sources, results):
            self.info.add(info)
            reg.append(Centroid(len(reg), c, state, coeffs, s.id, info, self.tag))
        return len(self.registry) - n0

    def get_coefficients(self, F: np.ndarray) -> CoefficientField:
        R, U = polar_decompose(F)
        e = strain_coordinates(U, self.registry.metric)
        before = self.info.steps
        n_new = self.grow(e)
        sets, _ = classify(e, self.registry)
        self.last_sets = sets
        A = np.empty((len(F), 2, 2, 2, 2))
        S = np.empty((len(F), 2, 2))
        for q in range(len(F)):
            c = approximate_coefficients(StrainPoint(e[q], R[q], q), self.registry, sets[q])
            A[q], S[q] = c.A, c.S
        return CoefficientField(A, S, n_new, self.info.steps - before)
