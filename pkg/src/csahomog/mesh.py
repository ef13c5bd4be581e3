"""Mesh container, text IO, quadrature, shape functions and periodic pairing.

Both scales use the same representation: a 2D mesh of ``tri3`` and ``quad4``
elements with integer region tags and optional tagged boundary facets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
import hashlib

import numpy as np

__all__ = [
    "ELEMENT_NODES",
    "MeshError",
    "ElementInversionError",
    "Mesh",
    "QuadratureRule",
    "PeriodicCell",
    "build_quadrature",
    "shape_functions",
    "shape_gradients",
    "load_mesh",
    "parse_mesh",
    "write_mesh",
    "format_mesh",
    "match_periodic",
    "displace",
]

ELEMENT_NODES = {"tri3": 3, "quad4": 4}


class MeshError(ValueError):
    """Malformed mesh input or violated mesh invariant."""


class ElementInversionError(MeshError):
    """An element Jacobian became nonpositive."""

    def __init__(self, element: int, det: float):
        super().__init__(f"element {element} inverted (min det J = {det:.6e})")
        self.element = element
        self.det = det


@dataclass(frozen=True)
class QuadratureRule:
    """Points on the reference element and their positive weights."""

    kind: str
    points: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return len(self.weights)


def build_quadrature(kind: str) -> QuadratureRule:
    """Return the default rule: 3-point symmetric for tri3, 2x2 Gauss for quad4."""
    if kind == "tri3":
        pts = np.array([[1 / 6, 1 / 6], [2 / 3, 1 / 6], [1 / 6, 2 / 3]])
        return QuadratureRule(kind, pts, np.full(3, 1 / 6))
    if kind == "quad4":
        a = 1 / np.sqrt(3.0)
        pts = np.array([[-a, -a], [a, -a], [a, a], [-a, a]])
        return QuadratureRule(kind, pts, np.ones(4))
    raise MeshError(f"unknown element kind {kind!r}")


def shape_functions(kind: str, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(npts, nen)`` and reference derivatives ``(npts, nen, 2)``."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    s, t = xi[:, 0], xi[:, 1]
    if kind == "tri3":
        N = np.stack([1 - s - t, s, t], axis=1)
        dN = np.broadcast_to(
            np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]), (len(s), 3, 2)
        ).copy()
        return N, dN
    if kind == "quad4":
        sx = np.array([-1.0, 1.0, 1.0, -1.0])
        tx = np.array([-1.0, -1.0, 1.0, 1.0])
        N = 0.25 * (1 + np.outer(s, sx)) * (1 + np.outer(t, tx))
        dN = np.empty((len(s), 4, 2))
        dN[:, :, 0] = 0.25 * sx * (1 + np.outer(t, tx))
        dN[:, :, 1] = 0.25 * tx * (1 + np.outer(s, sx))
        return N, dN
    raise MeshError(f"unknown element kind {kind!r}")


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable 2D mesh.

    Attributes
    ----------
    nodes : ndarray, shape (n, 2)
        Node coordinates.
    conn : ndarray, shape (m, 4)
        Connectivity, padded with -1 for tri3 elements.
    kinds : tuple of str
        Element kind per element.
    regions : ndarray, shape (m,)
        Region tag per element.
    facets : ndarray, shape (k, 2)
        Boundary facet node pairs.
    facet_tags : ndarray, shape (k,)
        Tag per facet.
    """

    nodes: np.ndarray
    conn: np.ndarray
    kinds: tuple
    regions: np.ndarray
    facets: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=int))
    facet_tags: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.kinds)

    @property
    def dim(self) -> int:
        return 2

    @cached_property
    def blocks(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """Elements grouped by kind: ``(kind, element_ids, conn_block)``."""
        out = []
        kinds = np.asarray(self.kinds)
        for kind in ("tri3", "quad4"):
            ids = np.flatnonzero(kinds == kind)
            if len(ids):
                out.append((kind, ids, self.conn[ids, : ELEMENT_NODES[kind]]))
        return out

    def element_nodes(self, e: int) -> np.ndarray:
        return self.conn[e, : ELEMENT_NODES[self.kinds[e]]]

    def facet_nodes(self, tag: int) -> np.ndarray:
        """Sorted unique node ids on facets carrying ``tag``."""
        return np.unique(self.facets[self.facet_tags == tag])

    def with_nodes(self, nodes: np.ndarray) -> "Mesh":
        return Mesh(np.asarray(nodes, float), self.conn, self.kinds, self.regions,
                    self.facets, self.facet_tags)

    def checksum(self) -> str:
        """SHA-256 over the exact text serialization."""
        return hashlib.sha256(format_mesh(self).encode()).hexdigest()

    def min_jacobians(self) -> np.ndarray:
        """Minimum Jacobian determinant over the quadrature points of each element."""
        out = np.empty(self.n_elements)
        for kind, ids, cb in self.blocks:
            rule = build_quadrature(kind)
            _, dN = shape_functions(kind, rule.points)
            X = self.nodes[cb]
            J = np.einsum("qad,mai->mqid", dN, X)
            det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
            out[ids] = det.min(axis=1)
        return out

    def check_jacobians(self) -> None:
        det = self.min_jacobians()
        if len(det) and det.min() <= 0:
            e = int(np.argmin(det))
            raise ElementInversionError(e, float(det[e]))


def shape_gradients(mesh: Mesh, element_index: int, ref_point) -> tuple[np.ndarray, float]:
    """Physical gradients ``(nen, 2)`` of the element basis and det J at a reference point."""
    kind = mesh.kinds[element_index]
    _, dN = shape_functions(kind, np.asarray(ref_point, float))
    X = mesh.nodes[mesh.element_nodes(element_index)]
    J = X.T @ dN[0]
    det = float(np.linalg.det(J))
    if det <= 0:
        raise ElementInversionError(element_index, det)
    return dN[0] @ np.linalg.inv(J), det


# --------------------------------------------------------------------- text IO


def parse_mesh(text: str, source: str = "<string>") -> Mesh:
    """Parse the plain-text mesh format."""
    lines = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].strip()
        if body:
            lines.append((lineno, body.split()))
    pos = 0

    def fail(lineno, msg):
        raise MeshError(f"{source}:{lineno}: {msg}")

    def header(name):
        nonlocal pos
        if pos >= len(lines):
            fail(lines[-1][0] if lines else 0, f"expected '{name} <count>'")
        lineno, tok = lines[pos]
        if len(tok) != 2 or tok[0] != name:
            fail(lineno, f"expected '{name} <count>', got {' '.join(tok)!r}")
        try:
            count = int(tok[1])
        except ValueError:
            fail(lineno, f"bad count {tok[1]!r}")
        pos += 1
        if pos + count > len(lines):
            fail(lineno, f"{name}: expected {count} records, file ends early")
        return count

    def check_id(lineno, tok, expect):
        try:
            ident = int(tok)
        except ValueError:
            fail(lineno, f"bad id {tok!r}")
        if ident != expect:
            fail(lineno, f"id {ident} out of sequence (expected {expect})")

    n = header("nodes")
    nodes = np.empty((n, 2))
    for i in range(n):
        lineno, tok = lines[pos + i]
        if len(tok) != 3:
            fail(lineno, "node record needs 'id x y'")
        check_id(lineno, tok[0], i)
        try:
            nodes[i] = float(tok[1]), float(tok[2])
        except ValueError:
            fail(lineno, "bad coordinate")
    pos += n

    m = header("elements")
    conn = np.full((m, 4), -1, dtype=np.int64)
    kinds, regions = [], np.empty(m, dtype=np.int64)
    for e in range(m):
        lineno, tok = lines[pos + e]
        check_id(lineno, tok[0], e)
        kind = tok[1] if len(tok) > 1 else ""
        if kind not in ELEMENT_NODES:
            fail(lineno, f"unknown element kind {kind!r}")
        nen = ELEMENT_NODES[kind]
        if len(tok) != nen + 3:
            fail(lineno, f"{kind} record needs {nen} nodes and a region tag")
        try:
            ids = [int(t) for t in tok[2: 2 + nen]]
            regions[e] = int(tok[-1])
        except ValueError:
            fail(lineno, "bad integer")
        for a in ids:
            if a < 0 or a >= n:
                fail(lineno, f"element {e} references node {a} of {n}")
        conn[e, :nen] = ids
        kinds.append(kind)
    pos += m

    facets = np.zeros((0, 2), dtype=np.int64)
    ftags = np.zeros(0, dtype=np.int64)
    if pos < len(lines):
        k = header("facets")
        facets = np.empty((k, 2), dtype=np.int64)
        ftags = np.empty(k, dtype=np.int64)
        for f in range(k):
            lineno, tok = lines[pos + f]
            if len(tok) != 4:
                fail(lineno, "facet record needs 'id n1 n2 tag'")
            check_id(lineno, tok[0], f)
            try:
                a, b, ftags[f] = int(tok[1]), int(tok[2]), int(tok[3])
            except ValueError:
                fail(lineno, "bad integer")
            for c in (a, b):
                if c < 0 or c >= n:
                    fail(lineno, f"facet {f} references node {c} of {n}")
            facets[f] = a, b
        pos += k
        if pos < len(lines):
            fail(lines[pos][0], "trailing content after facets")

    mesh = Mesh(nodes, conn, tuple(kinds), regions, facets, ftags)
    det = mesh.min_jacobians()
    if m and det.min() <= 0:
        e = int(np.argmin(det))
        raise MeshError(f"{source}: element {e} has nonpositive Jacobian ({det[e]:.6e})")
    return mesh


def load_mesh(path) -> Mesh:
    path = Path(path)
    return parse_mesh(path.read_text(encoding="utf-8"), str(path))


def format_mesh(mesh: Mesh) -> str:
    out = [f"nodes {mesh.n_nodes}"]
    out += [f"{i} {x!r} {y!r}" for i, (x, y) in enumerate(mesh.nodes.tolist())]
    out.append(f"elements {mesh.n_elements}")
    for e, kind in enumerate(mesh.kinds):
        ids = " ".join(str(a) for a in mesh.element_nodes(e))
        out.append(f"{e} {kind} {ids} {int(mesh.regions[e])}")
    if len(mesh.facets):
        out.append(f"facets {len(mesh.facets)}")
        out += [f"{f} {a} {b} {t}" for f, ((a, b), t)
                in enumerate(zip(mesh.facets.tolist(), mesh.facet_tags.tolist()))]
    return "\n".join(out) + "\n"


def write_mesh(mesh: Mesh, path) -> None:
    Path(path).write_text(format_mesh(mesh), encoding="utf-8")


def displace(mesh: Mesh, u) -> Mesh:
    """Return a copy with nodes shifted by ``u`` (flat or ``(n, 2)``)."""
    u = np.asarray(u, float).reshape(mesh.n_nodes, 2)
    out = mesh.with_nodes(mesh.nodes + u)
    out.check_jacobians()
    return out


# ----------------------------------------------------------------- periodicity


@dataclass(frozen=True, eq=False)
class PeriodicCell:
    """Periodic DOF map on a rectangular cell.

    ``master[a]`` is the node whose values node ``a`` copies (itself for
    masters). The corner master is the anchor whose DOFs are pinned.
    """

    mesh: Mesh
    master: np.ndarray
    anchor: int
    origin: np.ndarray
    period: np.ndarray

    @cached_property
    def pairings(self) -> np.ndarray:
        """``(n_pairs, 2)`` array of (master_dof, slave_dof)."""
        slaves = np.flatnonzero(self.master != np.arange(len(self.master)))
        m = self.master[slaves]
        return np.stack([np.concatenate([2 * m, 2 * m + 1]),
                         np.concatenate([2 * slaves, 2 * slaves + 1])], axis=1)

    @property
    def anchor_dofs(self) -> tuple[int, int]:
        return (2 * self.anchor, 2 * self.anchor + 1)

    @cached_property
    def reduced_index(self) -> np.ndarray:
        """Reduced equation number for each full DOF, -1 for the pinned anchor."""
        masters = np.unique(self.master)
        masters = masters[masters != self.anchor]
        node_eq = np.full(len(self.master), -1, dtype=np.int64)
        node_eq[masters] = np.arange(len(masters))
        eq = node_eq[self.master]
        out = np.full(2 * len(self.master), -1, dtype=np.int64)
        ok = eq >= 0
        out[0::2][ok] = 2 * eq[ok]
        out[1::2][ok] = 2 * eq[ok] + 1
        return out

    @property
    def n_reduced(self) -> int:
        return int(self.reduced_index.max()) + 1

    def expand(self, x: np.ndarray) -> np.ndarray:
        """Reduced vector(s) ``(..., n_red)`` to nodal fields ``(..., n, 2)``."""
        x = np.asarray(x)
        idx = self.reduced_index
        pad = np.concatenate([x, np.zeros(x.shape[:-1] + (1,))], axis=-1)
        full = pad[..., np.where(idx >= 0, idx, x.shape[-1])]
        return full.reshape(x.shape[:-1] + (len(self.master), 2))

    def restrict(self, u: np.ndarray) -> np.ndarray:
        """Nodal field(s) ``(..., n, 2)`` to reduced vectors by reading master values."""
        u = np.asarray(u)
        flat = u.reshape(u.shape[:-2] + (-1,))
        idx = self.reduced_index
        out = np.zeros(u.shape[:-2] + (self.n_reduced,))
        sel = np.flatnonzero(idx >= 0)
        out[..., idx[sel]] = flat[..., sel]
        return out


def match_periodic(mesh: Mesh, tolerance: float = 1e-8) -> PeriodicCell:
    """Pair opposite faces of the bounding box and collapse the corners.

    Parameters
    ----------
    mesh : Mesh
        Cell mesh filling a rectangle.
    tolerance : float
        Matching tolerance relative to the cell edge length.
    """
    X = mesh.nodes
    lo, hi = X.min(axis=0), X.max(axis=0)
    period = hi - lo
    tol = tolerance * period.max()
    n = len(X)
    master = np.arange(n)
    for axis in (0, 1):
        other = 1 - axis
        lo_ids = np.flatnonzero(np.abs(X[:, axis] - lo[axis]) <= tol)
        hi_ids = np.flatnonzero(np.abs(X[:, axis] - hi[axis]) <= tol)
        order = np.argsort(X[lo_ids, other], kind="stable")
        lo_sorted = lo_ids[order]
        keys = X[lo_sorted, other]
        for s in hi_ids:
            j = np.searchsorted(keys, X[s, other])
            cands = [c for c in (j - 1, j) if 0 <= c < len(keys)]
            best = min(cands, key=lambda c: abs(keys[c] - X[s, other])) if cands else None
            if best is None or abs(keys[best] - X[s, other]) > tol:
                raise MeshError(
                    f"unmatched boundary node {s} at ({X[s, 0]!r}, {X[s, 1]!r})")
            master[s] = lo_sorted[best]
        if len(lo_ids) != len(hi_ids):
            # every low-face node must be hit too
            hit = set(master[hi_ids].tolist())
            for s in lo_ids:
                if s not in hit:
                    raise MeshError(
                        f"unmatched boundary node {s} at ({X[s, 0]!r}, {X[s, 1]!r})")
    # resolve chains (corners map twice)
    for _ in range(3):
        master = master[master]
    corner = np.flatnonzero(np.all(np.abs(X - lo) <= tol, axis=1))
    if len(corner) != 1:
        raise MeshError("cell has no unique lower-left corner node")
    anchor = int(corner[0])
    if np.count_nonzero(master == anchor) != 4:
        raise MeshError("corner nodes do not collapse to a single master")
    return PeriodicCell(mesh, master, anchor, lo.copy(), period)
