"""Generate the bundled mesh files under src/csahomog/data.

Cells are structured grids on the unit square with a centred circular
inclusion (region 2) in a matrix (region 1). Quads are split into two
triangles in a pattern mirrored about both midlines, or into four around a
centre node where a crossed split is requested.

    python scripts/make_meshes.py
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from csahomog.mesh import Mesh, write_mesh

DATA = Path(__file__).resolve().parents[1] / "src" / "csahomog" / "data"


def periodic_cell(n: int, radius: float = 0.3, crossed=(), single_region: bool = False) -> Mesh:
    """Unit-square cell with ``n x n`` quads, each split into triangles.

    Parameters
    ----------
    n : int
        Quads per edge.
    radius : float
        Inclusion radius.
    crossed : iterable of (i, j)
        Quads split into four triangles around an added centre node.
    single_region : bool
        Tag every element as matrix.
    """
    crossed = set(map(tuple, crossed))
    h = 1.0 / n
    xs = np.linspace(0.0, 1.0, n + 1)
    nodes = [(x, y) for y in xs for x in xs]
    nid = lambda i, j: j * (n + 1) + i  # noqa: E731
    tris = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = nid(i, j), nid(i + 1, j), nid(i + 1, j + 1), nid(i, j + 1)
            if (i, j) in crossed:
                m = len(nodes)
                nodes.append(((i + 0.5) * h, (j + 0.5) * h))
                tris += [(a, b, m), (b, c, m), (c, d, m), (d, a, m)]
            elif (i < n / 2) == (j < n / 2):
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    nodes = np.array(nodes)
    conn = np.full((len(tris), 4), -1, dtype=np.int64)
    conn[:, :3] = tris
    cent = nodes[conn[:, :3]].mean(axis=1)
    inside = np.hypot(cent[:, 0] - 0.5, cent[:, 1] - 0.5) < radius
    regions = np.where(inside & (not single_region), 2, 1)
    return Mesh(nodes, conn, ("tri3",) * len(tris), regions)


def fine_cell(radius: float = 0.3) -> Mesh:
    """Cell with 2160 nodes and 4166 triangles.

    A 38 x 38 grid gives 1521 nodes and 2888 triangles; crossing the 639
    quads nearest the inclusion interface adds one node and two triangles each.
    """
    n = 38
    ij = np.array([(i, j) for j in range(n) for i in range(n)])
    c = (ij + 0.5) / n
    dist = np.abs(np.hypot(c[:, 0] - 0.5, c[:, 1] - 0.5) - radius)
    order = np.lexsort((ij[:, 0], ij[:, 1], np.round(dist, 12)))
    return periodic_cell(n, radius, crossed=[tuple(ij[k]) for k in order[:639]])


def lshape(h: float = 0.05) -> Mesh:
    """L-shaped macro domain with 36 quads for ``h = 0.05``.

    Lower arm [0, 0.3] x [0, 0.2], upper arm [0, 0.15] x [0.2, 0.4].
    Facet tags: 1 on the left edge x = 0, 2 on the right edge x = 0.3.
    """
    nx, ny = round(0.3 / h), round(0.4 / h)
    keep = lambda i, j: (j < round(0.2 / h)) or (i < round(0.15 / h))  # noqa: E731
    index = {}
    nodes = []
    cells = []
    for j in range(ny):
        for i in range(nx):
            if not keep(i, j):
                continue
            ids = []
            for (a, b) in ((i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)):
                if (a, b) not in index:
                    index[(a, b)] = len(nodes)
                    nodes.append((round(a * h, 12), round(b * h, 12)))
                ids.append(index[(a, b)])
            cells.append(ids)
    nodes = np.array(nodes)
    facets, tags = [], []
    for j in range(ny):
        if (0, j) in index and (0, j + 1) in index:
            facets.append((index[(0, j)], index[(0, j + 1)]))
            tags.append(1)
    for j in range(ny):
        if (nx, j) in index and (nx, j + 1) in index:
            facets.append((index[(nx, j)], index[(nx, j + 1)]))
            tags.append(2)
    return Mesh(nodes, np.array(cells, dtype=np.int64), ("quad4",) * len(cells),
                np.ones(len(cells), dtype=np.int64), np.array(facets, dtype=np.int64),
                np.array(tags, dtype=np.int64))


def main() -> None:
    DATA.mkdir(parents=True, exist_ok=True)
    write_mesh(fine_cell(), DATA / "cell_2160.mesh")
    write_mesh(periodic_cell(30), DATA / "cell_961.mesh")
    write_mesh(periodic_cell(21), DATA / "cell_484.mesh")
    write_mesh(periodic_cell(8), DATA / "cell_81.mesh")
    write_mesh(lshape(), DATA / "lshape_36.mesh")
    write_mesh(lshape(0.1), DATA / "lshape_8.mesh")


if __name__ == "__main__":
    main()
