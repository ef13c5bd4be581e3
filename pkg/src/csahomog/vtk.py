"""Legacy ASCII VTK unstructured-grid writer."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .mesh import ELEMENT_NODES, Mesh

_CELL_TYPE = {"tri3": 5, "quad4": 9}


def _as3(a: np.ndarray) -> np.ndarray:
    """Pad 2-vectors to 3-vectors and 2x2 tensors to 3x3."""
    a = np.asarray(a, float)
    if a.ndim == 2 and a.shape[1] == 2:
        return np.hstack([a, np.zeros((len(a), 1))])
    if a.ndim == 3 and a.shape[1:] == (2, 2):
        out = np.zeros((len(a), 3, 3))
        out[:, :2, :2] = a
        return out
    return a


def _section(name: str, a: np.ndarray) -> list[str]:
    a = _as3(a)
    if a.ndim == 1:
        return [f"SCALARS {name} double 1", "LOOKUP_TABLE default"] + [repr(float(v)) for v in a]
    if a.ndim == 2:
        return [f"VECTORS {name} double"] + [" ".join(repr(float(v)) for v in row) for row in a]
    if a.ndim == 3:
        lines = [f"TENSORS {name} double"]
        for t in a:
            lines += [" ".join(repr(float(v)) for v in row) for row in t]
        return lines
    raise ValueError(f"unsupported field shape {a.shape} for {name!r}")


def write_vtk(path, mesh: Mesh, point_data: dict | None = None,
              cell_data: dict | None = None, title: str = "csahomog") -> None:
    """Write nodes, cells and fields (scalars, 2/3-vectors, 2x2/3x3 tensors)."""
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {mesh.n_nodes} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in mesh.nodes.tolist()]
    size = sum(ELEMENT_NODES[k] + 1 for k in mesh.kinds)
    lines.append(f"CELLS {mesh.n_elements} {size}")
    for e in range(mesh.n_elements):
        ids = mesh.element_nodes(e)
        lines.append(f"{len(ids)} " + " ".join(map(str, ids)))
    lines.append(f"CELL_TYPES {mesh.n_elements}")
    lines += [str(_CELL_TYPE[k]) for k in mesh.kinds]
    if point_data:
        lines.append(f"POINT_DATA {mesh.n_nodes}")
        for name, a in point_data.items():
            lines += _section(name, a)
    if cell_data:
        lines.append(f"CELL_DATA {mesh.n_elements}")
        for name, a in cell_data.items():
            lines += _section(name, a)
    Path(path).write_text("\n".join(lines) + "\n")
