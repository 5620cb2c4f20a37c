"""Tetrahedral meshes, per-cell / per-node fields and their text I/O.

The mesh input format (``mesh-v1``)::

    mesh-v1
    # comments start with '#'
    N
    x y z          (N lines)
    M
    i j k l        (M lines, 0-based node indices)

Output goes to legacy ASCII VTK (``DATASET UNSTRUCTURED_GRID``, cell type 10).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError, FormatError, GeometryError

log = logging.getLogger(__name__)

REL_EPS = 1e-12

# local face -> node slots, ordered so that the normal points away from the
# opposite vertex for a positively oriented tetrahedron
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def _signed_volumes(nodes, cells):
    p0, p1, p2, p3 = (nodes[cells[:, k]] for k in range(4))
    return np.einsum("ij,ij->i", p1 - p0, np.cross(p2 - p0, p3 - p0)) / 6.0


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class Mesh:
    """Immutable tetrahedral mesh.

    Cells with negative orientation are repaired by swapping their last two
    node indices. Zero-volume cells raise :class:`GeometryError`.
    """

    def __init__(self, nodes, cells):
        nodes = np.asarray(nodes, dtype=float)
        cells = np.asarray(cells, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 3:
            raise ContractError(f"nodes must be (N, 3), got {nodes.shape}")
        if cells.ndim != 2 or cells.shape[1] != 4:
            raise ContractError(f"cells must be (M, 4), got {cells.shape}")
        if len(cells) == 0:
            raise GeometryError("mesh has no cells")
        if cells.min() < 0 or cells.max() >= len(nodes):
            raise GeometryError("cell node index out of range")
        srt = np.sort(cells, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            bad = int(np.nonzero(np.any(srt[:, 1:] == srt[:, :-1], axis=1))[0][0])
            raise GeometryError(f"cell {bad} repeats a node index")

        vol = _signed_volumes(nodes, cells)
        flip = vol < 0
        if np.any(flip):
            cells = cells.copy()
            cells[flip, 2], cells[flip, 3] = cells[flip, 3].copy(), cells[flip, 2].copy()
            vol = np.abs(vol)
        tol = REL_EPS * self._diag(nodes) ** 3
        if np.any(vol <= tol):
            bad = int(np.nonzero(vol <= tol)[0][0])
            raise GeometryError(f"cell {bad} has non-positive volume {vol[bad]:.3e}")

        self.nodes = _frozen(nodes)
        self.cells = _frozen(cells)
        self._volumes = _frozen(vol)
        # touch the face table now so non-manifold input fails at construction
        self._faces

    @staticmethod
    def _diag(nodes):
        return float(np.linalg.norm(nodes.max(axis=0) - nodes.min(axis=0))) or 1.0

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_cells(self):
        return len(self.cells)

    @cached_property
    def bbox_diagonal(self):
        return self._diag(self.nodes)

    @property
    def volumes(self):
        return self._volumes

    @cached_property
    def barycenters(self):
        return _frozen(self.nodes[self.cells].mean(axis=1))

    @cached_property
    def _faces(self):
        local = self.cells[:, _TET_FACES]  # (M, 4, 3)
        tri = local.reshape(-1, 3)
        key = np.sort(tri, axis=1)
        uniq, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        if np.any(counts > 2):
            raise GeometryError("non-manifold mesh: a face is shared by more than 2 cells")
        owner = np.repeat(np.arange(self.n_cells), 4)
        order = np.argsort(inverse, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        first = order[starts]
        interior = counts == 2
        second = np.full(len(uniq), -1)
        second[interior] = order[starts[interior] + 1]
        return tri, owner, first, second, interior

    @cached_property
    def boundary_faces(self):
        """(F, 3) node triples on the outer surface, outward oriented."""
        tri, _, first, _, interior = self._faces
        return _frozen(tri[first[~interior]])

    @cached_property
    def interior_faces(self):
        """Interior face table.

        Returns ``(cells, area_vectors)`` where ``cells`` is (F, 2) and
        ``area_vectors`` is the face normal scaled by face area, pointing
        from ``cells[:, 0]`` to ``cells[:, 1]``.
        """
        tri, owner, first, second, interior = self._faces
        a, b = first[interior], second[interior]
        t = tri[a]
        p = self.nodes
        area = 0.5 * np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]])
        pair = np.stack([owner[a], owner[b]], axis=1)
        return _frozen(pair), _frozen(area)

    @cached_property
    def node_cells(self):
        """CSR-style (offsets, cell indices) listing the cells incident to each node."""
        flat = self.cells.ravel()
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n_nodes)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return _frozen(offsets), _frozen(order // 4)

    def incident_cells(self, node):
        off, idx = self.node_cells
        return idx[off[node] : off[node + 1]]

    @cached_property
    def _node_tree(self):
        return cKDTree(self.nodes)

    @cached_property
    def _bary_tree(self):
        return cKDTree(self.barycenters)

    def nearest_node(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        _, idx = self._node_tree.query(pts)
        return np.asarray(idx, dtype=np.int64)

    def locate(self, points, k=16):
        """Index of the cell containing each point, or -1 if none is found.

        Only the ``k`` cells with nearest barycenters are tested.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        k = min(k, self.n_cells)
        _, cand = self._bary_tree.query(pts, k=k)
        cand = np.asarray(cand).reshape(len(pts), k)
        lam = self._barycentric(pts[:, None, :], cand)
        tol = -1e-10
        inside = np.all(lam >= tol, axis=2)
        out = np.full(len(pts), -1, dtype=np.int64)
        hit = inside.any(axis=1)
        out[hit] = cand[hit, np.argmax(inside[hit], axis=1)]
        return out

    def nearest_cell(self, points):
        """Containing cell where there is one, else the cell with the nearest barycenter."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = self.locate(pts)
        miss = out < 0
        if np.any(miss):
            _, idx = self._bary_tree.query(pts[miss])
            out[miss] = idx
        return out

    def _barycentric(self, pts, cand):
        x0 = self.nodes[self.cells[cand, 0]]
        T = np.stack(
            [self.nodes[self.cells[cand, k]] - x0 for k in (1, 2, 3)], axis=-1
        )  # (..., 3, 3)
        rhs = pts - x0
        l123 = np.linalg.solve(T, rhs[..., None])[..., 0]
        return np.concatenate([1.0 - l123.sum(axis=-1, keepdims=True), l123], axis=-1)

    @cached_property
    def shape_gradients(self):
        """(M, 4, 3) gradients of the P1 hat functions on every cell."""
        x = self.nodes[self.cells]
        T = np.stack([x[:, k] - x[:, 0] for k in (1, 2, 3)], axis=1)  # rows = edges
        Tinv = np.linalg.inv(T)  # columns are grads of l1..l3
        g123 = np.transpose(Tinv, (0, 2, 1))
        g0 = -g123.sum(axis=1, keepdims=True)
        return _frozen(np.concatenate([g0, g123], axis=1))

    def __repr__(self):
        return f"Mesh(n_nodes={self.n_nodes}, n_cells={self.n_cells})"


def cell_geometry(mesh):
    """Return per-cell volumes (m^3) and barycenters (m)."""
    return np.array(mesh.volumes), np.array(mesh.barycenters)


@dataclass(frozen=True)
class CellField:
    """One scalar, 3-vector or symmetric 3x3 tensor per cell."""

    name: str
    values: np.ndarray
    compartment_id: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim not in (1, 2, 3) or (v.ndim == 2 and v.shape[1] != 3) or (
            v.ndim == 3 and v.shape[1:] != (3, 3)
        ):
            raise ContractError(f"field {self.name!r}: unsupported shape {v.shape}")
        if v.ndim == 3:
            scale = np.abs(v).max(axis=(1, 2))
            asym = np.abs(v - np.transpose(v, (0, 2, 1))).max(axis=(1, 2))
            if np.any(asym > REL_EPS * np.maximum(scale, np.finfo(float).tiny)):
                raise ContractError(f"tensor field {self.name!r} is not symmetric")
        object.__setattr__(self, "values", _frozen(v))

    @property
    def kind(self):
        return {1: "scalar", 2: "vector", 3: "tensor"}[self.values.ndim]

    def check(self, mesh):
        if len(self.values) != mesh.n_cells:
            raise ContractError(
                f"cell field {self.name!r} has {len(self.values)} entries, mesh has {mesh.n_cells} cells"
            )


@dataclass(frozen=True)
class NodeField:
    """One scalar per mesh node."""

    name: str
    values: np.ndarray
    compartment_id: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ContractError(f"node field {self.name!r} must be 1-D")
        object.__setattr__(self, "values", _frozen(v))

    def check(self, mesh):
        if len(self.values) != mesh.n_nodes:
            raise ContractError(
                f"node field {self.name!r} has {len(self.values)} entries, mesh has {mesh.n_nodes} nodes"
            )


# ---------------------------------------------------------------------------
# I/O


def _content_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if text:
                yield lineno, text


def load_mesh(path):
    """Parse a ``mesh-v1`` file into a :class:`Mesh`."""
    path = Path(path)
    lines = _content_lines(path)

    def take(what):
        try:
            return next(lines)
        except StopIteration:
            raise FormatError(f"unexpected end of file while reading {what}", path) from None

    lineno, text = take("header")
    if text != "mesh-v1":
        raise FormatError(f"expected header 'mesh-v1', got {text!r}", path, lineno)

    def count(what):
        lineno, text = take(what)
        try:
            n = int(text)
        except ValueError:
            raise FormatError(f"bad {what} {text!r}", path, lineno) from None
        if n < 0:
            raise FormatError(f"negative {what}", path, lineno)
        return n

    n_nodes = count("node count")
    nodes = np.empty((n_nodes, 3))
    for i in range(n_nodes):
        lineno, text = take("node")
        parts = text.split()
        try:
            if len(parts) != 3:
                raise ValueError
            nodes[i] = [float(p) for p in parts]
        except ValueError:
            raise FormatError(f"node line must hold 3 floats, got {text!r}", path, lineno) from None

    n_cells = count("cell count")
    cells = np.empty((n_cells, 4), dtype=np.int64)
    for i in range(n_cells):
        lineno, text = take("cell")
        parts = text.split()
        try:
            if len(parts) != 4:
                raise ValueError
            cells[i] = [int(p) for p in parts]
        except ValueError:
            raise FormatError(f"cell line must hold 4 integers, got {text!r}", path, lineno) from None
        if cells[i].min() < 0 or cells[i].max() >= n_nodes:
            raise FormatError(f"cell node index out of range 0..{n_nodes - 1}", path, lineno)

    extra = next(lines, None)
    if extra is not None:
        raise FormatError(f"trailing content {extra[1]!r}", path, extra[0])
    return Mesh(nodes, cells)


def save_mesh(mesh, path):
    with open(path, "w") as fh:
        fh.write("mesh-v1\n")
        fh.write(f"{mesh.n_nodes}\n")
        for x, y, z in mesh.nodes:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
        fh.write(f"{mesh.n_cells}\n")
        for c in mesh.cells:
            fh.write(f"{c[0]} {c[1]} {c[2]} {c[3]}\n")


def _vtk_name(f):
    name = f.name.replace(" ", "_")
    return f"{name}_{f.compartment_id}" if f.compartment_id else name


def write_vtk(mesh, fields, path, title="liverperf output"):
    """Write ``mesh`` and the given fields as a legacy ASCII VTK file."""
    fields = list(fields)
    cell_fields = [f for f in fields if isinstance(f, CellField)]
    node_fields = [f for f in fields if isinstance(f, NodeField)]
    if len(cell_fields) + len(node_fields) != len(fields):
        raise ContractError("fields must be CellField or NodeField instances")
    for f in fields:
        f.check(mesh)

    out = [
        "# vtk DataFile Version 3.0",
        title.replace("\n", " ")[:255],
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {mesh.n_nodes} double",
    ]
    out += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.nodes]
    out.append(f"CELLS {mesh.n_cells} {5 * mesh.n_cells}")
    out += [f"4 {a} {b} {c} {d}" for a, b, c, d in mesh.cells]
    out.append(f"CELL_TYPES {mesh.n_cells}")
    out += ["10"] * mesh.n_cells

    def block(f):
        v = f.values
        name = _vtk_name(f)
        if v.ndim == 1:
            lines = [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [f"{x:.17g}" for x in v]
        elif v.ndim == 2:
            lines = [f"VECTORS {name} double"]
            lines += [f"{a:.17g} {b:.17g} {c:.17g}" for a, b, c in v]
        else:
            lines = [f"TENSORS {name} double"]
            for t in v:
                lines += [" ".join(f"{x:.17g}" for x in row) for row in t]
        return lines

    if cell_fields:
        out.append(f"CELL_DATA {mesh.n_cells}")
        for f in cell_fields:
            out += block(f)
    if node_fields:
        out.append(f"POINT_DATA {mesh.n_nodes}")
        for f in node_fields:
            out += block(f)
    Path(path).write_text("\n".join(out) + "\n")


def read_vtk_geometry(path):
    """Read back POINTS and CELLS from a file written by :func:`write_vtk`."""
    tokens = Path(path).read_text().split()
    i = tokens.index("POINTS")
    n = int(tokens[i + 1])
    pts = np.array(tokens[i + 3 : i + 3 + 3 * n], dtype=float).reshape(n, 3)
    j = tokens.index("CELLS")
    m = int(tokens[j + 1])
    raw = np.array(tokens[j + 3 : j + 3 + 5 * m], dtype=np.int64).reshape(m, 5)
    return pts, raw[:, 1:]


def read_vtk_cell_data(path):
    """Cell arrays of a file written by :func:`write_vtk`, keyed by VTK array name."""
    tokens = Path(path).read_text().split()
    if "CELL_DATA" not in tokens:
        return {}
    i = tokens.index("CELL_DATA")
    m = int(tokens[i + 1])
    i += 2
    out = {}
    while i < len(tokens) and tokens[i] != "POINT_DATA":
        kind, name = tokens[i], tokens[i + 1]
        if kind == "SCALARS":
            i += 6  # SCALARS name type ncomp LOOKUP_TABLE default
            out[name] = np.array(tokens[i : i + m], dtype=float)
            i += m
        elif kind in ("VECTORS", "TENSORS"):
            width = 3 if kind == "VECTORS" else 9
            i += 3
            vals = np.array(tokens[i : i + width * m], dtype=float)
            out[name] = vals.reshape(m, 3) if width == 3 else vals.reshape(m, 3, 3)
            i += width * m
        else:
            raise FormatError(f"unexpected VTK keyword {kind!r}", path)
    return out
