"""Structured tetrahedral meshes for tests and desk-scale scenarios.

Each hexahedral block is split into 6 tetrahedra around its main diagonal,
which gives a conforming mesh on any subset of blocks.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .geometry import Mesh

# Kuhn split of the unit cube; vertex k of the cube is (k&1, k>>1&1, k>>2&1)
_KUHN = np.array(
    [
        [0, 1, 3, 7],
        [0, 1, 5, 7],
        [0, 2, 3, 7],
        [0, 2, 6, 7],
        [0, 4, 5, 7],
        [0, 4, 6, 7],
    ]
)


def _grid(lo, hi, shape):
    axes = [np.linspace(lo[k], hi[k], shape[k] + 1) for k in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    nx, ny, nz = shape
    idx = np.arange((nx + 1) * (ny + 1) * (nz + 1)).reshape(nx + 1, ny + 1, nz + 1)
    i, j, k = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    corners = np.stack(
        [idx[i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1)] for c in range(8)], axis=1
    )
    centers = np.stack([axes[0][i] + axes[0][i + 1], axes[1][j] + axes[1][j + 1], axes[2][k] + axes[2][k + 1]], axis=1) / 2
    return nodes, corners, centers


def _tetrahedralize(nodes, corners):
    cells = corners[:, _KUHN].reshape(-1, 4)
    used, cells = np.unique(cells, return_inverse=True)
    return Mesh(nodes[used], cells.reshape(-1, 4))


def box_mesh(n, lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0)):
    """Box split into ``n`` (int or 3-tuple) blocks per axis, 6 tets per block."""
    shape = (n, n, n) if np.isscalar(n) else tuple(int(v) for v in n)
    if min(shape) < 1:
        raise ConfigurationError("block counts must be >= 1", "n")
    nodes, corners, _ = _grid(np.asarray(lo, float), np.asarray(hi, float), shape)
    return _tetrahedralize(nodes, corners)


def ellipsoid_mesh(semi_axes, n, center=(0.0, 0.0, 0.0)):
    """Blocky ellipsoid: blocks of a bounding grid whose centers lie inside.

    ``n`` is the number of blocks along the longest axis.
    """
    a = np.asarray(semi_axes, dtype=float)
    c = np.asarray(center, dtype=float)
    if np.any(a <= 0):
        raise ConfigurationError("semi-axes must be positive", "semi_axes")
    h = 2 * a.max() / n
    shape = tuple(max(2, int(np.ceil(2 * a[k] / h))) for k in range(3))
    half = np.array(shape) * h / 2
    nodes, corners, centers = _grid(c - half, c + half, shape)
    keep = (((centers - c) / a) ** 2).sum(axis=1) <= 1.0
    if not np.any(keep):
        raise ConfigurationError("resolution too coarse for ellipsoid", "n")
    return _tetrahedralize(nodes, corners[keep])
