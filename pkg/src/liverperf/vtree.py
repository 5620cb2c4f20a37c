"""Vascular trees: representation, Horton-Strahler ordering, hierarchy split,
text I/O and a deterministic space-filling generator.

Segments are always stored oriented away from the root: ``tail`` is the
root-side junction and ``head`` the distal one.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, GenerationError, SplitError, TreeValidationError

log = logging.getLogger(__name__)


def _frozen(a):
    a = np.array(a)
    a.setflags(write=False)
    return a


class VascularTree:
    """Immutable branching network of straight segments.

    Parameters
    ----------
    positions : (J, 3) array
        Junction coordinates in metres.
    tails, heads : (S,) int arrays
        End junctions of each segment. Orientation is normalised so that
        tails point to the root.
    diameters, lengths : (S,) float arrays
        Vessel diameter and true (tortuous) length in metres.
    root : int
        Root junction index.
    """

    def __init__(self, positions, tails, heads, diameters, lengths, root=0):
        pos = np.asarray(positions, dtype=float).reshape(-1, 3)
        tails = np.asarray(tails, dtype=np.int64).ravel()
        heads = np.asarray(heads, dtype=np.int64).ravel()
        diam = np.asarray(diameters, dtype=float).ravel()
        length = np.asarray(lengths, dtype=float).ravel()
        nj, ns = len(pos), len(tails)
        if not (len(heads) == len(diam) == len(length) == ns):
            raise TreeValidationError("segment arrays differ in length")
        if ns != nj - 1:
            raise TreeValidationError(
                f"a tree needs |segments| = |junctions| - 1, got {ns} segments and {nj} junctions"
            )
        if ns == 0:
            raise TreeValidationError("tree has no segments")
        if not 0 <= root < nj:
            raise TreeValidationError(f"root {root} out of range")
        if tails.min() < 0 or heads.min() < 0 or max(tails.max(), heads.max()) >= nj:
            raise TreeValidationError("segment endpoint out of range")
        if np.any(tails == heads):
            raise TreeValidationError(f"segment {int(np.nonzero(tails == heads)[0][0])} is a self-loop")
        if np.any(~(diam > 0)):
            raise TreeValidationError(f"segment {int(np.nonzero(~(diam > 0))[0][0])} has non-positive diameter")
        if np.any(~(length > 0)):
            raise TreeValidationError(f"segment {int(np.nonzero(~(length > 0))[0][0])} has non-positive length")
        chord = np.linalg.norm(pos[heads] - pos[tails], axis=1)
        short = length < chord * (1 - 1e-12)
        if np.any(short):
            e = int(np.nonzero(short)[0][0])
            raise TreeValidationError(
                f"segment {e}: true length {length[e]:.6g} shorter than chord {chord[e]:.6g}"
            )

        adj = [[] for _ in range(nj)]
        for e, (a, b) in enumerate(zip(tails, heads)):
            adj[a].append(e)
            adj[b].append(e)
        # BFS from root; with |S| = |J| - 1, reaching every junction rules out cycles
        seen = np.zeros(nj, dtype=bool)
        seen[root] = True
        parent_seg = np.full(nj, -1, dtype=np.int64)
        order = [root]
        queue = deque([root])
        flip = np.zeros(ns, dtype=bool)
        while queue:
            j = queue.popleft()
            for e in adj[j]:
                if e == parent_seg[j]:
                    continue
                k = heads[e] if tails[e] == j else tails[e]
                if seen[k]:
                    raise TreeValidationError(f"cycle detected through segment {e}")
                seen[k] = True
                parent_seg[k] = e
                flip[e] = heads[e] == j
                order.append(k)
                queue.append(k)
        if not seen.all():
            raise TreeValidationError(f"junction {int(np.nonzero(~seen)[0][0])} is not connected to the root")
        if len(adj[root]) != 1:
            raise TreeValidationError(f"root junction has {len(adj[root])} segments, expected 1")

        t2 = np.where(flip, heads, tails)
        h2 = np.where(flip, tails, heads)
        self.positions = _frozen(pos)
        self.tails = _frozen(t2)
        self.heads = _frozen(h2)
        self.diameters = _frozen(diam)
        self.lengths = _frozen(length)
        self.root = int(root)
        self.parent_segment = _frozen(parent_seg)  # per junction, -1 at root
        self.bfs_junctions = _frozen(order)
        degree = np.array([len(a) for a in adj])
        self.terminals = _frozen(np.array([j for j in order if j != root and degree[j] == 1], dtype=np.int64))

    @property
    def n_junctions(self):
        return len(self.positions)

    @property
    def n_segments(self):
        return len(self.tails)

    @property
    def root_segment(self):
        return int(self.parent_segment[self.bfs_junctions[1]])

    @cached_property
    def children(self):
        """Child segment indices of every junction."""
        ch = [[] for _ in range(self.n_junctions)]
        for e in range(self.n_segments):
            ch[self.tails[e]].append(e)
        return tuple(tuple(c) for c in ch)

    @cached_property
    def segment_order(self):
        """Segments sorted root-first (each after its parent)."""
        return _frozen(self.parent_segment[self.bfs_junctions[1:]])

    @property
    def areas(self):
        return np.pi * self.diameters**2 / 4

    @property
    def chords(self):
        return np.linalg.norm(self.positions[self.heads] - self.positions[self.tails], axis=1)

    def __eq__(self, other):
        if not isinstance(other, VascularTree):
            return NotImplemented
        return (
            self.root == other.root
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.tails, other.tails)
            and np.array_equal(self.heads, other.heads)
            and np.array_equal(self.diameters, other.diameters)
            and np.array_equal(self.lengths, other.lengths)
        )

    __hash__ = None

    def __repr__(self):
        return f"VascularTree(junctions={self.n_junctions}, segments={self.n_segments}, terminals={len(self.terminals)})"


# ---------------------------------------------------------------------------
# Horton-Strahler and hierarchy split


def horton_strahler(tree):
    """Horton-Strahler order per segment.

    Terminal segments get 1. A segment whose children share the maximal
    order k at least twice gets k + 1, otherwise it inherits k.
    """
    order = np.zeros(tree.n_segments, dtype=np.int64)
    for e in tree.segment_order[::-1]:
        kids = tree.children[tree.heads[e]]
        if not kids:
            order[e] = 1
            continue
        ko = order[list(kids)]
        top = ko.max()
        order[e] = top + 1 if np.count_nonzero(ko == top) >= 2 else top
    return order


@dataclass(frozen=True)
class HierarchySplit:
    """Result of cutting a tree at a Horton-Strahler threshold.

    ``upper`` is reindexed; ``upper_segments`` / ``upper_junctions`` map its
    segments and junctions back to the original tree. ``interface_junctions``
    are upper-tree junction ids (its leaves); ``tags`` holds a compartment id
    per lower segment (or -1).
    """

    upper: VascularTree
    upper_segments: np.ndarray
    upper_junctions: np.ndarray
    lower_segments: np.ndarray
    interface_junctions: np.ndarray
    tags: np.ndarray = field(default=None)

    @property
    def interface_positions(self):
        return self.upper.positions[self.interface_junctions]


def split_hierarchy(tree, hs_threshold, orders=None):
    """Split ``tree`` into the root-connected part with HS >= threshold and the rest."""
    if hs_threshold < 1:
        raise SplitError("hs_threshold must be >= 1")
    if orders is None:
        orders = horton_strahler(tree)
    keep = orders >= hs_threshold
    root_seg = tree.parent_segment[tree.bfs_junctions[1]]
    if not keep[root_seg]:
        raise SplitError(
            f"threshold {hs_threshold} exceeds the root order {int(orders[root_seg])}: upper tree is empty"
        )
    # HS order never decreases towards the root, so `keep` is root-connected
    segs = np.array([e for e in tree.segment_order if keep[e]], dtype=np.int64)
    junctions = [tree.root] + [int(tree.heads[e]) for e in segs]
    remap = {j: i for i, j in enumerate(junctions)}
    upper = VascularTree(
        tree.positions[junctions],
        [remap[int(tree.tails[e])] for e in segs],
        [remap[int(tree.heads[e])] for e in segs],
        tree.diameters[segs],
        tree.lengths[segs],
        root=0,
    )
    lower = np.nonzero(~keep)[0]
    return HierarchySplit(
        upper=upper,
        upper_segments=_frozen(segs),
        upper_junctions=_frozen(np.array(junctions, dtype=np.int64)),
        lower_segments=_frozen(lower),
        interface_junctions=upper.terminals,
        tags=_frozen(np.full(len(lower), -1, dtype=np.int64)),
    )


def subtree_segments(tree, junction):
    """All segments distal to ``junction``."""
    out = []
    stack = list(tree.children[junction])
    while stack:
        e = stack.pop()
        out.append(e)
        stack.extend(tree.children[tree.heads[e]])
    return np.array(sorted(out), dtype=np.int64)


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass(frozen=True)
class Region:
    """Axis-aligned box (``shape='box'``, half extents) or ellipsoid (semi-axes)."""

    shape: str = "ellipsoid"
    center: tuple = (0.0, 0.0, 0.0)
    extents: tuple = (0.1, 0.075, 0.05)

    def contains(self, pts, tol=1e-9):
        c = np.asarray(self.center, float)
        a = np.asarray(self.extents, float)
        q = (np.atleast_2d(pts) - c) / a
        if self.shape == "box":
            return np.all(np.abs(q) <= 1 + tol, axis=1)
        return (q**2).sum(axis=1) <= 1 + tol

    def sample(self, rng, n):
        c = np.asarray(self.center, float)
        a = np.asarray(self.extents, float)
        out = []
        count = 0
        while count < n:
            p = c + a * rng.uniform(-1, 1, size=(2 * n, 3))
            p = p[self.contains(p, tol=0.0)]
            out.append(p)
            count += len(p)
        return np.concatenate(out)[:n]


@dataclass(frozen=True)
class TreeSpec:
    """Parameters of :func:`build_synthetic_tree`.

    ``diameter_ratio`` is either one factor applied at every level or a
    sequence of ``depth - 1`` per-level factors. ``min_length_ratio`` is the
    smallest admissible true-length/diameter ratio of any segment.
    """

    depth: int
    root_diameter: float
    diameter_ratio: float | Sequence[float] = 2 ** (-1 / 3)
    min_length_ratio: float = 1.0
    region: Region = Region()
    root_position: tuple | None = None
    seed: int = 0
    tortuosity: float = 1.2
    jitter: float = 0.15
    points_per_leaf: int = 16

    def level_diameters(self):
        if np.isscalar(self.diameter_ratio):
            ratios = [float(self.diameter_ratio)] * (self.depth - 1)
        else:
            ratios = [float(r) for r in self.diameter_ratio]
            if len(ratios) != self.depth - 1:
                raise GenerationError(
                    f"diameter_ratio needs {self.depth - 1} per-level values, got {len(ratios)}"
                )
        if any(not 0 < r <= 1 for r in ratios):
            raise GenerationError("diameter ratios must lie in (0, 1]")
        return self.root_diameter * np.concatenate([[1.0], np.cumprod(ratios)])


def build_synthetic_tree(spec):
    """Deterministic space-filling binary tree.

    Points are sampled uniformly in the region; each subtree owns a subset of
    them, its proximal junction sits at the subset centroid, and subsets are
    halved at the median along their (jittered) principal axis.
    """
    if spec.depth < 1:
        raise GenerationError("depth must be >= 1")
    if spec.root_diameter <= 0:
        raise GenerationError("root diameter must be positive")
    if spec.tortuosity < 1:
        raise GenerationError("tortuosity must be >= 1")
    diam = spec.level_diameters()
    rng = np.random.default_rng(spec.seed)
    n_leaves = 2 ** (spec.depth - 1)
    pts = spec.region.sample(rng, max(spec.points_per_leaf, 2) * n_leaves)

    region = spec.region
    if spec.root_position is None:
        c = np.asarray(region.center, float)
        a = np.asarray(region.extents, float)
        root_pos = c - np.array([0.0, 0.0, a[2]])
    else:
        root_pos = np.asarray(spec.root_position, float)
    if not region.contains(root_pos[None])[0]:
        raise GenerationError(f"root position {tuple(root_pos)} lies outside the region")

    positions = [root_pos]
    tails, heads, diameters = [], [], []

    def grow(parent, subset, level):
        j = len(positions)
        positions.append(subset.mean(axis=0))
        tails.append(parent)
        heads.append(j)
        diameters.append(diam[level - 1])
        if level == spec.depth:
            return
        if len(subset) < 2:
            raise GenerationError("too few sample points to split a subtree")
        centred = subset - subset.mean(axis=0)
        _, _, vt = np.linalg.svd(centred, full_matrices=False)
        axis = vt[0] + spec.jitter * rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        proj = centred @ axis
        idx = np.argsort(proj, kind="stable")
        half = len(idx) // 2
        grow(j, subset[idx[:half]], level + 1)
        grow(j, subset[idx[half:]], level + 1)

    grow(0, pts, 1)
    positions = np.array(positions)
    tails = np.array(tails)
    heads = np.array(heads)
    chord = np.linalg.norm(positions[heads] - positions[tails], axis=1)
    lengths = spec.tortuosity * chord
    diameters = np.array(diameters)
    bad = lengths < spec.min_length_ratio * diameters
    if np.any(~(chord > 0)) or np.any(bad):
        e = int(np.nonzero(bad | ~(chord > 0))[0][0])
        raise GenerationError(
            f"segment {e} (length {lengths[e]:.3g} m, diameter {diameters[e]:.3g} m) does not fit the region"
        )
    if not np.all(region.contains(positions)):
        raise GenerationError("generated junction outside region")
    return VascularTree(positions, tails, heads, diameters, lengths, root=0)


# ---------------------------------------------------------------------------
# I/O


def save_tree(tree, path):
    """Write ``tree-v1`` text."""
    lines = ["tree-v1", f"R {tree.root}"]
    lines += [f"J {j} {x:.17g} {y:.17g} {z:.17g}" for j, (x, y, z) in enumerate(tree.positions)]
    lines += [
        f"S {e} {tree.tails[e]} {tree.heads[e]} {tree.diameters[e]:.17g} {tree.lengths[e]:.17g}"
        for e in range(tree.n_segments)
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def load_tree(path):
    """Parse ``tree-v1`` text; structural problems raise :class:`TreeValidationError`."""
    path = Path(path)
    junctions, segments, root = {}, {}, None
    header = False
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if not header:
                if text != "tree-v1":
                    raise FormatError(f"expected header 'tree-v1', got {text!r}", path, lineno)
                header = True
                continue
            parts = text.split()
            try:
                if parts[0] == "J" and len(parts) == 5:
                    jid = int(parts[1])
                    if jid in junctions:
                        raise FormatError(f"duplicate junction id {jid}", path, lineno)
                    junctions[jid] = ([float(v) for v in parts[2:]], lineno)
                elif parts[0] == "S" and len(parts) == 6:
                    sid = int(parts[1])
                    if sid in segments:
                        raise FormatError(f"duplicate segment id {sid}", path, lineno)
                    segments[sid] = (int(parts[2]), int(parts[3]), float(parts[4]), float(parts[5]), lineno)
                elif parts[0] == "R" and len(parts) == 2:
                    if root is not None:
                        raise FormatError("root declared twice", path, lineno)
                    root = (int(parts[1]), lineno)
                else:
                    raise ValueError
            except ValueError:
                raise FormatError(f"unrecognised line {text!r}", path, lineno) from None
    if not header:
        raise FormatError("empty file", path)
    if root is None:
        raise FormatError("missing root declaration 'R id'", path)
    jids = sorted(junctions)
    index = {j: i for i, j in enumerate(jids)}
    if root[0] not in index:
        raise TreeValidationError(f"{path}:{root[1]}: root {root[0]} is not a junction")
    tails, heads, diam, length = [], [], [], []
    for sid in sorted(segments):
        t, h, d, L, lineno = segments[sid]
        for j in (t, h):
            if j not in index:
                raise TreeValidationError(f"{path}:{lineno}: segment {sid} references unknown junction {j}")
        if not d > 0:
            raise TreeValidationError(f"{path}:{lineno}: segment {sid} has non-positive diameter")
        if not L > 0:
            raise TreeValidationError(f"{path}:{lineno}: segment {sid} has non-positive length")
        tails.append(index[t])
        heads.append(index[h])
        diam.append(d)
        length.append(L)
    pos = np.array([junctions[j][0] for j in jids], dtype=float).reshape(-1, 3)
    try:
        return VascularTree(pos, tails, heads, diam, length, root=index[root[0]])
    except TreeValidationError as exc:
        raise TreeValidationError(f"{path}: {exc}") from None
