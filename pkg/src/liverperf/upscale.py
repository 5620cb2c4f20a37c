"""Tree-to-continuum upscaling: per-cell permeability tensors, porosities and
inter-compartment perfusion coefficients from lower-hierarchy vessel segments.

Per cell (control volume V)::

    K   = 1/V  sum  pi r^4 / (8 mu) * L * t (x) t
    phi = 1/V  sum  pi r^2 L
    G   = 1/V  sum  pi r^4 / (8 mu L)        (bridging segments only)

Segments are assigned to the cell containing their midpoint. Long segments
may be cut into pieces first (``max_piece``), and the control volume may be
enlarged to all cells whose barycenter lies within ``control_radius``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .errors import ConfigurationError, ContractError, GeometryError
from .geometry import CellField

log = logging.getLogger(__name__)

K_FILTRATION = 2e-14
PHI_FILTRATION = 0.15
DEFAULT_EPS = 1e-3


@dataclass(frozen=True)
class CompartmentSpec:
    """A compartment: its group(s), diameter range (lo, hi] in metres and hierarchy index.

    ``groups`` is a string of group letters; the filtration compartment that
    connects both trees at hierarchy 0 uses ``"PH"``.
    """

    id: int
    groups: str
    diameter_range: tuple = (0.0, np.inf)
    hierarchy: int = 0

    def contains(self, diameters):
        lo, hi = self.diameter_range
        d = np.asarray(diameters)
        return (d > lo) & (d <= hi)


def check_compartment_specs(specs):
    for a in specs:
        for b in specs:
            if a.id < b.id and set(a.groups) & set(b.groups):
                if a.hierarchy == b.hierarchy and a.groups == b.groups:
                    raise ConfigurationError(f"compartments {a.id} and {b.id} share group and hierarchy")
                lo_a, hi_a = a.diameter_range
                lo_b, hi_b = b.diameter_range
                if a.groups == b.groups and lo_a < hi_b and lo_b < hi_a:
                    raise ConfigurationError(f"diameter ranges of compartments {a.id} and {b.id} overlap")
                if a.groups == b.groups and (a.hierarchy < b.hierarchy) != (hi_a <= lo_b):
                    raise ConfigurationError(
                        f"compartments {a.id}, {b.id}: hierarchy order disagrees with diameter order"
                    )


def may_couple(a, b):
    """Exchange allowed: adjacent hierarchies sharing a group, or distinct groups both at hierarchy 0."""
    if set(a.groups) & set(b.groups) and abs(a.hierarchy - b.hierarchy) == 1:
        return True
    return a.hierarchy == b.hierarchy == 0 and a.groups != b.groups


# ---------------------------------------------------------------------------
# segment pieces and cell assignment


@dataclass(frozen=True)
class SegmentPieces:
    """Straight pieces of vessel segments, each carrying a share of the true length."""

    midpoints: np.ndarray  # (P, 3)
    directions: np.ndarray  # (P, 3) unit vectors
    diameters: np.ndarray  # (P,)
    lengths: np.ndarray  # (P,) true length of the piece
    segment_lengths: np.ndarray  # (P,) true length of the parent segment
    segment_ids: np.ndarray  # (P,)


def segment_pieces(tree, segments=None, max_piece=None):
    """Cut the selected segments into pieces no longer (chord-wise) than ``max_piece``."""
    segs = np.arange(tree.n_segments) if segments is None else np.asarray(segments, dtype=np.int64)
    a = tree.positions[tree.tails[segs]]
    b = tree.positions[tree.heads[segs]]
    chord = np.linalg.norm(b - a, axis=1)
    t = (b - a) / chord[:, None]
    n = np.ones(len(segs), dtype=np.int64)
    if max_piece:
        n = np.maximum(1, np.ceil(chord / max_piece).astype(np.int64))
    rep = np.repeat(np.arange(len(segs)), n)
    k = np.concatenate([np.arange(m) for m in n]) if len(n) else np.zeros(0, int)
    frac = (k + 0.5) / n[rep]
    mid = a[rep] + frac[:, None] * (b - a)[rep]
    L = tree.lengths[segs]
    return SegmentPieces(
        midpoints=mid,
        directions=t[rep],
        diameters=tree.diameters[segs][rep],
        lengths=L[rep] / n[rep],
        segment_lengths=L[rep],
        segment_ids=segs[rep],
    )


def _assign(mesh, pieces):
    cells = mesh.locate(pieces.midpoints)
    miss = cells < 0
    if np.any(miss):
        log.info("%d segment piece(s) outside the mesh assigned to the nearest cell", int(miss.sum()))
        cells[miss] = mesh.nearest_cell(pieces.midpoints[miss])
    return cells


def _control_average(mesh, integrals, control_radius):
    """Per-cell control-volume average of extensive per-cell quantities."""
    V = mesh.volumes
    shape = integrals.shape
    flat = integrals.reshape(len(V), -1)
    if not control_radius:
        out = flat / V[:, None]
    else:
        tree = cKDTree(mesh.barycenters)
        nbrs = tree.query_ball_point(mesh.barycenters, r=control_radius)
        out = np.empty_like(flat)
        for c, nb in enumerate(nbrs):
            nb = np.asarray(sorted(set(nb) | {c}))
            out[c] = flat[nb].sum(axis=0) / V[nb].sum()
    return out.reshape(shape)


def average_permeability(pieces, mesh, mu, control_radius=0.0, name="K", compartment_id=0):
    """Volume-averaged Poiseuille conductance tensor (m^2 / (Pa s))."""
    if mu <= 0:
        raise ConfigurationError("viscosity must be positive", "mu")
    cells = _assign(mesh, pieces)
    r = pieces.diameters / 2
    w = np.pi * r**4 / (8 * mu) * pieces.lengths
    tt = pieces.directions[:, :, None] * pieces.directions[:, None, :]
    integ = np.zeros((mesh.n_cells, 3, 3))
    order = np.argsort(pieces.segment_ids, kind="stable")  # deterministic accumulation order
    np.add.at(integ, cells[order], (w[:, None, None] * tt)[order])
    K = _control_average(mesh, integ, control_radius)
    K = 0.5 * (K + np.transpose(K, (0, 2, 1)))
    return CellField(name, K, compartment_id)


def average_porosity(pieces, mesh, control_radius=0.0, name="phi", compartment_id=0):
    """Vessel volume fraction per cell; fractions above 1 raise :class:`GeometryError`."""
    cells = _assign(mesh, pieces)
    vol = np.pi * (pieces.diameters / 2) ** 2 * pieces.lengths
    integ = np.zeros(mesh.n_cells)
    order = np.argsort(pieces.segment_ids, kind="stable")
    np.add.at(integ, cells[order], vol[order])
    phi = _control_average(mesh, integ, control_radius)
    if np.any(phi > 1):
        c = int(np.argmax(phi))
        raise GeometryError(f"vessel volume fraction {phi[c]:.3g} > 1 in cell {c}")
    return CellField(name, phi, compartment_id)


def perfusion_coupling_coeffs(pieces, mesh, mu, control_radius=0.0, name="G", compartment_id=0):
    """Per-volume Poiseuille conductance of bridging vessels ((Pa s)^-1).

    A segment cut into pieces spreads its conductance over them by length.
    """
    cells = _assign(mesh, pieces)
    r = pieces.diameters / 2
    g = np.pi * r**4 / (8 * mu * pieces.segment_lengths) * (pieces.lengths / pieces.segment_lengths)
    integ = np.zeros(mesh.n_cells)
    order = np.argsort(pieces.segment_ids, kind="stable")
    np.add.at(integ, cells[order], g[order])
    return CellField(name, _control_average(mesh, integ, control_radius), compartment_id)


def reference_norm(K, volumes):
    """Volume-weighted mean spectral norm of ``K`` over its support (cells with nonzero tensor)."""
    vals = K.values if isinstance(K, CellField) else np.asarray(K)
    norms = np.linalg.eigvalsh(vals)[:, -1]
    support = np.abs(vals).max(axis=(1, 2)) > 0
    if not np.any(support):
        return 0.0
    return float(np.sum(norms[support] * volumes[support]) / np.sum(volumes[support]))


def regularize(K, eps=DEFAULT_EPS, K_bar=None, volumes=None):
    """``K + eps * K_bar * I`` per cell.

    ``K_bar`` defaults to :func:`reference_norm` (``volumes`` required then).
    """
    if not eps > 0:
        raise ConfigurationError("regularization epsilon must be > 0", "eps")
    if K_bar is None:
        if volumes is None:
            raise ConfigurationError("need cell volumes or an explicit K_bar", "K_bar")
        K_bar = reference_norm(K, volumes)
        if K_bar <= 0:
            raise ConfigurationError(
                f"permeability field {K.name!r} is identically zero; pass an explicit K_bar", "K_bar"
            )
    if not K_bar > 0:
        raise ConfigurationError("K_bar must be positive", "K_bar")
    vals = K.values + eps * K_bar * np.eye(3)
    return CellField(K.name, vals, K.compartment_id)


# ---------------------------------------------------------------------------
# parameter bundle


@dataclass(frozen=True)
class PerfusionParams:
    """Per-compartment K and phi, per coupled pair G (keyed ``(i, j)`` with i < j)."""

    specs: tuple
    K: dict
    phi: dict
    G: dict
    phi_m: CellField = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [s.id for s in self.specs]
        if sorted(ids) != sorted(self.K) or sorted(ids) != sorted(self.phi):
            raise ContractError("K and phi must be given for every compartment")
        by_id = {s.id: s for s in self.specs}
        for (i, j), g in self.G.items():
            if not i < j:
                raise ContractError(f"coupling key {(i, j)} must be ordered i < j")
            if not may_couple(by_id[i], by_id[j]):
                raise ConfigurationError(f"compartments {i} and {j} may not exchange fluid")
            if np.any(g.values < 0):
                raise ContractError(f"perfusion coefficient G{(i, j)} has negative entries")
        total = sum(f.values for f in self.phi.values())
        if np.any(total > 1 + 1e-12):
            raise GeometryError("sum of compartment porosities exceeds 1")
        if self.phi_m is None:
            object.__setattr__(self, "phi_m", CellField("phi_m", np.clip(1.0 - total, 0.0, None)))

    @property
    def ids(self):
        return tuple(sorted(s.id for s in self.specs))

    @property
    def n_cells(self):
        return len(next(iter(self.phi.values())).values)

    def exchange(self, i, j):
        """G between i and j as an array (zeros if not coupled)."""
        key = (min(i, j), max(i, j))
        if key in self.G:
            return self.G[key].values
        return np.zeros(self.n_cells)

    def pairs(self):
        return sorted(self.G)

    def replace(self, K=None, phi=None, G=None):
        return PerfusionParams(
            specs=self.specs,
            K=dict(self.K if K is None else K),
            phi=dict(self.phi if phi is None else phi),
            G=dict(self.G if G is None else G),
            meta=dict(self.meta),
        )


def assign_compartments(tree, segments, specs):
    """Compartment id per segment (-1 where no compartment matches)."""
    d = tree.diameters[np.asarray(segments, dtype=np.int64)]
    tags = np.full(len(d), -1, dtype=np.int64)
    for s in specs:
        tags[s.contains(d) & (tags < 0)] = s.id
    return tags


def bridging_segments(tree, segments, spec):
    """Segments of ``spec`` whose children are absent or all finer than its range."""
    segs = np.asarray(segments, dtype=np.int64)
    inside = spec.contains(tree.diameters[segs])
    out = []
    lo = spec.diameter_range[0]
    for e, ok in zip(segs, inside):
        if not ok:
            continue
        kids = tree.children[tree.heads[e]]
        if not kids or all(tree.diameters[k] <= lo for k in kids):
            out.append(e)
    return np.array(out, dtype=np.int64)


def three_compartment_specs(range_p=(1e-4, 1e-3), range_h=(1e-4, 1e-3)):
    """Portal (1), filtration (2), hepatic (3) layout."""
    return (
        CompartmentSpec(1, "P", tuple(range_p), 1),
        CompartmentSpec(2, "PH", (0.0, min(range_p[0], range_h[0])), 0),
        CompartmentSpec(3, "H", tuple(range_h), 1),
    )


def build_perfusion_params(
    mesh,
    portal,
    portal_split,
    hepatic,
    hepatic_split,
    specs,
    mu,
    eps=DEFAULT_EPS,
    control_radius=0.0,
    max_piece=None,
    K_filtration=K_FILTRATION,
    phi_filtration=PHI_FILTRATION,
    G_scale=1.0,
):
    """Upscale both lower trees into the three-compartment parameter set.

    Returns ``(params, raw)`` where ``raw`` holds the unregularized K fields.
    """
    by_id = {s.id: s for s in specs}
    if sorted(by_id) != [1, 2, 3]:
        raise ConfigurationError("the three-compartment layout needs ids 1, 2, 3", "compartments")
    check_compartment_specs(specs)
    n = mesh.n_cells
    K, phi, G, raw = {}, {}, {}, {}
    meta = {}
    for cid, tree, split, pair in ((1, portal, portal_split, (1, 2)), (3, hepatic, hepatic_split, (2, 3))):
        spec = by_id[cid]
        lower = split.lower_segments
        tags = assign_compartments(tree, lower, [spec])
        members = lower[tags == cid]
        if len(members) == 0:
            raise ConfigurationError(f"no lower-tree segment falls in the diameter range of compartment {cid}")
        skipped = int(np.count_nonzero(tags < 0))
        if skipped:
            log.warning("compartment %d: %d lower segment(s) outside diameter range ignored", cid, skipped)
        pieces = segment_pieces(tree, members, max_piece)
        Kraw = average_permeability(pieces, mesh, mu, control_radius, "K", cid)
        raw[cid] = Kraw
        K[cid] = regularize(Kraw, eps, volumes=mesh.volumes)
        phi[cid] = average_porosity(pieces, mesh, control_radius, "phi", cid)
        bridge = bridging_segments(tree, members, spec)
        bp = segment_pieces(tree, bridge, max_piece)
        g = perfusion_coupling_coeffs(bp, mesh, mu, control_radius, "G", 0)
        G[pair] = CellField(f"G_{pair[0]}{pair[1]}", G_scale * g.values)
        meta[cid] = {"segments": int(len(members)), "bridging": int(len(bridge)), "skipped": skipped}
    K[2] = CellField("K", np.broadcast_to(K_filtration * np.eye(3), (n, 3, 3)).copy(), 2)
    phi[2] = CellField("phi", np.full(n, phi_filtration), 2)
    params = PerfusionParams(specs=tuple(specs), K=K, phi=phi, G=G, meta=meta)
    return params, raw
