"""P1 finite elements for the multicompartment Darcy system.

For every compartment ``i``::

    -div(K^i grad p^i) + sum_j G_ij (p^i - p^j) = f^i

with no-flux outer walls, nodal point sources (m^3/s) and nodal Dirichlet
pressures. The exchange term uses a lumped mass matrix, so each cell hands
``G V / 4`` to each of its nodes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractError, SolverError
from .geometry import CellField, NodeField

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SourceSpec:
    """Nodal conditions for one compartment.

    ``fluxes`` maps node -> injected flux Q (m^3/s, negative = drained);
    ``dirichlet`` maps node -> prescribed pressure (Pa).
    """

    compartment: int
    fluxes: dict = field(default_factory=dict)
    dirichlet: dict = field(default_factory=dict)

    def __post_init__(self):
        both = set(self.fluxes) & set(self.dirichlet)
        if both:
            raise ContractError(
                f"compartment {self.compartment}: node {min(both)} has both a flux and a Dirichlet condition"
            )


def stiffness_matrix(mesh, K):
    """Assemble ``int K grad(phi_a) . grad(phi_b)`` for tensor field values ``K`` (M, 3, 3)."""
    g = mesh.shape_gradients
    local = np.einsum("cai,cij,cbj->cab", g, K, g) * mesh.volumes[:, None, None]
    rows = np.repeat(mesh.cells, 4, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, 4)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def lumped_mass(mesh, density):
    """Nodal weights ``sum_cells density * V / 4``."""
    w = np.repeat(density * mesh.volumes / 4.0, 4)
    return np.bincount(mesh.cells.ravel(), weights=w, minlength=mesh.n_nodes)


def consistent_mass(mesh):
    local = np.full((4, 4), 1.0 / 20.0) + np.eye(4) / 20.0
    vals = mesh.volumes[:, None, None] * local[None]
    rows = np.repeat(mesh.cells, 4, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, 4)).ravel()
    n = mesh.n_nodes
    return sp.csr_matrix((vals.ravel(), (rows, cols)), shape=(n, n))


@dataclass
class DarcySystem:
    """Block system over all compartments with Dirichlet rows eliminated."""

    mesh: object
    params: object
    ids: tuple
    A: sp.csr_matrix  # full block matrix
    b: np.ndarray  # full rhs (point + volume sources)
    dirichlet: np.ndarray  # bool mask over all dofs
    values: np.ndarray  # Dirichlet values (zeros elsewhere)
    point_fluxes: dict  # compartment -> (nodes, Q)
    A_ff: sp.csr_matrix = None
    b_f: np.ndarray = None
    _lu: object = None

    @property
    def n_nodes(self):
        return self.mesh.n_nodes

    def offset(self, cid):
        return self.ids.index(cid) * self.n_nodes

    def free(self):
        return ~self.dirichlet


def assemble(mesh, params, sources, volume_sources=None):
    """Build the coupled linear system.

    ``volume_sources`` optionally maps compartment -> nodal source density
    (1/s), integrated with the consistent mass matrix.
    """
    ids = params.ids
    n = mesh.n_nodes
    nc = len(ids)
    blocks = [[None] * nc for _ in range(nc)]
    diag_extra = [np.zeros(n) for _ in ids]
    for a, cid in enumerate(ids):
        blocks[a][a] = stiffness_matrix(mesh, params.K[cid].values)
    for i, j in params.pairs():
        m = lumped_mass(mesh, params.exchange(i, j))
        a, c = ids.index(i), ids.index(j)
        diag_extra[a] += m
        diag_extra[c] += m
        off = sp.diags(-m)
        blocks[a][c] = off if blocks[a][c] is None else blocks[a][c] + off
        blocks[c][a] = off if blocks[c][a] is None else blocks[c][a] + off
    for a in range(nc):
        blocks[a][a] = blocks[a][a] + sp.diags(diag_extra[a])
    A = sp.bmat(blocks, format="csr")

    b = np.zeros(nc * n)
    dirichlet = np.zeros(nc * n, dtype=bool)
    values = np.zeros(nc * n)
    point = {}
    seen = set()
    for src in sources:
        if src.compartment not in ids:
            raise ContractError(f"source for unknown compartment {src.compartment}")
        if src.compartment in seen:
            raise ContractError(f"compartment {src.compartment} given two SourceSpecs")
        seen.add(src.compartment)
        off = ids.index(src.compartment) * n
        fn = np.array(sorted(src.fluxes), dtype=np.int64)
        fq = np.array([src.fluxes[k] for k in fn], dtype=float)
        if len(fn) and (fn.min() < 0 or fn.max() >= n):
            raise ContractError("flux source node out of range")
        np.add.at(b, off + fn, fq)
        point[src.compartment] = (fn, fq)
        for node, val in src.dirichlet.items():
            if not 0 <= node < n:
                raise ContractError("Dirichlet node out of range")
            dirichlet[off + node] = True
            values[off + node] = val
    if volume_sources:
        M = consistent_mass(mesh)
        for cid, f in volume_sources.items():
            off = ids.index(cid) * n
            b[off : off + n] += M @ np.asarray(f, dtype=float)
    if not dirichlet.any():
        raise SolverError("no Dirichlet node in any compartment: the coupled system is singular")

    free = ~dirichlet
    A_ff = A[free][:, free].tocsr()
    b_f = b[free] - A[free][:, dirichlet] @ values[dirichlet]
    return DarcySystem(mesh, params, ids, A, b, dirichlet, values, point, A_ff, b_f)


def update_dirichlet(system, compartment, values):
    """Return a copy of ``system`` with new Dirichlet values for ``compartment`` (dict node -> p)."""
    n = system.n_nodes
    off = system.offset(compartment)
    vals = system.values.copy()
    for node, v in values.items():
        if not system.dirichlet[off + node]:
            raise ContractError(f"node {node} is not a Dirichlet node of compartment {compartment}")
        vals[off + node] = v
    free = system.free()
    b_f = system.b[free] - system.A[free][:, system.dirichlet] @ vals[system.dirichlet]
    return DarcySystem(
        system.mesh, system.params, system.ids, system.A, system.b, system.dirichlet, vals,
        system.point_fluxes, system.A_ff, b_f, system._lu,
    )


def update_fluxes(system, compartment, fluxes):
    """Return a copy of ``system`` with new point fluxes (dict node -> Q) for ``compartment``."""
    off = system.offset(compartment)
    b = system.b.copy()
    old_n, old_q = system.point_fluxes.get(compartment, (np.zeros(0, int), np.zeros(0)))
    np.subtract.at(b, off + old_n, old_q)
    fn = np.array(sorted(fluxes), dtype=np.int64)
    fq = np.array([fluxes[k] for k in fn], dtype=float)
    np.add.at(b, off + fn, fq)
    point = dict(system.point_fluxes)
    point[compartment] = (fn, fq)
    free = system.free()
    b_f = b[free] - system.A[free][:, system.dirichlet] @ system.values[system.dirichlet]
    return DarcySystem(
        system.mesh, system.params, system.ids, system.A, b, system.dirichlet, system.values,
        point, system.A_ff, b_f, system._lu,
    )


@dataclass(frozen=True)
class PressureSolution:
    """Converged pressures with derived velocities and exchange fluxes.

    ``exchange[(i, j)]`` is the per-cell flux J from i to j (1/s) for every
    coupled pair with i < j; ``reactions[i]`` maps Dirichlet nodes to the
    flux injected there (m^3/s, negative when the node drains).
    """

    ids: tuple
    pressures: dict
    velocities: dict
    exchange: dict
    reactions: dict
    point_fluxes: dict
    iterations: int = 0
    residuals: list = field(default_factory=list)
    relative_residual: float = 0.0

    def J(self, i, j):
        """Exchange flux from compartment i into j per cell (antisymmetric in i, j)."""
        if (i, j) in self.exchange:
            return self.exchange[(i, j)].values
        if (j, i) in self.exchange:
            return -self.exchange[(j, i)].values
        return np.zeros_like(next(iter(self.exchange.values())).values) if self.exchange else 0.0


def darcy_velocity(mesh, p, K, name="w"):
    """Per-cell ``w = -K grad p`` from nodal P1 pressures."""
    pv = p.values if isinstance(p, NodeField) else np.asarray(p)
    Kv = K.values if isinstance(K, CellField) else np.asarray(K)
    if len(pv) != mesh.n_nodes or len(Kv) != mesh.n_cells:
        raise ContractError("field sizes do not match the mesh")
    grad = np.einsum("cai,ca->ci", mesh.shape_gradients, pv[mesh.cells])
    w = -np.einsum("cij,cj->ci", Kv, grad)
    cid = p.compartment_id if isinstance(p, NodeField) else 0
    return CellField(name, w, cid)


def _pcg(A, b, x0, tol, maxiter):
    """Jacobi-preconditioned conjugate gradients; returns (x, iterations, residual history)."""
    d = A.diagonal()
    if np.any(d <= 0):
        raise SolverError("matrix has non-positive diagonal; it is not SPD")
    Minv = 1.0 / d
    x = np.array(x0, dtype=float)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b), 0, [0.0]
    z = Minv * r
    p = z.copy()
    rz = r @ z
    hist = [np.linalg.norm(r) / bnorm]
    for k in range(1, maxiter + 1):
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverError("conjugate gradients met a non-positive curvature direction", hist)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rel = np.linalg.norm(r) / bnorm
        hist.append(rel)
        if rel <= tol:
            # guard against drift of the recursive residual
            rel_true = np.linalg.norm(b - A @ x) / bnorm
            if rel_true <= tol:
                hist[-1] = rel_true
                return x, k, hist
            r = b - A @ x
        z = Minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(
        f"conjugate gradients did not reach relative residual {tol:g} in {maxiter} iterations "
        f"(last {hist[-1]:.3e})",
        hist,
    )


def solve_multicompartment(system, tol=1e-10, method="cg", x0=None, maxiter=None):
    """Solve the assembled system and derive velocities, exchange and reaction fluxes.

    ``method='cg'`` runs Jacobi-preconditioned CG; ``'direct'`` uses a sparse
    LU factorization cached on the system object.
    """
    free = system.free()
    nf = int(free.sum())
    if method == "cg":
        guess = np.zeros(nf) if x0 is None else np.asarray(x0, float)[free]
        u_f, its, hist = _pcg(system.A_ff, system.b_f, guess, tol, maxiter or 10 * nf)
    elif method == "direct":
        if system._lu is None:
            system._lu = spla.splu(system.A_ff.tocsc())
        u_f = system._lu.solve(system.b_f)
        its = 1
        bn = np.linalg.norm(system.b_f)
        hist = [np.linalg.norm(system.b_f - system.A_ff @ u_f) / bn if bn else 0.0]
    else:
        raise ContractError(f"unknown linear solver {method!r}")
    u = system.values.copy()
    u[free] = u_f
    return _postprocess(system, u, its, hist)


def _postprocess(system, u, its, hist):
    mesh, params, ids = system.mesh, system.params, system.ids
    n = mesh.n_nodes
    pressures, velocities = {}, {}
    for a, cid in enumerate(ids):
        p = NodeField("p", u[a * n : (a + 1) * n], cid)
        pressures[cid] = p
        velocities[cid] = darcy_velocity(mesh, p, params.K[cid])
    exchange = {}
    for i, j in params.pairs():
        dp = (pressures[i].values - pressures[j].values)[mesh.cells].mean(axis=1)
        exchange[(i, j)] = CellField(f"J_{i}{j}", params.exchange(i, j) * dp)
    residual = system.A @ u - system.b
    reactions = {}
    for a, cid in enumerate(ids):
        mask = system.dirichlet[a * n : (a + 1) * n]
        nodes = np.nonzero(mask)[0]
        reactions[cid] = dict(zip(nodes.tolist(), residual[a * n + nodes].tolist()))
    free = system.free()
    bn = np.linalg.norm(system.b_f)
    rel = float(np.linalg.norm(residual[free]) / bn) if bn else float(np.linalg.norm(residual[free]))
    return PressureSolution(
        ids=ids,
        pressures=pressures,
        velocities=velocities,
        exchange=exchange,
        reactions=reactions,
        point_fluxes={k: v for k, v in system.point_fluxes.items()},
        iterations=its,
        residuals=hist,
        relative_residual=rel,
    )


def compartment_balance(solution, mesh):
    """Per compartment: point sources + Dirichlet reactions - exchange outflow (m^3/s).

    Zero up to solver tolerance for a converged solution.
    """
    out = {}
    V = mesh.volumes
    for cid in solution.ids:
        q = float(np.sum(solution.point_fluxes.get(cid, (None, np.zeros(0)))[1]))
        q += float(sum(solution.reactions.get(cid, {}).values()))
        for other in solution.ids:
            if other != cid:
                q -= float(np.sum(V * solution.J(cid, other)))
        out[cid] = q
    return out
