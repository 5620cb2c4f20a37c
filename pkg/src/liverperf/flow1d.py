"""Steady flow on a vascular tree: junction continuity plus the modified
Bernoulli equation with a laminar (Poiseuille) loss, solved by Newton.

Unknowns are the junction pressures and the segment velocities (signed,
positive from tail to head). For segment ``e`` from junction ``t`` to ``h``::

    p_t + rho/2 w_{par(t)}^2 = p_h + rho/2 w_e^2 + 32 mu L_e w_e / D_e^2

where ``par(t)`` is the root-side segment at ``t`` (the root segment itself
at the root junction). Interior junctions balance ``A w`` of the parent
against the children.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractError, SolverError

log = logging.getLogger(__name__)

RHO_BLOOD = 1050.0
MU_BLOOD = 3.5e-3
RE_LAMINAR = 2300.0


@dataclass(frozen=True)
class Fluid:
    density: float = RHO_BLOOD
    viscosity: float = MU_BLOOD


@dataclass(frozen=True)
class TreeFlowBC:
    """Boundary data for :func:`solve_tree_flow`.

    mode ``'inlet-velocity'``: root segment velocity and terminal pressures.
    mode ``'outlet-pressure'``: root pressure and terminal segment velocities.
    Terminal values follow ``tree.terminals`` order; velocities are signed
    along the segment orientation (negative = flowing towards the root).
    """

    mode: str
    root_value: float
    terminal_values: np.ndarray

    def __post_init__(self):
        if self.mode not in ("inlet-velocity", "outlet-pressure"):
            raise ContractError(f"unknown boundary mode {self.mode!r}")
        object.__setattr__(self, "terminal_values", np.asarray(self.terminal_values, dtype=float).ravel())


@dataclass(frozen=True)
class TreeFlowState:
    junction_pressures: np.ndarray
    segment_velocities: np.ndarray
    fluid: Fluid
    iterations: int = 0
    residuals: list = field(default_factory=list)

    def fluxes(self, tree):
        return tree.areas * self.segment_velocities

    def root_flux(self, tree):
        e = tree.root_segment
        return float(tree.areas[e] * self.segment_velocities[e])

    def terminal_fluxes(self, tree):
        """Volumetric flux leaving the tree through each terminal (m^3/s)."""
        segs = tree.parent_segment[tree.terminals]
        return tree.areas[segs] * self.segment_velocities[segs]


def poiseuille_resistance(L, D, mu):
    """Coefficient R in ``dp = R w`` (Pa s/m)."""
    return 32.0 * mu * L / D**2


def segment_pressure_loss(w, L, D, rho, mu):
    """Laminar pressure loss ``rho/2 * lambda(w) * w|w|`` with ``lambda = 64/Re * L/D``.

    The Reynolds number cancels, leaving the signed linear form
    ``32 mu L w / D^2``, which is also well defined at ``w = 0``.
    """
    return poiseuille_resistance(L, D, mu) * np.asarray(w, dtype=float)


def reynolds(w, D, fluid):
    return fluid.density * np.abs(w) * D / fluid.viscosity


class _System:
    """Residual and Jacobian of the tree equations for fixed BCs."""

    def __init__(self, tree, bc, fluid):
        self.tree = tree
        self.nj = tree.n_junctions
        self.ns = tree.n_segments
        self.rho = fluid.density
        self.R = poiseuille_resistance(tree.lengths, tree.diameters, fluid.viscosity)
        self.A = tree.areas
        par = tree.parent_segment[tree.tails].copy()
        par[tree.tails == tree.root] = tree.root_segment
        self.upstream = par  # kinetic reference segment at each tail
        term = set(int(j) for j in tree.terminals)
        self.interior = np.array(
            [j for j in range(self.nj) if j != tree.root and j not in term], dtype=np.int64
        )
        self.bc = bc
        if len(bc.terminal_values) != len(tree.terminals):
            raise ContractError(
                f"{len(bc.terminal_values)} terminal values for {len(tree.terminals)} terminals"
            )

        # scales: pressure rows by a characteristic pressure, flux rows by a flux
        e0 = tree.root_segment
        if bc.mode == "inlet-velocity":
            w_ref = abs(bc.root_value)
            p_ref = np.abs(bc.terminal_values).max(initial=0.0)
        else:
            w_ref = np.abs(bc.terminal_values).max(initial=0.0)
            p_ref = abs(bc.root_value)
        w_ref = max(w_ref, 1e-12)
        self.p_scale = max(p_ref, 0.5 * self.rho * w_ref**2, self.R[e0] * w_ref, 1.0)
        self.q_scale = max(self.A[e0] * w_ref, 1e-30)
        self.w_scale = w_ref

        self._build_static()

    def _build_static(self):
        tree, nj, ns = self.tree, self.nj, self.ns
        rows, cols, vals = [], [], []
        # Bernoulli rows 0..ns-1: linear part  p_t - p_h - R w
        e = np.arange(ns)
        rows += [e, e, e]
        cols += [tree.tails, tree.heads, nj + e]
        vals += [np.ones(ns), -np.ones(ns), -self.R]
        # continuity rows
        r = ns
        for j in self.interior:
            pe = tree.parent_segment[j]
            rows.append([r])
            cols.append([nj + pe])
            vals.append([self.A[pe]])
            kids = list(tree.children[j])
            rows.append([r] * len(kids))
            cols.append([nj + k for k in kids])
            vals.append(-self.A[kids])
            r += 1
        # boundary rows
        bc_rows = []
        if self.bc.mode == "inlet-velocity":
            rows.append([r])
            cols.append([nj + tree.root_segment])
            vals.append([1.0])
            bc_rows.append((r, self.bc.root_value, "w"))
            r += 1
            for k, j in enumerate(tree.terminals):
                rows.append([r])
                cols.append([j])
                vals.append([1.0])
                bc_rows.append((r, self.bc.terminal_values[k], "p"))
                r += 1
        else:
            rows.append([r])
            cols.append([tree.root])
            vals.append([1.0])
            bc_rows.append((r, self.bc.root_value, "p"))
            r += 1
            for k, j in enumerate(tree.terminals):
                rows.append([r])
                cols.append([nj + tree.parent_segment[j]])
                vals.append([1.0])
                bc_rows.append((r, self.bc.terminal_values[k], "w"))
                r += 1
        if r != nj + ns:
            raise SolverError(f"tree system has {r} equations for {nj + ns} unknowns")
        self.L = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nj + ns, nj + ns)
        )
        self.b = np.zeros(nj + ns)
        for row, val, _ in bc_rows:
            self.b[row] = val
        # row scaling
        s = np.empty(nj + ns)
        s[:ns] = 1.0 / self.p_scale
        s[ns : ns + len(self.interior)] = 1.0 / self.q_scale
        for row, _, kind in bc_rows:
            s[row] = 1.0 / self.p_scale if kind == "p" else 1.0 / self.w_scale
        self.row_scale = s

    def residual(self, u):
        w = u[self.nj :]
        F = self.L @ u - self.b
        if self.rho:
            F[: self.ns] += 0.5 * self.rho * (w[self.upstream] ** 2 - w**2)
        return F * self.row_scale

    def jacobian(self, u):
        J = self.L
        if self.rho:
            w = u[self.nj :]
            e = np.arange(self.ns)
            kin = sp.csr_matrix(
                (
                    np.concatenate([self.rho * w[self.upstream], -self.rho * w]),
                    (np.concatenate([e, e]), np.concatenate([self.nj + self.upstream, self.nj + e])),
                ),
                shape=J.shape,
            )
            J = J + kin
        return sp.diags(self.row_scale) @ J

    def linear_guess(self):
        return _solve(sp.diags(self.row_scale) @ self.L, self.b * self.row_scale, self)


def _solve(J, rhs, system):
    J = sp.csc_matrix(J)
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            x = spla.spsolve(J, rhs)
        except (spla.MatrixRankWarning, RuntimeError) as exc:
            raise SolverError(f"singular tree Jacobian: {exc}; {_singular_hint(J, system)}") from None
    if not np.all(np.isfinite(x)):
        raise SolverError(f"singular tree Jacobian; {_singular_hint(J, system)}")
    return x


def _singular_hint(J, system):
    dense_rows = np.abs(J).sum(axis=1).A.ravel() if hasattr(J, "A") else np.abs(J.toarray()).sum(axis=1)
    zero = np.nonzero(dense_rows == 0)[0]
    if len(zero):
        r = int(zero[0])
        if r >= system.ns and r < system.ns + len(system.interior):
            return f"empty continuity row at junction {int(system.interior[r - system.ns])}"
        return f"empty equation row {r}"
    return "check junction connectivity and boundary data"


def _newton(sysm, u, tol, max_iter):
    F = sysm.residual(u)
    norm = float(np.abs(F).max())
    history = [norm]
    it = 0
    polish = True
    while it < max_iter and (norm > tol or polish):
        if norm <= tol:
            # one extra step once converged; quadratic convergence makes it cheap
            polish = False
        it += 1
        du = _solve(sysm.jacobian(u), -F, sysm)
        step = 1.0
        for _ in range(30):
            trial = u + step * du
            Ft = sysm.residual(trial)
            nt = float(np.abs(Ft).max())
            if nt <= norm:
                break
            step *= 0.5
        else:
            break
        u, F, norm = trial, Ft, nt
        history.append(norm)
        log.debug("tree Newton it=%d residual=%.3e step=%.3g", it, norm, step)
    return u, norm, history, it


def solve_tree_flow(tree, bc, fluid=Fluid(), tol=1e-10, max_iter=50, initial=None, continuation=10, warn_reynolds=True):
    """Newton solve of the tree equations.

    Starts from ``initial`` (a previous :class:`TreeFlowState`) or from the
    linear (rho = 0) solution and halves the step while the scaled residual
    grows. If that fails, the density is raised from 0 to its value in
    ``continuation`` stages. Raises :class:`SolverError` on non-convergence.
    A warning is logged for turbulent segments unless ``warn_reynolds`` is off.
    """
    sysm = _System(tree, bc, fluid)
    if initial is not None:
        u0 = np.concatenate([initial.junction_pressures, initial.segment_velocities])
    else:
        u0 = sysm.linear_guess()
    u, norm, history, it = _newton(sysm, u0, tol, max_iter)
    if not norm <= tol and fluid.density > 0 and continuation:
        log.debug("tree Newton stalled at %.3e; continuing in density", norm)
        u = sysm.linear_guess()
        for k in range(1, continuation + 1):
            stage = _System(tree, bc, Fluid(fluid.density * k / continuation, fluid.viscosity))
            u, norm, h, n = _newton(stage, u, tol, max_iter)
            history += h
            it += n
            if not norm <= tol:
                break
    if not norm <= tol:
        raise SolverError(f"tree Newton did not converge: residual {norm:.3e} after {it} iterations", history)

    w = u[sysm.nj :]
    re = reynolds(w, tree.diameters, fluid)
    if warn_reynolds and np.any(re > RE_LAMINAR):
        log.warning(
            "Reynolds number %.0f exceeds %.0f on %d segment(s); laminar loss model is outside its range",
            re.max(),
            RE_LAMINAR,
            int(np.count_nonzero(re > RE_LAMINAR)),
        )
    return TreeFlowState(
        junction_pressures=u[: sysm.nj].copy(),
        segment_velocities=w.copy(),
        fluid=fluid,
        iterations=it,
        residuals=history,
    )


def bernoulli_residuals(tree, state):
    """Unscaled per-segment Bernoulli residual (Pa)."""
    p, w = state.junction_pressures, state.segment_velocities
    rho, mu = state.fluid.density, state.fluid.viscosity
    up = tree.parent_segment[tree.tails].copy()
    up[tree.tails == tree.root] = tree.root_segment
    return (
        p[tree.tails]
        + 0.5 * rho * w[up] ** 2
        - p[tree.heads]
        - 0.5 * rho * w**2
        - segment_pressure_loss(w, tree.lengths, tree.diameters, rho, mu)
    )


def continuity_residuals(tree, state):
    """Net flux into every non-root, non-terminal junction (m^3/s)."""
    q = state.fluxes(tree)
    out = []
    term = set(int(j) for j in tree.terminals)
    for j in range(tree.n_junctions):
        if j == tree.root or j in term:
            continue
        out.append(q[tree.parent_segment[j]] - q[list(tree.children[j])].sum())
    return np.array(out)
