"""Steady coupling of the portal tree, the hepatic tree and the Darcy continuum.

Portal terminals inject their flux into compartment 1 as nodal sources and
read back the compartment-1 pressure at their node. Hepatic terminals impose
their pressure on compartment 3 as nodal Dirichlet values and read back the
drained flux as the reaction at that node. Boundary data are ramped over the
first N outer iterations (pseudo-time continuation).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .darcy import SourceSpec, assemble, solve_multicompartment, update_dirichlet, update_fluxes
from .errors import ConfigurationError, ContractError, CouplingError, SolverError
from .flow1d import Fluid, TreeFlowBC, solve_tree_flow

log = logging.getLogger(__name__)

PORTAL, FILTRATION, HEPATIC = 1, 2, 3


@dataclass(frozen=True)
class CouplingOptions:
    """Outer-loop settings.

    ``update`` is ``'anderson'`` (default) or ``'relaxation'``. ``omega`` is
    the relaxation factor of the latter; ``beta`` is the mixing factor of the
    former, kept small because the tissue response to a shift of flux between
    portal terminals is much stiffer than the tree's.
    """

    n_pseudo: int = 10
    max_iter: int = 200
    tol: float = 1e-6
    update: str = "anderson"
    omega: float = 0.5
    beta: float = 1e-3
    memory: int = 10
    linear_solver: str = "cg"
    linear_tol: float = 1e-10
    consecutive: int = 2
    backtrack: int = 20

    def __post_init__(self):
        if self.n_pseudo < 1:
            raise ConfigurationError("number of pseudo-steps must be >= 1", "n_pseudo")
        if self.max_iter < 1:
            raise ConfigurationError("max outer iterations must be >= 1", "max_iter")
        if not 0 < self.omega <= 1:
            raise ConfigurationError("relaxation factor must lie in (0, 1]", "omega")
        if not 0 < self.beta <= 1:
            raise ConfigurationError("mixing factor must lie in (0, 1]", "beta")
        if self.update not in ("anderson", "relaxation"):
            raise ConfigurationError(f"unknown interface update {self.update!r}", "update")
        if not self.tol > 0:
            raise ConfigurationError("tolerance must be positive", "tol")


@dataclass(frozen=True)
class InterfaceTable:
    """One row per terminal junction: tree, junction, node, compartment, flux, pressure.

    Flux is the volume flux entering the compartment at the node (m^3/s,
    negative for hepatic sinks).
    """

    tree: np.ndarray  # 'P' or 'H'
    junction: np.ndarray
    node: np.ndarray
    compartment: np.ndarray
    flux: np.ndarray
    pressure: np.ndarray

    def select(self, tree):
        m = self.tree == tree
        return InterfaceTable(*(getattr(self, f)[m] for f in ("tree", "junction", "node", "compartment", "flux", "pressure")))

    def rows(self):
        for k in range(len(self.node)):
            yield (
                str(self.tree[k]),
                int(self.junction[k]),
                int(self.node[k]),
                int(self.compartment[k]),
                float(self.flux[k]),
                float(self.pressure[k]),
            )


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    ramp: float
    residual: float
    balance_gap: float


@dataclass(frozen=True)
class CoupledFlowState:
    portal: object
    hepatic: object
    darcy: object
    interface: InterfaceTable
    log: list = field(default_factory=list)
    portal_tree: object = None
    hepatic_tree: object = None
    mesh: object = None
    params: object = None
    converged: bool = True
    stats: dict = field(default_factory=dict)

    def mass_closure(self):
        """Portal inflow, hepatic outflow, 1->2 and 2->3 exchange totals (m^3/s)."""
        V = self.mesh.volumes
        q_in = self.portal.root_flux(self.portal_tree)
        # hepatic root segment points away from the outlet; outflow is its negative flux
        q_out = -self.hepatic.root_flux(self.hepatic_tree)
        j12 = float(np.sum(V * self.darcy.J(PORTAL, FILTRATION)))
        j23 = float(np.sum(V * self.darcy.J(FILTRATION, HEPATIC)))
        return {"portal_inflow": q_in, "hepatic_outflow": q_out, "exchange_12": j12, "exchange_23": j23}

    def closure_gap(self):
        """Largest pairwise relative gap between the four closure totals."""
        vals = list(self.mass_closure().values())
        ref = max(abs(v) for v in vals)
        if ref == 0:
            return 0.0
        return max(abs(a - b) for a in vals for b in vals) / ref


def map_terminals(mesh, tree, label="tree"):
    """Nearest mesh node per terminal junction; shared nodes raise :class:`ConfigurationError`."""
    nodes = np.asarray(mesh.nearest_node(tree.positions[tree.terminals]), dtype=np.int64)
    uniq, counts = np.unique(nodes, return_counts=True)
    if np.any(counts > 1):
        node = int(uniq[np.argmax(counts > 1)])
        hits = tree.terminals[nodes == node].tolist()
        raise ConfigurationError(
            f"{label} terminal junctions {hits} map to the same mesh node {node}; refine the mesh", "mesh"
        )
    return nodes


def write_iteration_log(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "ramp", "interface_residual", "balance_gap"])
        for r in records:
            w.writerow([r.iteration, repr(float(r.ramp)), repr(float(r.residual)), repr(float(r.balance_gap))])


class _Anderson:
    """Type-II Anderson mixing on a fixed-point map y -> g(y)."""

    def __init__(self, memory, beta):
        self.m = memory
        self.beta = beta
        self.dF, self.dG = [], []
        self.prev = None

    def reset(self):
        self.dF, self.dG = [], []
        self.prev = None

    def step(self, y, g):
        f = g - y
        if self.prev is not None:
            y0, g0, f0 = self.prev
            self.dF.append(f - f0)
            self.dG.append(g - g0)
            if len(self.dF) > self.m:
                self.dF.pop(0)
                self.dG.pop(0)
        self.prev = (y.copy(), g.copy(), f.copy())
        if not self.dF:
            return y + self.beta * f
        F = np.stack(self.dF, axis=1)
        G = np.stack(self.dG, axis=1)
        gamma = np.linalg.lstsq(F, f, rcond=1e-12)[0]
        y_new = g - G @ gamma
        if self.beta != 1.0:
            y_new -= (1 - self.beta) * (f - F @ gamma)
        return y_new


class _Problem:
    """Evaluation of one outer iteration for given interface values."""

    def __init__(self, treeP, treeH, mesh, params, fluid, nodesP, nodesH, opts):
        self.treeP, self.treeH, self.mesh, self.params = treeP, treeH, mesh, params
        self.fluid = fluid
        self.nodesP, self.nodesH = nodesP, nodesH
        self.opts = opts
        self.areaP = treeP.areas[treeP.parent_segment[treeP.terminals]]
        self.areaH = treeH.areas[treeH.parent_segment[treeH.terminals]]
        self.system = assemble(
            mesh,
            params,
            [
                SourceSpec(PORTAL, fluxes={int(n): 0.0 for n in nodesP}),
                SourceSpec(HEPATIC, dirichlet={int(n): 0.0 for n in nodesH}),
            ],
        )
        # hepatic terminal velocity driven by 1 Pa across the smallest nodal
        # conductance; scales the convergence test when the flow vanishes
        diag = self.system.A.diagonal()[self.system.offset(HEPATIC) + nodesH]
        self.w_unit = float((diag / self.areaH).min()) if len(nodesH) else 0.0
        self.x_darcy = None
        self.cg_iterations = 0
        self.newton_iterations = 0

    def trees(self, s, v_in, p_out, pP, wH):
        stP = solve_tree_flow(self.treeP, TreeFlowBC("inlet-velocity", s * v_in, pP), self.fluid, warn_reynolds=False)
        stH = solve_tree_flow(self.treeH, TreeFlowBC("outlet-pressure", s * p_out, wH), self.fluid, warn_reynolds=False)
        self.newton_iterations += stP.iterations + stH.iterations
        return stP, stH

    def darcy(self, qP, pH):
        sysm = update_fluxes(self.system, PORTAL, dict(zip(self.nodesP.tolist(), qP.tolist())))
        sysm = update_dirichlet(sysm, HEPATIC, dict(zip(self.nodesH.tolist(), pH.tolist())))
        sol = solve_multicompartment(sysm, tol=self.opts.linear_tol, method=self.opts.linear_solver, x0=self.x_darcy)
        self.system._lu = sysm._lu  # keep a factorization if one was made
        self.cg_iterations += sol.iterations
        self.x_darcy = np.concatenate([sol.pressures[c].values for c in sol.ids])
        return sol

    def evaluate(self, s, v_in, p_out, pP, wH):
        """Steps 3-5: trees, Darcy, read-back. Returns new (pP, wH) and the solves."""
        stP, stH = self.trees(s, v_in, p_out, pP, wH)
        qP = stP.terminal_fluxes(self.treeP)
        pH = stH.junction_pressures[self.treeH.terminals]
        sol = self.darcy(qP, pH)
        pP_new = sol.pressures[PORTAL].values[self.nodesP]
        react = sol.reactions[HEPATIC]
        qH = np.array([react[int(n)] for n in self.nodesH])
        wH_new = qH / self.areaH
        return pP_new, wH_new, (stP, stH, sol)


def _rel_change(new, old, floor=0.0):
    den = max(np.abs(new).max(initial=0.0), floor)
    diff = np.abs(new - old).max(initial=0.0)
    if den == 0:
        return 0.0 if diff == 0 else np.inf
    return diff / den


def interface_update(treeP, treeH, nodesP, nodesH, stP, stH, solution):
    """Read back new interface values from a Darcy solution.

    Returns ``(p_portal, w_hepatic, table)``: compartment-1 pressures at the
    portal terminal nodes, hepatic terminal velocities from the reaction
    fluxes at the hepatic nodes, and the interface table of this iteration.
    """
    pP = solution.pressures[PORTAL].values[nodesP]
    react = solution.reactions[HEPATIC]
    qH = np.array([react[int(n)] for n in nodesH])
    wH = qH / treeH.areas[treeH.parent_segment[treeH.terminals]]
    qP = stP.terminal_fluxes(treeP)
    pH = stH.junction_pressures[treeH.terminals]
    nP, nH = len(nodesP), len(nodesH)
    table = InterfaceTable(
        tree=np.array(["P"] * nP + ["H"] * nH),
        junction=np.concatenate([treeP.terminals, treeH.terminals]),
        node=np.concatenate([nodesP, nodesH]),
        compartment=np.array([PORTAL] * nP + [HEPATIC] * nH),
        flux=np.concatenate([qP, qH]),
        pressure=np.concatenate([pP, pH]),
    )
    return pP, wH, table


def couple_steady(treeP, treeH, mesh, params, v_in, p_out, options=None, fluid=None, log_path=None):
    """Fixed-point pseudo-time coupling; returns a :class:`CoupledFlowState`.

    Raises :class:`CouplingError` (with the residual log) when the steady
    state is not reached within ``options.max_iter`` outer iterations.
    """
    opts = options or CouplingOptions()
    fluid = fluid or Fluid()
    if v_in < 0:
        raise ConfigurationError("inlet velocity must be >= 0", "v_in")
    if set(params.ids) != {PORTAL, FILTRATION, HEPATIC}:
        raise ContractError("coupling expects compartments 1, 2, 3")
    t0 = time.perf_counter()
    nodesP = map_terminals(mesh, treeP, "portal")
    nodesH = map_terminals(mesh, treeH, "hepatic")
    prob = _Problem(treeP, treeH, mesh, params, fluid, nodesP, nodesH, opts)
    nP, nH = len(nodesP), len(nodesH)

    # step 1
    pP = np.zeros(nP)
    wH = np.zeros(nH)
    tau = 1.0 / opts.n_pseudo
    records = []
    scale = None
    mixer = _Anderson(max(opts.memory, nP + nH + 1), opts.beta)
    calm = 0
    good = None
    converged = False
    it = 0
    try:
        while it < opts.max_iter:
            it += 1
            s = min(it * tau, 1.0)  # step 2
            # steps 3-4; an update that leaves the trees without a solution is
            # pulled back towards the last interface state that had one
            for _ in range(opts.backtrack):
                try:
                    pP_new, wH_new, (stP, stH, sol) = prob.evaluate(s, v_in, p_out, pP, wH)
                    break
                except SolverError:
                    if good is None:
                        raise
                    log.debug("outer it=%d: inner solve failed, halving the interface update", it)
                    pP = 0.5 * (pP + good[0] * s)
                    wH = 0.5 * (wH + good[1] * s)
            else:
                pP_new, wH_new, (stP, stH, sol) = prob.evaluate(s, v_in, p_out, pP, wH)
            good = (pP / s, wH / s)
            w_floor = prob.w_unit * max(np.abs(pP_new).max(initial=0.0), s * abs(p_out))
            res = max(_rel_change(pP_new, pP), _rel_change(wH_new, wH, w_floor))
            q_in = stP.root_flux(treeP)
            q_out = -stH.root_flux(treeH)
            ref = max(abs(q_in), abs(q_out))
            gap = abs(q_in - q_out) / ref if ref else 0.0
            records.append(IterationRecord(it, s, res, gap))
            log.debug("outer it=%d ramp=%.2f residual=%.3e gap=%.3e", it, s, res, gap)
            if it >= opts.n_pseudo:
                calm = calm + 1 if res < opts.tol else 0
                if calm >= opts.consecutive:
                    pP, wH = pP_new, wH_new
                    converged = True
                    break
            # step 5: interface update
            if opts.update == "relaxation":
                pP = (1 - opts.omega) * pP + opts.omega * pP_new
                wH = (1 - opts.omega) * wH + opts.omega * wH_new
                continue
            if scale is None:
                scale = (
                    max(np.abs(pP_new).max(initial=0.0), abs(p_out), 1e-300),
                    max(np.abs(wH_new).max(initial=0.0), 1e-300),
                )
            y = np.concatenate([pP / scale[0], wH / scale[1]]) / s
            g = np.concatenate([pP_new / scale[0], wH_new / scale[1]]) / s
            y = mixer.step(y, g) * s
            pP, wH = y[:nP] * scale[0], y[nP:] * scale[1]
    except SolverError as exc:
        if isinstance(exc, CouplingError):
            raise
        raise CouplingError(f"inner solve failed at outer iteration {it}: {exc}", [r.residual for r in records]) from exc
    finally:
        if log_path is not None:
            write_iteration_log(records, log_path)
    if not converged:
        raise CouplingError(
            f"coupling did not reach tolerance {opts.tol:g} in {opts.max_iter} outer iterations "
            f"(last residual {records[-1].residual:.3e})",
            [r.residual for r in records],
        )

    # final consistent state: portal tree and Darcy from the converged
    # interface, hepatic tree driven by the unrelaxed reaction fluxes
    stP = solve_tree_flow(treeP, TreeFlowBC("inlet-velocity", v_in, pP), fluid)
    stH = solve_tree_flow(treeH, TreeFlowBC("outlet-pressure", p_out, wH), fluid, warn_reynolds=False)
    sol = prob.darcy(stP.terminal_fluxes(treeP), stH.junction_pressures[treeH.terminals])
    _, wH_final, _ = interface_update(treeP, treeH, nodesP, nodesH, stP, stH, sol)
    stH = solve_tree_flow(treeH, TreeFlowBC("outlet-pressure", p_out, wH_final), fluid)
    _, _, table = interface_update(treeP, treeH, nodesP, nodesH, stP, stH, sol)
    stats = {
        "outer_iterations": it,
        "newton_iterations": prob.newton_iterations + stP.iterations + stH.iterations,
        "linear_iterations": prob.cg_iterations,
        "wall_time_s": time.perf_counter() - t0,
    }
    state = CoupledFlowState(
        portal=stP,
        hepatic=stH,
        darcy=sol,
        interface=table,
        log=records,
        portal_tree=treeP,
        hepatic_tree=treeH,
        mesh=mesh,
        params=params,
        converged=True,
        stats=stats,
    )
    stats["closure_gap"] = state.closure_gap()
    log.info("coupling converged in %d outer iterations, closure gap %.2e", it, stats["closure_gap"])
    return state
