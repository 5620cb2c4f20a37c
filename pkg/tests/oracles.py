"""Independent reference solutions used by the tests."""

import numpy as np


def resistor_network(tree, w0, p_terminal, mu):
    """Junction pressures of the tree as a linear resistor network.

    Each segment conducts ``Q = c (p_tail - p_head)`` with the Poiseuille
    conductance ``c = pi D^4 / (128 mu L)``. The root receives ``A_0 w0``
    and terminal pressures are fixed. Dense nodal analysis, independent of
    the velocity-pressure formulation used by the solver.
    """
    nj = tree.n_junctions
    c = np.pi * tree.diameters**4 / (128.0 * mu * tree.lengths)
    L = np.zeros((nj, nj))
    for e in range(tree.n_segments):
        a, b = tree.tails[e], tree.heads[e]
        L[a, a] += c[e]
        L[b, b] += c[e]
        L[a, b] -= c[e]
        L[b, a] -= c[e]
    q = np.zeros(nj)
    e0 = tree.root_segment
    q[tree.root] = np.pi * tree.diameters[e0] ** 2 / 4 * w0
    fixed = np.zeros(nj, dtype=bool)
    fixed[tree.terminals] = True
    p = np.zeros(nj)
    p[tree.terminals] = p_terminal
    free = ~fixed
    rhs = q[free] - L[np.ix_(free, fixed)] @ p[fixed]
    p[free] = np.linalg.solve(L[np.ix_(free, free)], rhs)
    return p


def exchange_ode(t, rate):
    """``S(t) = 1 - exp(-rate t)`` for ``phi dS/dt = J (1 - S)``, ``rate = J / phi``."""
    return 1.0 - np.exp(-rate * np.asarray(t))


# degree-2 four-point rule on the reference tetrahedron
_QA, _QB = 0.5854101966249685, 0.1381966011250105
_QUAD = np.array([[_QA, _QB, _QB, _QB], [_QB, _QA, _QB, _QB], [_QB, _QB, _QA, _QB], [_QB, _QB, _QB, _QA]])


def l2_error(mesh, p_nodal, exact):
    """L2 norm of ``p_h - exact`` with a four-point rule per tetrahedron."""
    X = np.einsum("qa,cai->cqi", _QUAD, mesh.nodes[mesh.cells])
    ph = np.einsum("qa,ca->cq", _QUAD, np.asarray(p_nodal)[mesh.cells])
    return float(np.sqrt(np.sum(mesh.volumes[:, None] / 4 * (ph - exact(X)) ** 2)))


def cosine_mms(n):
    """Solve ``-lap p = pi^2 cos(pi x)`` on the unit cube, exact ``cos(pi x)``.

    Dirichlet data on x = 0 and x = 1, natural no-flux on the other faces
    (where the exact solution has zero normal derivative). Returns the L2 error.
    """
    from liverperf.darcy import SourceSpec, assemble, solve_multicompartment
    from liverperf.meshgen import box_mesh

    from conftest import single_compartment_params

    m = box_mesh(n)
    x = m.nodes[:, 0]
    bd = np.nonzero((x < 1e-12) | (x > 1 - 1e-12))[0]
    src = SourceSpec(1, dirichlet={int(k): float(np.cos(np.pi * x[k])) for k in bd})
    sys_ = assemble(m, single_compartment_params(m), [src], volume_sources={1: np.pi**2 * np.cos(np.pi * x)})
    sol = solve_multicompartment(sys_)
    return l2_error(m, sol.pressures[1].values, lambda X: np.cos(np.pi * X[..., 0]))
