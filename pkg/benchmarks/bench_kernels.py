"""Compare the compiled and numpy transport kernels.

    python3 benchmarks/bench_kernels.py [--cells 6000] [--depth 10] [--repeat 200]

Both backends run on identical inputs; the script checks that their outputs
agree to roundoff and prints the time per call and the speed-up.
"""

import argparse
import time

import numpy as np
import scipy.sparse as sp

from liverperf.kernels import backends


def advect_inputs(n, rng):
    # upwind-like operator: diagonal plus ~4 off-diagonal inflow entries per row
    A = sp.random(n, n, density=min(1.0, 4.0 / n), random_state=rng, format="csr") * 0.05
    A = (A + sp.diags(1.0 - np.asarray(A.sum(axis=1)).ravel())).tocsr()
    A.sort_indices()
    s = rng.random(n)
    src = 1e-3 * rng.random(n)
    return (A.indptr.astype(np.int32), A.indices.astype(np.int32), A.data.astype(float), s, src, np.empty(n))


def network_inputs(depth, rng, L=64):
    # full binary tree, root 0; every non-root junction has one incoming segment
    nj = 2 ** (depth + 1) - 1
    parent = (np.arange(1, nj) - 1) // 2
    order = np.arange(nj, dtype=np.int64)
    fixed = np.zeros(nj, np.uint8)
    fixed[0] = 1
    fixed_val = np.zeros(nj)
    fixed_val[0] = 0.4
    in_ptr = np.concatenate([[0, 0], np.arange(1, nj)]).astype(np.int64)
    in_seg = np.arange(nj - 1, dtype=np.int64)
    seg_up = parent.astype(np.int64)
    seg_k = rng.integers(0, L - 1, nj - 1).astype(np.int64)
    seg_theta = rng.random(nj - 1)
    seg_weight = np.ones(nj - 1)
    hist = rng.random((nj, L))
    return order, fixed, fixed_val, in_ptr, in_seg, seg_up, seg_k, seg_theta, seg_weight, hist


def timed(fn, repeat):
    fn()
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=6000, help="rows of the advection operator")
    ap.add_argument("--depth", type=int, default=10, help="depth of the binary network")
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    avail = backends()
    print(f"backends: {', '.join(n for n, _ in avail)}")
    rng = np.random.default_rng(args.seed)
    adv = advect_inputs(args.cells, rng)
    net = network_inputs(args.depth, rng)

    rows, outs = [], {}
    for name, mod in avail:
        a = tuple(x.copy() for x in adv)
        t_adv = timed(lambda: mod.advect_step(*a), args.repeat)
        n = tuple(x.copy() for x in net)
        pos = [0]

        def step():
            pos[0] = (pos[0] + 1) % n[-1].shape[1]
            mod.network_step(*n, pos[0])

        t_net = timed(step, args.repeat)
        # equivalence on a fresh copy
        a2 = tuple(x.copy() for x in adv)
        mod.advect_step(*a2)
        n2 = tuple(x.copy() for x in net)
        mod.network_step(*n2, 1)
        outs[name] = (a2[-1], n2[-1][:, 1])
        rows.append((name, t_adv, t_net))

    print(f"{'backend':<8} {'advect [us]':>12} {'network [us]':>13}")
    for name, ta, tn in rows:
        print(f"{name:<8} {ta * 1e6:12.1f} {tn * 1e6:13.1f}")
    if len(rows) > 1:
        (_, ca, cn), (_, pa, pn) = rows[0], rows[-1]
        print(f"speed-up {rows[0][0]} vs {rows[-1][0]}: advect x{pa / ca:.1f}, network x{pn / cn:.1f}")
        ref, other = outs[rows[-1][0]], outs[rows[0][0]]
        da = float(np.abs(ref[0] - other[0]).max())
        dn = float(np.abs(ref[1] - other[1]).max())
        print(f"max |difference|: advect {da:.2e}, network {dn:.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
