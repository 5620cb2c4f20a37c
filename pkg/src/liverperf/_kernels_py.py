"""Reference (numpy/scipy) implementations of the transport kernels."""

import numpy as np
import scipy.sparse as sp


def advect_step(indptr, indices, data, s, src, out):
    """``out = A s + src`` for CSR ``A``; returns ``(min(out), max(out))``."""
    n = len(indptr) - 1
    A = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    out[:] = A @ s + src
    if n == 0:
        return 0.0, 0.0
    return float(out.min()), float(out.max())


def network_step(order, fixed, fixed_val, in_ptr, in_seg, seg_up, seg_k, seg_theta, seg_weight, hist, pos):
    """Fill ``hist[:, pos]`` with the junction saturations at the current step.

    Junctions are visited in ``order`` (upstream first). A fixed junction
    takes ``fixed_val``; otherwise it mixes the delayed upstream values of
    its incoming segments with the given weights, and a junction without
    active inflow keeps its previous value.
    """
    L = hist.shape[1]
    prev = (pos - 1) % L
    for j in order:
        if fixed[j]:
            hist[j, pos] = fixed_val[j]
            continue
        a, b = in_ptr[j], in_ptr[j + 1]
        if a == b:
            hist[j, pos] = hist[j, prev]
            continue
        segs = in_seg[a:b]
        u = seg_up[segs]
        k = seg_k[segs]
        th = seg_theta[segs]
        i0 = (pos - k) % L
        i1 = (pos - k - 1) % L
        vals = (1.0 - th) * hist[u, i0] + th * hist[u, i1]
        hist[j, pos] = float(np.dot(seg_weight[segs], vals))
