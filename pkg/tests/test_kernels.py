import os
import subprocess
import sys

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from liverperf import _kernels_py, kernels

compiled = dict(kernels.backends()).get("cython")
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def _advect_inputs(n, seed):
    rng = np.random.default_rng(seed)
    A = sp.random(n, n, density=min(1.0, 5.0 / n), random_state=rng, format="csr") * 0.1
    A = (A + sp.diags(rng.uniform(0.1, 0.9, n))).tocsr()
    A.sort_indices()
    return A, rng.random(n), 1e-3 * rng.random(n)


def _network_inputs(nj, seed, L=16):
    rng = np.random.default_rng(seed)
    # random tree: junction j > 0 has parent in [0, j)
    parent = np.array([rng.integers(0, j) for j in range(1, nj)], dtype=np.int64)
    fixed = np.zeros(nj, np.uint8)
    fixed[0] = 1
    fixed_val = np.zeros(nj)
    fixed_val[0] = rng.random()
    in_ptr = np.concatenate([[0, 0], np.arange(1, nj)]).astype(np.int64)
    return dict(
        order=np.arange(nj, dtype=np.int64),
        fixed=fixed,
        fixed_val=fixed_val,
        in_ptr=in_ptr,
        in_seg=np.arange(nj - 1, dtype=np.int64),
        seg_up=parent,
        seg_k=rng.integers(0, L - 1, nj - 1).astype(np.int64),
        seg_theta=rng.random(nj - 1),
        seg_weight=np.ones(nj - 1),
        hist=rng.random((nj, L)),
    )


def test_python_advect_matches_sparse_product():
    A, s, src = _advect_inputs(50, 0)
    out = np.empty(50)
    lo, hi = _kernels_py.advect_step(A.indptr, A.indices, A.data, s, src, out)
    np.testing.assert_allclose(out, A @ s + src, rtol=1e-15)
    assert (lo, hi) == (out.min(), out.max())


def test_python_network_examples():
    d = _network_inputs(3, 1, L=4)
    d["seg_up"] = np.array([0, 1])
    d["seg_k"] = np.array([1, 0])
    d["seg_theta"] = np.array([0.0, 0.0])
    d["hist"] = np.zeros((3, 4))
    d["hist"][0, 0] = 0.7
    _kernels_py.network_step(*d.values(), 1)
    # junction 1 sees the root one step late; junction 2 follows junction 1 without delay
    assert d["hist"][1, 1] == 0.7
    assert d["hist"][2, 1] == 0.7
    assert d["hist"][0, 1] == d["fixed_val"][0]


@needs_compiled
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 400), st.integers(0, 10_000))
def test_advect_backends_agree(n, seed):
    A, s, src = _advect_inputs(n, seed)
    args = (A.indptr.astype(np.int32), A.indices.astype(np.int32), A.data.astype(float), s, src)
    o1, o2 = np.empty(n), np.empty(n)
    r1 = compiled.advect_step(*args, o1)
    r2 = _kernels_py.advect_step(*args, o2)
    np.testing.assert_allclose(o1, o2, rtol=1e-14, atol=1e-16)
    assert r1 == pytest.approx(r2, rel=1e-14)


@needs_compiled
@settings(max_examples=30, deadline=None)
@given(st.integers(2, 200), st.integers(0, 10_000), st.integers(0, 15))
def test_network_backends_agree(nj, seed, pos):
    d1 = _network_inputs(nj, seed)
    d2 = {k: v.copy() for k, v in d1.items()}
    compiled.network_step(*d1.values(), pos)
    _kernels_py.network_step(*d2.values(), pos)
    np.testing.assert_array_equal(d1["hist"], d2["hist"])


def test_pure_python_switch():
    code = "from liverperf import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, LIVERPERF_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
