"""Compiled and NumPy kernels must agree bit for bit."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecl import _pykernels, kernels
from ecl.losses import prox_bin_update

ck = pytest.importorskip("ecl._ckernels")


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


@given(st.lists(st.floats(-0.5, 1.5, allow_nan=False), min_size=1, max_size=60), st.integers(1, 40))
def test_uniform_bin_index_parity(xs, B):
    x = np.array(xs)
    a = ck.uniform_bin_index(x, B)
    b = _pykernels.uniform_bin_index(x, B)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= B - 1


def test_bin_edges_left_closed_last_closed():
    x = np.array([0.0, 1 / 15, 14 / 15, 1.0, 0.9999999])
    idx = kernels.uniform_bin_index(x, 15)
    assert idx.tolist() == [0, 1, 14, 14, 14]


def test_nearest_anchor_parity_and_ties(rng):
    anchors = rng.dirichlet(np.ones(3), 20)
    pts = rng.dirichlet(np.ones(3), 500)
    assert np.array_equal(ck.nearest_anchor(pts, anchors), _pykernels.nearest_anchor(pts, anchors))
    # equidistant point goes to the lower index
    assert kernels.nearest_anchor([[0.5, 0.5]], [[1.0, 0.0], [0.0, 1.0]]).tolist() == [0]


def test_binned_sums_parity(rng):
    idx = rng.integers(0, 7, 300)
    vals = rng.random((300, 3))
    c1, s1 = ck.binned_sums(idx.astype(np.intp), vals, 7)
    c2, s2 = _pykernels.binned_sums(idx, vals, 7)
    assert np.array_equal(c1, c2)
    assert np.allclose(s1, s2, rtol=0, atol=1e-12)
    with pytest.raises(IndexError):
        kernels.binned_sums([0, 9], np.ones(2), 7)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4), st.integers(1, 12))
def test_prox_updates_parity(seed, D, B):
    r = np.random.default_rng(seed)
    args = [r.random((B, D)), r.random((B, D)), r.random((B, D)), r.random(B) * 5,
            r.random((B, D)), r.random(B) * 5, r.random(B)]
    args[3][0] = 0.0  # an empty bin must be skipped
    out = []
    for impl in (ck, _pykernels):
        u_s, u_t = args[0].copy(), args[1].copy()
        impl.prox_updates(u_s, u_t, args[2], args[3], args[4], args[5], args[6], 5)
        out.append((u_s, u_t))
    assert np.allclose(out[0][0], out[1][0], rtol=0, atol=1e-14)
    assert np.allclose(out[0][1], out[1][1], rtol=0, atol=1e-14)
    assert np.array_equal(out[0][0][0], args[0][0])


def test_prox_kernel_matches_single_bin_loop(rng):
    B, D = 6, 3
    u_s, u_t, m_s, m_t = (rng.random((B, D)) for _ in range(4))
    n_s, n_t, w = rng.random(B) * 4 + 0.1, rng.random(B) * 4 + 0.1, rng.random(B)
    ks, kt = kernels.prox_updates(u_s, u_t, m_s, n_s, m_t, n_t, w, 7)
    for j in range(B):
        es, et = prox_bin_update(u_s[j], u_t[j], m_s[j], n_s[j], m_t[j], n_t[j], w[j], 7)
        assert np.allclose(ks[j], es, atol=1e-13) and np.allclose(kt[j], et, atol=1e-13)
