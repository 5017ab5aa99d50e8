"""Hot-loop kernels with a compiled backend and a NumPy fallback.

The compiled module ``ecl._ckernels`` is used when it was built at install
time. Set ``ECL_PURE_PYTHON=1`` before import to force the fallback.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if not os.environ.get("ECL_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def uniform_bin_index(x, n_bins):
    """Equal-width bin index on [0, 1]: floor(x * n_bins), last bin closed."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    return _impl.uniform_bin_index(np.ascontiguousarray(x, dtype=np.float64).ravel(), int(n_bins))


def nearest_anchor(points, anchors):
    """Index of the closest anchor (squared Euclidean), ties to the lowest index."""
    points = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    anchors = np.ascontiguousarray(np.atleast_2d(anchors), dtype=np.float64)
    if points.shape[1] != anchors.shape[1]:
        raise ValueError(f"dimension mismatch: points {points.shape}, anchors {anchors.shape}")
    return _impl.nearest_anchor(points, anchors)


def binned_sums(idx, values, n_bins):
    """Per-bin counts and per-bin column sums of ``values``."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    idx = np.ascontiguousarray(idx, dtype=np.intp)
    return _impl.binned_sums(idx, values, int(n_bins))


def prox_updates(u_s, u_t, m_s, n_s, m_t, n_t, w, n_iter):
    """Run ``n_iter`` alternating shrink updates for every bin, returning new arrays.

    Bins with a non-positive soft count in either domain are left untouched.
    """
    u_s = np.array(u_s, dtype=np.float64, order="C", copy=True)
    u_t = np.array(u_t, dtype=np.float64, order="C", copy=True)
    squeeze = u_s.ndim == 1
    if squeeze:
        u_s, u_t = u_s[:, None].copy(), u_t[:, None].copy()
    m_s = np.ascontiguousarray(m_s, dtype=np.float64).reshape(u_s.shape)
    m_t = np.ascontiguousarray(m_t, dtype=np.float64).reshape(u_s.shape)
    n_s = np.ascontiguousarray(n_s, dtype=np.float64).ravel()
    n_t = np.ascontiguousarray(n_t, dtype=np.float64).ravel()
    w = np.ascontiguousarray(w, dtype=np.float64).ravel()
    _impl.prox_updates(u_s, u_t, m_s, n_s, m_t, n_t, w, int(n_iter))
    if squeeze:
        return u_s[:, 0], u_t[:, 0]
    return u_s, u_t
