"""Pure-NumPy versions of the binning and proximal kernels."""
import numpy as np


def uniform_bin_index(x, n_bins):
    j = np.floor(np.asarray(x, dtype=np.float64) * n_bins).astype(np.intp)
    return np.clip(j, 0, n_bins - 1)


def nearest_anchor(points, anchors):
    points = np.asarray(points, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    d = np.zeros((points.shape[0], anchors.shape[0]))
    for c in range(points.shape[1]):
        diff = points[:, c, None] - anchors[None, :, c]
        d = d + diff * diff
    # argmin returns the first minimum, matching the compiled tie rule
    return np.argmin(d, axis=1).astype(np.intp)


def binned_sums(idx, values, n_bins):
    idx = np.asarray(idx, dtype=np.intp)
    values = np.asarray(values, dtype=np.float64)
    if idx.size and (idx.min() < 0 or idx.max() >= n_bins):
        raise IndexError("bin index out of range")
    counts = np.bincount(idx, minlength=n_bins).astype(np.float64)
    sums = np.zeros((n_bins, values.shape[1]))
    np.add.at(sums, idx, values)
    return counts, sums


def _shrink_step(target, base, m, n, w, active):
    tau = w / (2.0 * n)
    v = m / n[:, None] - base
    nrm = np.zeros(v.shape[0])
    for c in range(v.shape[1]):
        nrm = nrm + v[:, c] * v[:, c]
    nrm = np.sqrt(nrm)
    scale = np.zeros_like(nrm)
    keep = nrm > tau
    scale[keep] = 1.0 - tau[keep] / nrm[keep]
    new = base + scale[:, None] * v
    target[active] = new[active]


def prox_updates(u_s, u_t, m_s, n_s, m_t, n_t, w, n_iter):
    """In-place alternating proximal updates over every bin with positive counts."""
    active = (n_s > 0.0) & (n_t > 0.0)
    if not active.any():
        return
    safe_ns = np.where(active, n_s, 1.0)
    safe_nt = np.where(active, n_t, 1.0)
    for _ in range(n_iter):
        _shrink_step(u_s, u_t, m_s, safe_ns, w, active)
        _shrink_step(u_t, u_s, m_t, safe_nt, w, active)
