"""Calibration losses: cross-entropy, Soft-ECE and the expectation consistency loss.

Three calibration paradigms are supported. Each one reduces the confidence
matrix ``S`` (n, K) and the posterior estimate ``p`` to one or more *groups*
of (binning statistic, posterior target):

* ``canonical``  one group, statistic ``S`` itself (simplex anchors),
  target the K-vector ``p``; bin gaps use the L2 norm
* ``top-label``  one group, statistic ``max_k S_k``, target the scalar
  P(Y* = Yhat | X); bin gaps use the absolute value
* ``class-wise`` K groups, statistic ``S_k``, target ``p_k``

Differentiable pieces take and return :class:`ecl.autodiff.Node` objects.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from math import comb

import numpy as np

from . import autodiff as ad
from .kernels import binned_sums, nearest_anchor, prox_updates, uniform_bin_index

log = logging.getLogger(__name__)

PARADIGMS = ("canonical", "top-label", "class-wise")
DEFAULT_EPS = 1e-8
DEFAULT_LATTICE_RESOLUTION = 14  # B = 15 for K = 2, B = 120 for K = 3
DEFAULT_SCALAR_BINS = 15


def check_paradigm(paradigm):
    if paradigm not in PARADIGMS:
        raise ValueError(f"unknown paradigm {paradigm!r}; expected one of {PARADIGMS}")
    return paradigm


def simplex_lattice(n_classes, resolution):
    """All points (i_1, ..., i_K) / m with non-negative integers summing to m."""
    pts = []
    for combo in combinations_with_replacement(range(n_classes), resolution):
        counts = np.bincount(combo, minlength=n_classes)
        pts.append(counts / resolution)
    pts = np.array(sorted(pts, key=lambda p: tuple(-p)))
    assert len(pts) == comb(resolution + n_classes - 1, n_classes - 1)
    return pts


def _min_sq_spacing(anchors):
    if len(anchors) < 2:
        return 1.0
    diff = anchors[:, None, :] - anchors[None, :, :]
    d = (diff ** 2).sum(-1)
    return d[~np.eye(len(anchors), dtype=bool)].min()


@dataclass
class AnchorGrid:
    """Bin anchors plus soft-assignment temperature and stabilizer."""

    paradigm: str
    anchors: np.ndarray  # (B, D); D = K for canonical, 1 otherwise
    tau: float
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        check_paradigm(self.paradigm)
        self.anchors = np.atleast_2d(np.asarray(self.anchors, dtype=np.float64))
        if self.paradigm != "canonical" and self.anchors.shape[1] != 1:
            self.anchors = self.anchors.reshape(-1, 1)
        if not self.tau > 0:
            raise ValueError("temperature tau must be positive")
        if not self.eps > 0:
            raise ValueError("stabilizer eps must be positive")

    @property
    def n_bins(self):
        return self.anchors.shape[0]

    @classmethod
    def scalar(cls, n_bins=DEFAULT_SCALAR_BINS, paradigm="top-label", tau=None, eps=DEFAULT_EPS):
        """Anchors (2j - 1) / (2B), j = 1..B, at the centres of equal-width bins."""
        anchors = (2.0 * np.arange(1, n_bins + 1) - 1.0) / (2.0 * n_bins)
        if tau is None:
            tau = 0.5 / n_bins ** 2
        return cls(paradigm, anchors[:, None], tau, eps)

    @classmethod
    def simplex(cls, n_classes, resolution=DEFAULT_LATTICE_RESOLUTION, tau=None, eps=DEFAULT_EPS):
        anchors = simplex_lattice(n_classes, resolution)
        if tau is None:
            tau = 0.5 * _min_sq_spacing(anchors)
        return cls("canonical", anchors, tau, eps)

    @classmethod
    def for_paradigm(cls, paradigm, n_classes, n_bins=DEFAULT_SCALAR_BINS,
                     resolution=DEFAULT_LATTICE_RESOLUTION, tau=None, eps=DEFAULT_EPS):
        if check_paradigm(paradigm) == "canonical":
            return cls.simplex(n_classes, resolution, tau, eps)
        return cls.scalar(n_bins, paradigm, tau, eps)

    def hard_index(self, points):
        """Hard bin of each row: equal-width bins for scalars, nearest anchor on the simplex."""
        points = np.asarray(points, dtype=np.float64)
        if self.paradigm == "canonical":
            return nearest_anchor(points, self.anchors)
        return uniform_bin_index(points.ravel(), self.n_bins)


# ------------------------------------------------------------------ views

def paradigm_groups(S, p, paradigm):
    """Split (S, p) into the (statistic, target) groups of a paradigm.

    ``S`` and ``p`` may be Nodes or arrays. For ``top-label`` ``p`` is the
    (n, 1) correctness-probability estimate.
    """
    check_paradigm(paradigm)
    is_node = isinstance(S, ad.Node)
    if is_node and not isinstance(p, ad.Node):
        p = ad.const(p)
    if paradigm == "canonical":
        return [(S, p)]
    if paradigm == "top-label":
        s_val = S.value if is_node else np.asarray(S)
        top = np.argmax(s_val, axis=1)
        if is_node:
            return [(ad.gather(S, top), p)]
        p = np.asarray(p, dtype=np.float64).reshape(-1, 1)
        return [(s_val[np.arange(len(top)), top][:, None], p)]
    K = S.shape[1]
    if is_node:
        return [(ad.columns(S, k), ad.columns(p, k)) for k in range(K)]
    S, p = np.asarray(S), np.asarray(p)
    return [(S[:, k:k + 1], p[:, k:k + 1]) for k in range(K)]


def _bin_gap(diff, paradigm):
    if paradigm == "canonical":
        return ad.norm(diff, axis=1)
    return ad.absolute(diff)


# ------------------------------------------------------------------ losses

def cross_entropy(S, Y):
    """Mean negative log-likelihood of one-hot ``Y`` under row-simplex ``S``."""
    Y = np.asarray(Y, dtype=np.float64)
    if S.shape != Y.shape:
        raise ad.ShapeError(f"cross_entropy: S {S.shape} vs Y {Y.shape}")
    return -ad.sum(ad.mul(ad.log(S), Y)) * (1.0 / S.shape[0])


def binary_cross_entropy(q, c):
    c = np.asarray(c, dtype=np.float64).reshape(-1, 1)
    return -ad.sum(ad.mul(ad.log(q), c) + ad.mul(ad.log(1.0 - q), 1.0 - c)) * (1.0 / q.shape[0])


def soft_assign(points, grid):
    """Soft bin membership: row softmax of -||point - anchor||^2 / tau."""
    if not grid.tau > 0:
        raise ValueError("temperature tau must be positive")
    points = points if isinstance(points, ad.Node) else ad.const(points)
    A = grid.anchors
    if points.shape[1] != A.shape[1]:
        raise ad.ShapeError(f"points have dimension {points.shape[1]}, anchors {A.shape[1]}")
    sq_p = ad.sqnorm(points, axis=1)                       # (n, 1)
    cross = ad.matmul(points, ad.const(A.T))               # (n, B)
    sq_a = ad.const((A * A).sum(axis=1)[None, :])          # (1, B)
    dist = sq_p - 2.0 * cross + sq_a
    return ad.softmax(dist * (-1.0 / grid.tau))


@dataclass
class BinStats:
    n_s: ad.Node  # (B, 1) soft counts
    n_t: ad.Node
    m_s: ad.Node  # (B, D) weighted sums
    m_t: ad.Node
    E_s: ad.Node  # (B, D) stabilized weighted means
    E_t: ad.Node
    w: ad.Node    # (B, 1) target proportions


def bin_stats(omega_s, omega_t, p_s, p_t, grid):
    n_s = ad.transpose(ad.sum(omega_s, axis=0))
    n_t = ad.transpose(ad.sum(omega_t, axis=0))
    total_t = float(n_t.value.sum())
    if not total_t > 0:
        raise ValueError("no target mass in any bin")
    m_s = ad.matmul(ad.transpose(omega_s), p_s)
    m_t = ad.matmul(ad.transpose(omega_t), p_t)
    E_s = m_s / (n_s + grid.eps)
    E_t = m_t / (n_t + grid.eps)
    w = n_t / ad.sum(n_t)
    return BinStats(n_s, n_t, m_s, m_t, E_s, E_t, w)


def ecl_soft(S_s, S_t, p_s, p_t, grid):
    """Differentiable ECL: sum_j w_j ||E_s,j - E_t,j|| summed over paradigm groups."""
    total = None
    for (a_s, q_s), (a_t, q_t) in zip(paradigm_groups(S_s, p_s, grid.paradigm),
                                      paradigm_groups(S_t, p_t, grid.paradigm)):
        st = bin_stats(soft_assign(a_s, grid), soft_assign(a_t, grid), q_s, q_t, grid)
        term = ad.sum(st.w * _bin_gap(st.E_s - st.E_t, grid.paradigm))
        total = term if total is None else total + term
    return total


def soft_ece(conf, correct, grid):
    """Soft-binned top-label ECE: sum_j w_j |mean confidence_j - mean correctness_j|."""
    conf = conf if isinstance(conf, ad.Node) else ad.const(conf)
    if conf.shape[0] == 0:
        raise ValueError("soft_ece needs a non-empty batch")
    correct = ad.const(np.asarray(correct, dtype=np.float64).reshape(-1, 1))
    omega = soft_assign(conf, grid)
    n = ad.transpose(ad.sum(omega, axis=0))
    c_bar = ad.matmul(ad.transpose(omega), conf) / (n + grid.eps)
    a_bar = ad.matmul(ad.transpose(omega), correct) / (n + grid.eps)
    w = n / ad.sum(n)
    return ad.sum(w * ad.absolute(c_bar - a_bar))


# ------------------------------------------------------------------ hard ECL

@dataclass
class HardEcl:
    value: float
    skipped_bins: int = 0
    skipped_target_mass: float = 0.0

    def __float__(self):
        return self.value


def ecl_hard(S_s, S_t, p_s, p_t, paradigm, n_bins=DEFAULT_SCALAR_BINS, grid=None):
    """Binned Monte-Carlo ECL with bins formed on the target statistic.

    Bins whose source level set is empty are skipped; their count and target
    mass are reported on the result.
    """
    check_paradigm(paradigm)
    if len(S_t) == 0:
        raise ValueError("ecl_hard needs target samples")
    if grid is None:
        K = np.asarray(S_s).shape[1]
        grid = AnchorGrid.for_paradigm(paradigm, K, n_bins=n_bins)
    B = grid.n_bins
    n_t_total = len(S_t)
    value, skipped, skipped_mass = 0.0, 0, 0.0
    for (a_s, q_s), (a_t, q_t) in zip(paradigm_groups(S_s, p_s, paradigm),
                                      paradigm_groups(S_t, p_t, paradigm)):
        cnt_s, sum_s = binned_sums(grid.hard_index(a_s), q_s, B)
        cnt_t, sum_t = binned_sums(grid.hard_index(a_t), q_t, B)
        for j in np.flatnonzero(cnt_t > 0):
            if cnt_s[j] == 0:
                skipped += 1
                skipped_mass += cnt_t[j] / n_t_total
                continue
            gap = sum_s[j] / cnt_s[j] - sum_t[j] / cnt_t[j]
            value += cnt_t[j] / n_t_total * float(np.sqrt(gap @ gap))
    if skipped:
        log.debug("ecl_hard skipped %d bins with empty source level set (target mass %.4f)",
                  skipped, skipped_mass)
    return HardEcl(value, skipped, skipped_mass)


# ------------------------------------------------------------------ proximal

def shrink(v, tau):
    """Proximal map of tau * ||.||: max(0, 1 - tau / ||v||) v."""
    v = np.asarray(v, dtype=np.float64)
    if tau < 0:
        raise ValueError("shrink threshold must be non-negative")
    nv = float(np.sqrt(np.sum(v * v)))
    if nv <= tau:
        return np.zeros_like(v)
    return (1.0 - tau / nv) * v


def prox_bin_update(u_s, u_t, m_s, n_s, m_t, n_t, w, n_prox):
    """Alternating shrink updates for one bin, starting from the cached pair."""
    u_s = np.array(u_s, dtype=np.float64)
    u_t = np.array(u_t, dtype=np.float64)
    if not (n_s > 0 and n_t > 0):
        raise ValueError("soft counts must be positive; filter empty bins first")
    mean_s, mean_t = np.asarray(m_s) / n_s, np.asarray(m_t) / n_t
    for _ in range(n_prox):
        u_s = u_t + shrink(mean_s - u_t, w / (2.0 * n_s))
        u_t = u_s + shrink(mean_t - u_s, w / (2.0 * n_t))
    return u_s, u_t


def aux_objective(u_s, u_t, m_s, n_s, m_t, n_t, w, sq_s=0.0, sq_t=0.0):
    """Value of the per-bin auxiliary objective G_j.

    ``sum_i omega_i ||u - p_i||^2`` is written as ``n ||u||^2 - 2 u.m + sq``
    with ``sq = sum_i omega_i ||p_i||^2``.
    """
    u_s, u_t = np.asarray(u_s, float), np.asarray(u_t, float)
    return (w * np.linalg.norm(u_s - u_t)
            + n_s * u_s @ u_s - 2.0 * u_s @ m_s + sq_s
            + n_t * u_t @ u_t - 2.0 * u_t @ m_t + sq_t)


@dataclass
class BinLedger:
    """Cached per-bin auxiliaries, shape (groups, B, D), initialised to zero."""

    u_s: np.ndarray
    u_t: np.ndarray
    alpha_ema: float = 0.1
    n_prox: int = 3
    skipped_iterations: int = 0

    @classmethod
    def zeros(cls, grid, n_classes, alpha_ema=0.1, n_prox=3):
        groups = n_classes if grid.paradigm == "class-wise" else 1
        D = grid.anchors.shape[1]
        shape = (groups, grid.n_bins, D)
        return cls(np.zeros(shape), np.zeros(shape), alpha_ema, n_prox)

    def copy(self):
        return BinLedger(self.u_s.copy(), self.u_t.copy(), self.alpha_ema, self.n_prox,
                         self.skipped_iterations)

    def to_dict(self):
        return {"shape": list(self.u_s.shape), "u_s": self.u_s.ravel().tolist(),
                "u_t": self.u_t.ravel().tolist(), "alpha_ema": self.alpha_ema,
                "n_prox": self.n_prox, "skipped_iterations": self.skipped_iterations}

    @classmethod
    def from_dict(cls, d):
        shape = tuple(d["shape"])
        return cls(np.array(d["u_s"], dtype=np.float64).reshape(shape),
                   np.array(d["u_t"], dtype=np.float64).reshape(shape),
                   d["alpha_ema"], d["n_prox"], d.get("skipped_iterations", 0))


def aux_quadratic(omega, p, u):
    """sum_i sum_j omega_ij ||u_j - p_i||^2 with ``u`` a constant (B, D) array."""
    u = np.asarray(u, dtype=np.float64)
    sq_p = ad.sqnorm(p, axis=1)                                   # (n, 1)
    cross = ad.matmul(p, ad.const(u.T))                           # (n, B)
    dist = sq_p - 2.0 * cross + ad.const((u * u).sum(axis=1)[None, :])
    return ad.sum(omega * dist)


MIN_SOFT_COUNT = 1e-12


def ecl_minibatch_step(S_s, S_t, p_s, p_t, grid, ledger):
    """One mini-batch step of the auxiliary-variable ECL.

    Runs the proximal updates from the cached auxiliaries, EMA-updates the
    cache and returns ``(loss, ledger)``; the loss is the quadratic part with
    the freshly computed auxiliaries treated as constants. Returns
    ``(None, ledger)`` when the target batch carries no soft mass.
    """
    ledger = ledger.copy()
    groups_s = paradigm_groups(S_s, p_s, grid.paradigm)
    groups_t = paradigm_groups(S_t, p_t, grid.paradigm)
    total = None
    a = ledger.alpha_ema
    for g, ((a_s, q_s), (a_t, q_t)) in enumerate(zip(groups_s, groups_t)):
        om_s, om_t = soft_assign(a_s, grid), soft_assign(a_t, grid)
        n_s = om_s.value.sum(axis=0)
        n_t = om_t.value.sum(axis=0)
        if not n_t.sum() > 0:
            log.warning("target batch has no soft mass; skipping ECL for this iteration")
            ledger.skipped_iterations += 1
            return None, ledger
        m_s = om_s.value.T @ q_s.value
        m_t = om_t.value.T @ q_t.value
        w = n_t / n_t.sum()
        live = (n_s > MIN_SOFT_COUNT) & (n_t > MIN_SOFT_COUNT)
        ns_live = np.where(live, n_s, 0.0)
        nt_live = np.where(live, n_t, 0.0)
        ut_s, ut_t = prox_updates(ledger.u_s[g], ledger.u_t[g], m_s, ns_live, m_t, nt_live, w,
                                  ledger.n_prox)
        ledger.u_s[g] = np.where(live[:, None], (1 - a) * ledger.u_s[g] + a * ut_s, ledger.u_s[g])
        ledger.u_t[g] = np.where(live[:, None], (1 - a) * ledger.u_t[g] + a * ut_t, ledger.u_t[g])
        mask = ad.const(live.astype(np.float64)[None, :])
        term = aux_quadratic(om_s * mask, q_s, ut_s) + aux_quadratic(om_t * mask, q_t, ut_t)
        total = term if total is None else total + term
    return total, ledger


# ------------------------------------------------------------------ weighting

def adaptive_lambda(ce_sum, ecl_sum, gamma=1.0, cap=1e6):
    """lambda = (ce_sum / ecl_sum) ** gamma, capped at ``cap``."""
    if ecl_sum <= 0:
        return float(cap)
    if ce_sum < 0:
        raise ValueError("loss sums must be non-negative")
    return float(min((ce_sum / ecl_sum) ** gamma, cap))


@dataclass
class LossBalancer:
    """Running loss sums since the start of training, feeding :func:`adaptive_lambda`."""

    gamma: float = 1.0
    cap: float = 1e6
    ce_sum: float = 0.0
    ecl_sum: float = 0.0
    trace: list = field(default_factory=list)

    def update(self, ce, ecl):
        self.ce_sum += float(ce)
        self.ecl_sum += float(ecl)
        lam = adaptive_lambda(self.ce_sum, self.ecl_sum, self.gamma, self.cap)
        self.trace.append((float(ce), float(ecl), lam))
        return lam
