"""Simulated covariate-shift tasks and analytic oracles.

Two 2-D tasks share a fixed labeling function and differ only in where the
covariates come from:

* ``gaussian``: source N((0, 0), 5 I), target N((2, 2), 5 I)
* ``uniform``:  source U([-2.5, 2.5]^2), target U([-1.5, 3.5]^2)

The 1-D analytic example has N(-0.5, 1) source, N(+0.5, 1) target, score
``S1 = 1 - X^2 / 4`` and posterior ``P(Y1 = 1 | X) = 1 - |X| / 2``. Both maps
are clipped to [0, 1] so they stay valid on the whole real line; the clip
only touches ``|X| > 2``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import expit
from scipy.stats import norm

DOMAINS = ("source", "target")


def sine_boundary_posterior(X):
    """P(Y = class 0 | x) = logistic(2 (x2 - sin(1.5 x1))), returned as (n, 2)."""
    X = np.atleast_2d(X)
    p0 = expit(2.0 * (X[:, 1] - np.sin(1.5 * X[:, 0])))
    return np.column_stack([p0, 1.0 - p0])


LABELING_FUNCTIONS = {"sine": sine_boundary_posterior}


@dataclass
class CovariateShiftTask:
    """Sampler specification for one simulated covariate-shift task."""

    kind: str = "gaussian"
    n_per_domain: int = 400
    seed: int = 0
    source_mean: list = field(default_factory=lambda: [0.0, 0.0])
    target_mean: list = field(default_factory=lambda: [2.0, 2.0])
    cov_diag: list = field(default_factory=lambda: [5.0, 5.0])
    source_box: list = field(default_factory=lambda: [-2.5, 2.5])
    target_box: list = field(default_factory=lambda: [-1.5, 3.5])
    labeling: str = "sine"

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.labeling not in LABELING_FUNCTIONS:
            raise ValueError(f"unknown labeling function {self.labeling!r}")
        if self.n_per_domain < 1:
            raise ValueError("n_per_domain must be >= 1")

    @property
    def dim(self):
        return len(self.source_mean) if self.kind == "gaussian" else 2

    @property
    def n_classes(self):
        return 2

    def posterior(self, X):
        return LABELING_FUNCTIONS[self.labeling](X)

    def to_dict(self):
        return asdict(self)


@dataclass
class LabeledSample:
    x: np.ndarray
    y: np.ndarray
    domain: str
    true_posterior: np.ndarray | None = None


@dataclass
class DomainData:
    """Array form of a list of labeled samples from one domain."""

    X: np.ndarray
    Y: np.ndarray  # one-hot
    posterior: np.ndarray
    domain: str

    def __len__(self):
        return self.X.shape[0]

    @property
    def labels(self):
        return self.Y.argmax(axis=1)

    def samples(self):
        return [LabeledSample(self.X[i], self.Y[i], self.domain, self.posterior[i]) for i in range(len(self))]


@dataclass
class ShiftData:
    source: DomainData
    target: DomainData
    task: CovariateShiftTask

    def samples(self):
        return self.source.samples() + self.target.samples()


def draw_labels(posterior, rng):
    """Inverse-CDF draw of one class per row; returns one-hot labels."""
    u = rng.random(posterior.shape[0])
    cdf = np.cumsum(posterior, axis=1)
    k = (u[:, None] >= cdf).sum(axis=1)
    k = np.minimum(k, posterior.shape[1] - 1)
    return np.eye(posterior.shape[1])[k]


def _domain_streams(seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]


def _finish(task, X_by_domain, streams):
    parts = []
    for X, dom, rng in zip(X_by_domain, DOMAINS, streams):
        post = task.posterior(X)
        parts.append(DomainData(X, draw_labels(post, rng), post, dom))
    return ShiftData(parts[0], parts[1], task)


def sample_task(task: CovariateShiftTask) -> ShiftData:
    streams = _domain_streams(task.seed)
    n = task.n_per_domain
    if task.kind == "gaussian":
        sd = np.sqrt(np.asarray(task.cov_diag, dtype=float))
        Xs = [np.asarray(m, dtype=float) + sd * rng.standard_normal((n, len(m)))
              for m, rng in zip((task.source_mean, task.target_mean), streams)]
    else:
        Xs = [rng.uniform(lo, hi, size=(n, 2))
              for (lo, hi), rng in zip((task.source_box, task.target_box), streams)]
    return _finish(task, Xs, streams)


def sample_gaussian_shift(n_per_domain, seed):
    return sample_task(CovariateShiftTask(kind="gaussian", n_per_domain=n_per_domain, seed=seed))


def sample_uniform_shift(n_per_domain, seed):
    return sample_task(CovariateShiftTask(kind="uniform", n_per_domain=n_per_domain, seed=seed))


# --------------------------------------------------------------------------
# 1-D analytic example


def _symmetric_posterior(x):
    return np.clip(1.0 - 0.5 * np.abs(x), 0.0, 1.0)


@dataclass(frozen=True)
class AnalyticExample1D:
    """Binary example with a score map that is two-to-one on |X| <= 2."""

    source_mean: float = -0.5
    target_mean: float = 0.5
    posterior_kind: str = "symmetric"  # or "logistic"

    def score(self, x):
        return np.clip(1.0 - 0.25 * np.asarray(x, dtype=float) ** 2, 0.0, 1.0)

    def score_slope(self, x):
        return np.where(np.abs(x) < 2.0, -0.5 * np.asarray(x, dtype=float), 0.0)

    def posterior(self, x):
        x = np.asarray(x, dtype=float)
        if self.posterior_kind == "symmetric":
            return _symmetric_posterior(x)
        if self.posterior_kind == "logistic":
            return expit(x)
        raise ValueError(f"unknown posterior kind {self.posterior_kind!r}")

    def mean(self, domain):
        if domain == "source":
            return self.source_mean
        if domain == "target":
            return self.target_mean
        raise ValueError(f"unknown domain {domain!r}")

    def density(self, x, domain):
        return norm.pdf(x, loc=self.mean(domain), scale=1.0)

    def sample(self, n, rng):
        """Draw ``n`` covariates per domain; returns ``(x_source, x_target)``."""
        return (self.source_mean + rng.standard_normal(n), self.target_mean + rng.standard_normal(n))


SYMMETRIC_EXAMPLE = AnalyticExample1D()
ASYMMETRIC_EXAMPLE = AnalyticExample1D(posterior_kind="logistic")


def _check_score(s1):
    if not 0.0 < s1 <= 1.0:
        raise ValueError(f"score {s1} is outside the two-point range (0, 1]")


def level_set_posterior(s1, domain, example=SYMMETRIC_EXAMPLE):
    """P_d(Y1 = 1 | S1 = s1) by averaging the posterior over the level set.

    For ``s1`` in (0, 1] the level set is ``{+-2 sqrt(1 - s1)}``; the score
    slope has the same magnitude at both points, so the conditional weights
    are the domain density ratios.
    """
    _check_score(s1)
    r = 2.0 * np.sqrt(1.0 - s1)
    if r == 0.0:
        return float(example.posterior(0.0))
    pts = np.array([-r, r])
    wts = example.density(pts, domain)
    return float(np.dot(example.posterior(pts), wts) / wts.sum())


def asymmetric_example_oracle(s1, domain):
    """Level-set posterior under the logistic posterior (breaks the symmetry)."""
    return level_set_posterior(s1, domain, ASYMMETRIC_EXAMPLE)


def top_label_level_set_posterior(s_hat, domain, example=SYMMETRIC_EXAMPLE):
    """P_d(Y* = Yhat | Shat = s_hat) for s_hat in (0.5, 1).

    The level set has four points: two where S1 = s_hat (predicted class 1)
    and two where S1 = 1 - s_hat (predicted class 2). Each point is weighted
    by density / |dS1/dX|.
    """
    if not 0.5 < s_hat < 1.0:
        raise ValueError(f"top-label score {s_hat} outside (0.5, 1)")
    r_hi = 2.0 * np.sqrt(1.0 - s_hat)  # S1 = s_hat
    r_lo = 2.0 * np.sqrt(s_hat)        # S1 = 1 - s_hat
    pts = np.array([-r_hi, r_hi, -r_lo, r_lo])
    wts = example.density(pts, domain) / np.abs(example.score_slope(pts))
    post = example.posterior(pts)
    correct = np.where(example.score(pts) >= 0.5, post, 1.0 - post)
    return float(np.dot(correct, wts) / wts.sum())


QUAD_NODES = 100_000
QUAD_WINDOW = (-6.0, 6.0)


def _score_breakpoints(edges):
    inner = [e for e in edges if 0.0 < e < 1.0]
    r = 2.0 * np.sqrt(1.0 - np.asarray(inner))
    lo, hi = QUAD_WINDOW
    pts = np.concatenate([[lo, hi, -2.0, 0.0, 2.0], r, -r])
    return np.unique(pts[(pts >= lo) & (pts <= hi)])


def population_classwise_ecl(example, n_bins, n_nodes=QUAD_NODES):
    """Class-wise ECL (K = 2, equal-width bins) of the 1-D example by quadrature.

    The window is split at every preimage of a bin edge so the bin indicator
    is constant on each piece; each piece gets composite-trapezoid nodes in
    proportion to its length. Returns ``(value, tail_mass_bound)``.
    """
    from .kernels import uniform_bin_index

    edges = np.arange(1, n_bins) / n_bins
    brk = _score_breakpoints(edges)
    lo, hi = QUAD_WINDOW
    mass = {d: np.zeros((2, n_bins)) for d in DOMAINS}
    num = {d: np.zeros((2, n_bins)) for d in DOMAINS}
    for a, b in zip(brk[:-1], brk[1:]):
        m = max(int(np.ceil(n_nodes * (b - a) / (hi - lo))), 8)
        x = np.linspace(a, b, m + 1)
        s1 = example.score(0.5 * (a + b))
        post = example.posterior(x)
        stats = (s1, 1.0 - s1)
        posts = (post, 1.0 - post)
        for d in DOMAINS:
            dens = example.density(x, d)
            for k in range(2):
                j = uniform_bin_index(np.array([stats[k]]), n_bins)[0]
                mass[d][k, j] += trapezoid(dens, x)
                num[d][k, j] += trapezoid(posts[k] * dens, x)
    value = 0.0
    for k in range(2):
        for j in range(n_bins):
            if mass["source"][k, j] > 0 and mass["target"][k, j] > 0:
                gap = num["source"][k, j] / mass["source"][k, j] - num["target"][k, j] / mass["target"][k, j]
                value += mass["target"][k, j] * abs(gap)
    tail = 2.0 * norm.sf(hi - 0.5)
    return float(value), float(tail)
