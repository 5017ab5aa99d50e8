import numpy as np
import pytest
from scipy.stats import norm

from ecl.simdata import (ASYMMETRIC_EXAMPLE, SYMMETRIC_EXAMPLE, CovariateShiftTask, asymmetric_example_oracle,
                         draw_labels, level_set_posterior, population_classwise_ecl, sample_gaussian_shift,
                         sample_task, sample_uniform_shift, top_label_level_set_posterior)


def test_gaussian_shift_means_within_clt_bound():
    d = sample_gaussian_shift(400, seed=3)
    bound = 3 * np.sqrt(5 / 400)
    assert np.all(np.abs(d.source.X.mean(axis=0) - [0, 0]) < bound)
    assert np.all(np.abs(d.target.X.mean(axis=0) - [2, 2]) < bound)


def test_sampling_is_deterministic():
    a, b = sample_gaussian_shift(50, seed=9), sample_gaussian_shift(50, seed=9)
    assert np.array_equal(a.source.X, b.source.X) and np.array_equal(a.target.Y, b.target.Y)
    assert not np.array_equal(a.source.X, sample_gaussian_shift(50, seed=10).source.X)


def test_uniform_shift_support_and_mean():
    d = sample_uniform_shift(400, seed=1)
    assert d.source.X.min() >= -2.5 and d.source.X.max() <= 2.5
    assert d.target.X.min() >= -1.5 and d.target.X.max() <= 3.5
    bound = 3 * (5 / np.sqrt(12)) / np.sqrt(400)
    assert np.all(np.abs(d.source.X.mean(axis=0)) < bound)


def test_labels_are_one_hot_and_follow_posterior():
    d = sample_gaussian_shift(20_000, seed=0)
    assert np.array_equal(d.source.Y.sum(axis=1), np.ones(20_000))
    assert abs(d.source.Y[:, 0].mean() - d.source.posterior[:, 0].mean()) < 0.01


def test_draw_labels_degenerate_posteriors(rng):
    post = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert draw_labels(post, rng).argmax(axis=1).tolist() == [0, 2]


def test_samples_list_view():
    d = sample_gaussian_shift(5, seed=0)
    s = d.samples()
    assert len(s) == 10 and s[0].domain == "source" and s[-1].domain == "target"


def test_bad_task_rejected():
    with pytest.raises(ValueError):
        CovariateShiftTask(kind="laplace")
    with pytest.raises(ValueError):
        sample_task(CovariateShiftTask(labeling="nope"))


def test_worked_example_level_set_is_one_half():
    assert abs(level_set_posterior(0.75, "source") - 0.5) < 1e-9
    assert abs(level_set_posterior(0.75, "target") - 0.5) < 1e-9


@pytest.mark.parametrize("s1, expected", [(1.0, 1.0), (0.99, 0.9)])
def test_symmetric_closed_forms(s1, expected):
    for dom in ("source", "target"):
        assert level_set_posterior(s1, dom) == pytest.approx(expected, abs=1e-12)


def test_asymmetric_control_differs_across_domains():
    # two-point average with normal weights: points -1, +1
    w = norm.pdf([-0.5, 1.5])
    expected = (w[0] / (1 + np.e) + w[1] / (1 + np.exp(-1))) / w.sum()
    assert asymmetric_example_oracle(0.75, "source") == pytest.approx(expected, abs=1e-12)
    assert asymmetric_example_oracle(0.75, "source") == pytest.approx(0.39322386648, abs=1e-10)
    assert asymmetric_example_oracle(0.75, "target") == pytest.approx(0.60677613352, abs=1e-10)
    assert asymmetric_example_oracle(1.0, "source") == asymmetric_example_oracle(1.0, "target") == 0.5


def test_score_outside_range_rejected():
    with pytest.raises(ValueError):
        level_set_posterior(0.0, "source")
    with pytest.raises(ValueError):
        level_set_posterior(0.7, "elsewhere")


def test_top_label_level_sets_agree_for_symmetric_example():
    for s in (0.55, 0.8, 0.95):
        assert top_label_level_set_posterior(s, "source") == pytest.approx(
            top_label_level_set_posterior(s, "target"), abs=1e-12)


def _riemann_classwise_ecl(example, n_bins, n=2_000_001):
    # independent midpoint-rule oracle on a fine grid
    x = np.linspace(-8, 8, n)
    dx = x[1] - x[0]
    s1 = example.score(x)
    post = example.posterior(x)
    total = 0.0
    for stat, p in ((s1, post), (1 - s1, 1 - post)):
        j = np.minimum((stat * n_bins).astype(int), n_bins - 1)
        means = {}
        for d in ("source", "target"):
            dens = example.density(x, d) * dx
            mass = np.bincount(j, dens, n_bins)
            means[d] = (np.bincount(j, dens * p, n_bins), mass)
        ms, m_mass = means["source"]
        mt, t_mass = means["target"]
        ok = (m_mass > 0) & (t_mass > 0)
        total += np.sum(t_mass[ok] * np.abs(ms[ok] / m_mass[ok] - mt[ok] / t_mass[ok]))
    return total


def test_population_ecl_by_quadrature():
    val, tail = population_classwise_ecl(ASYMMETRIC_EXAMPLE, 15)
    assert val == pytest.approx(0.408108, abs=1e-6)
    assert val == pytest.approx(_riemann_classwise_ecl(ASYMMETRIC_EXAMPLE, 15), abs=1e-4)
    assert tail < 1e-7
    assert population_classwise_ecl(SYMMETRIC_EXAMPLE, 15)[0] < 1e-12
