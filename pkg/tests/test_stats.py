import numpy as np
import pytest

from dce.data import DomainTask, FeatureSet
from dce.numerics import RngState
from dce.stats import (
    StatsError,
    StatsRepo,
    build_domain_stats,
    fit_class_gaussian,
    load_repo,
    merge_repo,
    oas_shrink,
    save_repo,
)

from oracles import mp_mean_cov, mp_oas

FIVE = np.array([(0.0, 0.0), (10.0, 0.1), (20.0, -0.2), (5.0, 0.3), (15.0, 0.05)])


def test_two_point_gaussian():
    mean, cov, n = fit_class_gaussian([[0.0, 0.0], [2.0, 0.0]])
    np.testing.assert_array_equal(mean, [1.0, 0.0])
    np.testing.assert_array_equal(cov, [[2.0, 0.0], [0.0, 0.0]])
    assert n == 2


def test_single_sample_has_no_covariance():
    mean, cov, n = fit_class_gaussian([[3.0, 4.0]])
    assert cov is None and n == 1
    np.testing.assert_array_equal(mean, [3.0, 4.0])
    with pytest.raises(StatsError):
        fit_class_gaussian(np.zeros((0, 2)))


def test_five_sample_gaussian_and_oas_frozen():
    mean, cov, n = fit_class_gaussian(FIVE)
    np.testing.assert_allclose(mean, [10.0, 0.05], atol=1e-12)
    np.testing.assert_allclose(cov, [[62.5, -0.8125], [-0.8125, 0.0325]], atol=1e-12)
    rho, shrunk = oas_shrink(cov, n, 2)
    # frozen from a 50-digit evaluation of the shrinkage formulas
    assert rho == pytest.approx(0.40056180434486963769, abs=1e-12)
    np.testing.assert_allclose(
        shrunk,
        [[49.988952743543427954, -0.48704353396979342561], [-0.48704353396979342561, 12.543547256456572046]],
        atol=1e-12,
    )


def test_five_sample_against_live_oracle():
    ref_mean, ref_cov = mp_mean_cov(FIVE)
    mean, cov, n = fit_class_gaussian(FIVE)
    np.testing.assert_allclose(mean, [float(v) for v in ref_mean], atol=1e-12)
    np.testing.assert_allclose(cov, [[float(v) for v in r] for r in ref_cov], atol=1e-12)
    rho_ref, shrunk_ref = mp_oas(ref_cov, 5)
    rho, shrunk = oas_shrink(cov, n, 2)
    assert abs(rho - float(rho_ref)) < 1e-12
    np.testing.assert_allclose(shrunk, [[float(v) for v in r] for r in shrunk_ref], atol=1e-12)


@pytest.mark.parametrize("c, n", [(0.3, 2), (1.0, 5), (7.5, 100)])
def test_spherical_input_unchanged(c, n):
    S = c * np.eye(4)
    rho, shrunk = oas_shrink(S, n, 4)
    assert rho == 1.0
    np.testing.assert_allclose(shrunk, S, atol=1e-15)


def test_shrinkage_target_is_trace_over_d():
    rho, shrunk = oas_shrink(np.diag([2.0, 4.0]), 3, 2)
    assert rho == 1.0  # d=2, near-isotropic: clamped to the target
    np.testing.assert_allclose(shrunk, 3.0 * np.eye(2), atol=1e-15)


def test_oas_rejects_asymmetric():
    with pytest.raises(StatsError, match="symmetric"):
        oas_shrink(np.array([[1.0, 0.5], [0.0, 1.0]]), 5)


@pytest.mark.parametrize("seed", range(20))
def test_oas_invariants(seed):
    rng = RngState(seed)
    d = 2 + rng.below(7)
    n = 2 + rng.below(40)
    X = rng.standard_normal(n * d).reshape(n, d) * (1 + 3 * rng.uniform(d))
    _, S, _ = fit_class_gaussian(X)
    rho, shrunk = oas_shrink(S, n, d)
    assert 0.0 <= rho <= 1.0
    assert abs(np.trace(shrunk) - np.trace(S)) < 1e-12 * max(1.0, np.trace(S))
    np.testing.assert_array_equal(shrunk, shrunk.T)
    assert np.linalg.eigvalsh(shrunk).min() > -1e-12


def _task(index, blocks, d=2, C=3):
    feats = np.vstack([b for _, b in blocks])
    labels = np.concatenate([np.full(len(b), c) for c, b in blocks])
    return DomainTask(index, f"d{index}", FeatureSet(feats, labels, C), FeatureSet.empty(d, C))


def test_domain_stats_gates_small_classes():
    rng = RngState(2)
    big = rng.standard_normal(100).reshape(50, 2) * [1.0, 3.0]
    small = rng.standard_normal(6).reshape(3, 2) + 10
    gaussians, cov = build_domain_stats(_task(1, [(0, big), (2, small)]))
    assert set(gaussians) == {(1, 0), (1, 2)}
    assert cov.contributing_classes == 1
    _, S, _ = fit_class_gaussian(big)
    np.testing.assert_allclose(cov.sigma_bar, oas_shrink(S, 50)[1], atol=1e-14)
    np.testing.assert_allclose(gaussians[(1, 2)].mean, small.mean(axis=0))


def test_domain_stats_averages():
    rng = RngState(3)
    a = rng.standard_normal(60).reshape(30, 2) * [2.0, 0.5]
    b = rng.standard_normal(40).reshape(20, 2) @ np.array([[1.0, 0.8], [0.0, 0.6]])
    _, cov = build_domain_stats(_task(1, [(0, a), (1, b)]))
    A = oas_shrink(fit_class_gaussian(a)[1], 30)[1]
    B = oas_shrink(fit_class_gaussian(b)[1], 20)[1]
    np.testing.assert_allclose(cov.sigma_bar, (A + B) / 2, atol=1e-14)


def test_domain_stats_spherical():
    # two points symmetric about the mean in every axis -> c * I per class
    pts = np.array([[1, 0], [-1, 0], [0, 1], [0, -1]] * 3, dtype=float)
    _, cov = build_domain_stats(_task(1, [(0, pts), (1, pts + 5)]))
    np.testing.assert_allclose(cov.sigma_bar, np.cov(pts.T, ddof=1)[0, 0] * np.eye(2), atol=1e-14)


def test_domain_stats_insufficient_data():
    with pytest.raises(StatsError, match="insufficient data for domain covariance"):
        build_domain_stats(_task(1, [(0, np.ones((4, 2)))]))
    _, cov = build_domain_stats(_task(1, [(0, np.arange(8.0).reshape(4, 2) ** 1.5)]), cov_min_samples=3)
    assert cov.contributing_classes == 1


def test_merge_repo():
    rng = RngState(4)
    repo = StatsRepo()
    for b in (1, 2, 3):
        blocks = [(c, rng.standard_normal(30).reshape(15, 2)) for c in range(3) if (b, c) != (1, 1)]
        before = dict(repo.gaussians)
        repo = merge_repo(repo, *build_domain_stats(_task(b, blocks)))
        for key, g in before.items():
            assert repo.gaussians[key] is g
    assert repo.domains == [1, 2, 3]
    assert len(repo.gaussians) == 8
    assert repo.num_stored_floats() == 8 * 2 + 3 * 4
    with pytest.raises(StatsError, match="already merged"):
        merge_repo(repo, *build_domain_stats(_task(2, [(0, rng.standard_normal(30).reshape(15, 2))])))


def test_merge_into_empty():
    g, cov = build_domain_stats(_task(1, [(0, RngState(1).standard_normal(40).reshape(20, 2))]))
    repo = merge_repo(StatsRepo(), g, cov)
    assert repo.gaussians == g and list(repo.domain_covs) == [1]


def test_repo_roundtrip(tmp_path):
    rng = RngState(6)
    repo = StatsRepo()
    for b in (1, 2):
        repo = merge_repo(repo, *build_domain_stats(_task(b, [(c, rng.standard_normal(24).reshape(12, 2)) for c in range(3)])))
    save_repo(repo, tmp_path / "stats.json")
    back = load_repo(tmp_path / "stats.json")
    assert back.pairs() == repo.pairs()
    for key in repo.pairs():
        assert back.gaussians[key].mean.tobytes() == repo.gaussians[key].mean.tobytes()
        assert back.gaussians[key].count == repo.gaussians[key].count
    for b in repo.domains:
        assert back.domain_covs[b].sigma_bar.tobytes() == repo.domain_covs[b].sigma_bar.tobytes()
