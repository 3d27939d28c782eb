import warnings

import numpy as np
import pytest
from scipy.stats import norm

from conftest import ar_matrix, random_spd
from core import ConvergenceWarning, DegenerateInputError, KroneckerCovariance, SpdError, sample_matrix_normal
from covariance import center_samples, flip_flop, loglik_kron, regularize_spd


def _rel(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def _draw(cov, n, seed):
    return sample_matrix_normal(np.zeros(cov.shape), cov, np.random.default_rng(seed), size=n)


@pytest.fixture
def true_cov():
    return KroneckerCovariance.normalized(ar_matrix(8, 0.8), ar_matrix(6, 0.7))


def test_flip_flop_recovers_factors(true_cov):
    est, report = flip_flop(_draw(true_cov, 500, 0))
    assert report.converged
    assert _rel(est.temporal, true_cov.temporal) < 0.05
    assert _rel(est.spatial, true_cov.spatial) < 0.05


def test_flip_flop_white_noise():
    samples = np.random.default_rng(3).standard_normal((2000, 4, 3))
    est, _ = flip_flop(samples)
    assert _rel(est.temporal, np.eye(4)) < 0.05
    assert _rel(est.spatial, np.eye(3)) < 0.05


def test_flip_flop_normalization_and_monotone_loglik(rng):
    samples = rng.standard_normal((30, 5, 4)) @ random_spd(rng, 4)
    est, report = flip_flop(samples)
    assert np.trace(est.temporal) == pytest.approx(5.0, rel=1e-12)

    ll = np.asarray(report.loglik_trace)
    assert len(ll) >= 2
    assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[:-1]))


def test_flip_flop_consistency(true_cov):
    errors = []
    for n in (50, 200, 800):
        est, _ = flip_flop(_draw(true_cov, n, 11))
        errors.append(_rel(np.kron(est.temporal, est.spatial), true_cov.dense()))
    assert errors[0] > errors[1] > errors[2]


def test_flip_flop_rank_one_samples_are_singular():
    M = np.outer(np.arange(1.0, 5.0), np.array([1.0, -1.0, 2.0]))
    with pytest.raises(SpdError):
        flip_flop(np.stack([M] * 10))


def test_flip_flop_identifiability_checks():
    with pytest.raises(DegenerateInputError):
        flip_flop(np.ones((1, 3, 3)))
    with pytest.raises(DegenerateInputError):
        flip_flop(np.random.default_rng(0).standard_normal((2, 10, 3)))


def test_flip_flop_reports_non_convergence(true_cov):
    with pytest.warns(ConvergenceWarning):
        _, report = flip_flop(_draw(true_cov, 100, 5), max_iter=1)
    assert not report.converged
    assert report.iterations == 1


def test_loglik_scalar_gaussian():
    x, sigma = 0.7, 1.3
    value = loglik_kron(np.array([[[x]]]), np.array([[1.0]]), np.array([[sigma ** 2]]))
    assert value == pytest.approx(norm.logpdf(x, scale=sigma), rel=1e-12)


def test_loglik_scale_invariance(rng):
    samples = rng.standard_normal((7, 3, 4))
    t, s = random_spd(rng, 3), random_spd(rng, 4)
    assert loglik_kron(samples, 2.5 * t, s / 2.5) == pytest.approx(loglik_kron(samples, t, s), rel=1e-12)


def test_regularize_spd_examples(rng):
    S = random_spd(rng, 3)
    np.testing.assert_allclose(regularize_spd(S, 0.0), S)
    np.testing.assert_allclose(regularize_spd(S, 1.0), np.trace(S) / 3 * np.eye(3))

    R = regularize_spd(np.diag([1.0, 0.0]), 0.1)
    np.testing.assert_allclose(R, np.diag([0.95, 0.05]))
    assert np.all(np.linalg.eigvalsh(R) > 0)

    with pytest.raises(ValueError):
        regularize_spd(S, 1.5)


def test_center_samples_removes_mean(rng):
    samples = rng.standard_normal((6, 3, 2)) + 5.0
    np.testing.assert_allclose(center_samples(samples).mean(axis=0), 0.0, atol=1e-14)


def test_flip_flop_quiet_when_converged(true_cov):
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        flip_flop(_draw(true_cov, 200, 2))


def test_flip_flop_monotone_on_random_instances():
    rng = np.random.default_rng(6)
    for _ in range(10):
        n_rows, n_cols = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        cov = KroneckerCovariance.normalized(random_spd(rng, n_rows), random_spd(rng, n_cols))
        samples = sample_matrix_normal(np.zeros(cov.shape), cov, rng, size=int(rng.integers(20, 200)))
        est, report = flip_flop(samples)

        ll = np.asarray(report.loglik_trace)
        assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[:-1]))
        assert np.trace(est.temporal) == pytest.approx(n_rows, rel=1e-12)
        assert ll[-1] == pytest.approx(loglik_kron(samples, est.temporal, est.spatial), rel=1e-9)
