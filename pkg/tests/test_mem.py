import numpy as np
import pytest

from conftest import random_spd
from core import DegenerateInputError, DimensionError, KroneckerCovariance, unvec, vec
from cortex import ParcelSet
from mem import (
    STAGE_G,
    STAGE_GM,
    STAGE_UGM,
    MemModel,
    ParcelPrior,
    default_variance,
    estimate_parameters,
    free_energy,
    free_energy_gradient,
    invert,
    logpart_active,
    logpart_silent,
    mixture_logpart,
    posterior_activity,
    reconstruct,
    run_stages,
    solve_gaussian_reference,
    value_and_gradient,
)
from optimizer import OptimizerConfig, maximize
from wavelet import CoefficientSelection, TimeBasis, WaveletConfig

L, J = 3, 4

# parcela 0 = vértices {0, 1} vista só pelos sensores {0, 1}; parcela 1 pelos sensores {2, 3}
LEADFIELD = np.array([
    [1.0, 0.5, 0.0, 0.0],
    [0.2, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.3],
    [0.0, 0.0, 0.4, 1.0],
])
PARCELS = ParcelSet([np.array([0, 1]), np.array([2, 3])], 4)


def _white_noise():
    return KroneckerCovariance(np.eye(L), np.eye(J))


def _gaussian_model(alpha=0.5, variance=0.3, noise=None, **kwargs):
    return MemModel.gaussian(
        LEADFIELD, noise or _white_noise(), PARCELS, alpha, variance,
        spatial_kernels=[np.eye(2), np.eye(2)], **kwargs
    )


def _mixture_model(rng):
    priors = [
        ParcelPrior(0.3, 0.2, 0.3 * rng.standard_normal((L, 2)), random_spd(rng, L), random_spd(rng, 2)),
        ParcelPrior(0.7, 0.5, 0.3 * rng.standard_normal((L, 2)), random_spd(rng, L), random_spd(rng, 2)),
    ]
    noise = KroneckerCovariance.normalized(random_spd(rng, L), random_spd(rng, J))
    return MemModel(LEADFIELD, noise, PARCELS, priors, [np.eye(2), np.eye(2)])


def _maximize(model, D, grad_tol=1e-9):
    def objective(x):
        return value_and_gradient(unvec(x, L, J), model, D)

    x, report = maximize(objective, np.zeros(L * J), OptimizerConfig(grad_tol=grad_tol, max_iter=2000))
    return unvec(x, L, J), report


def test_logpart_silent():
    U = np.array([[1.0, 2.0], [0.0, -1.0]])
    assert logpart_silent(U, 0.4) == pytest.approx(0.2 * 6.0)


def test_logpart_active_matches_dense_form(rng):
    prior = ParcelPrior(0.5, 1.0, rng.standard_normal((L, 2)), random_spd(rng, L), random_spd(rng, 2))
    U = rng.standard_normal((L, 2))
    u = vec(U)
    expected = u @ vec(prior.mean) + 0.5 * u @ np.kron(prior.temporal, prior.spatial) @ u
    assert logpart_active(U, prior) == pytest.approx(expected, rel=1e-12)


def test_mixture_logpart_limits():
    assert mixture_logpart(3.0, -1.0, 0.0) == -1.0
    assert mixture_logpart(3.0, -1.0, 1.0) == 3.0
    assert mixture_logpart(2.0, 2.0, 0.3) == pytest.approx(2.0)
    assert mixture_logpart(1000.0, 0.0, 0.5) == pytest.approx(1000.0 + np.log(0.5))
    expected = np.log(0.25 * np.exp(1.0) + 0.75 * np.exp(0.5))
    assert mixture_logpart(1.0, 0.5, 0.25) == pytest.approx(expected, rel=1e-14)


def test_posterior_activity_limits():
    assert posterior_activity(5.0, 0.0, 0.0) == 0.0
    assert posterior_activity(-5.0, 0.0, 1.0) == 1.0
    assert posterior_activity(1.0, 1.0, 0.3) == pytest.approx(0.3)
    assert posterior_activity(800.0, 0.0, 0.5) == pytest.approx(1.0)
    assert posterior_activity(0.0, 800.0, 0.5) == pytest.approx(0.0, abs=1e-300)
    expected = 0.25 / (0.25 + 0.75 * np.exp(0.5 - 1.0))
    assert posterior_activity(1.0, 0.5, 0.25) == pytest.approx(expected, rel=1e-14)


def test_prior_validation():
    with pytest.raises(ValueError):
        ParcelPrior.gaussian(1.5, 1.0, L, 2)
    with pytest.raises(ValueError):
        ParcelPrior.gaussian(0.5, 0.0, L, 2)
    with pytest.raises(DimensionError):
        ParcelPrior(0.5, 1.0, np.zeros((L, 3)), np.eye(L), np.eye(2))

    assert ParcelPrior.gaussian(0.5, 0.7, L, 2).gaussian_variance() == 0.7
    non_gaussian = ParcelPrior(0.5, 0.7, np.ones((L, 2)), np.eye(L), np.eye(2))
    assert non_gaussian.gaussian_variance() is None


def test_model_dimension_checks():
    with pytest.raises(DimensionError):
        MemModel.gaussian(LEADFIELD[:3], _white_noise(), PARCELS, 0.5, 1.0)
    with pytest.raises(DimensionError):
        MemModel.gaussian(LEADFIELD, _white_noise(), ParcelSet([np.arange(3)], 3), 0.5, 1.0)
    with pytest.raises(DimensionError):
        MemModel(LEADFIELD, _white_noise(), PARCELS, [ParcelPrior.gaussian(0.5, 1.0, L, 2)])


def test_free_energy_vanishes_at_origin(rng):
    model = _mixture_model(rng)
    assert free_energy(np.zeros((L, J)), model, rng.standard_normal((L, J))) == pytest.approx(0.0, abs=1e-15)


def test_gradient_matches_finite_differences(rng):
    model = _mixture_model(rng)
    D = rng.standard_normal((L, J))
    Lam = 0.5 * rng.standard_normal((L, J))

    value, grad = value_and_gradient(Lam, model, D)
    assert value == pytest.approx(free_energy(Lam, model, D), rel=1e-12)
    np.testing.assert_allclose(free_energy_gradient(Lam, model, D), grad)

    h = 1e-6
    numeric = np.zeros_like(Lam)
    for idx in np.ndindex(Lam.shape):
        E = np.zeros_like(Lam)
        E[idx] = h
        numeric[idx] = (free_energy(Lam + E, model, D) - free_energy(Lam - E, model, D)) / (2 * h)
    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-6)


def test_free_energy_is_concave_along_lines(rng):
    model = _mixture_model(rng)
    D = rng.standard_normal((L, J))
    for _ in range(5):
        Lam, direction = rng.standard_normal((L, J)), rng.standard_normal((L, J))
        values = [free_energy(Lam + t * direction, model, D) for t in (-0.1, 0.0, 0.1)]
        assert values[0] + values[2] - 2 * values[1] <= 1e-9


def test_closed_form_matches_dense_solve(rng):
    noise = KroneckerCovariance.normalized(random_spd(rng, L), random_spd(rng, J))
    model = _gaussian_model(variance=[0.3, 0.8], noise=noise)
    D = rng.standard_normal((L, J))
    Lam = solve_gaussian_reference(model, D)

    M = 0.3 * LEADFIELD[:, :2] @ LEADFIELD[:, :2].T + 0.8 * LEADFIELD[:, 2:] @ LEADFIELD[:, 2:].T
    system = np.kron(noise.temporal, noise.spatial) + np.kron(np.eye(L), M)
    np.testing.assert_allclose(vec(Lam), np.linalg.solve(system, vec(D)), rtol=1e-10, atol=1e-12)

    grad = free_energy_gradient(Lam, model, D)
    assert np.linalg.norm(grad) < 1e-10


def test_closed_form_matches_optimizer(rng):
    model = _gaussian_model(variance=0.4)
    D = rng.standard_normal((L, J))
    closed = solve_gaussian_reference(model, D)
    iterative, report = _maximize(model, D)
    assert report.converged
    np.testing.assert_allclose(iterative, closed, rtol=1e-6, atol=1e-8)


def test_closed_form_rejects_mixture_priors(rng):
    with pytest.raises(ValueError):
        solve_gaussian_reference(_mixture_model(rng), np.ones((L, J)))


def test_gaussian_reconstruction_is_scaled_backprojection(rng):
    model = _gaussian_model(variance=0.4)
    Lam = rng.standard_normal((L, J))
    est = reconstruct(Lam, model)
    np.testing.assert_allclose(est.W_hat, 0.4 * Lam @ LEADFIELD, atol=1e-14)
    assert est.time_courses is None


def test_silent_parcel_keeps_prior_activity():
    priors = [ParcelPrior(0.5, 0.1, np.zeros((L, 2)), 10.0 * np.eye(L), np.eye(2)) for _ in range(2)]
    model = MemModel(LEADFIELD, _white_noise(), PARCELS, priors)
    D = np.zeros((L, J))
    D[:, :2] = [[2.0, -1.0], [1.0, 0.5], [-1.5, 1.0]]

    Lam, report = _maximize(model, D)
    est = reconstruct(Lam, model)
    assert report.converged
    np.testing.assert_array_equal(Lam[:, 2:], 0.0)
    assert est.alpha_post[1] == pytest.approx(0.5)
    assert est.alpha_post[0] > est.alpha_post[1]
    np.testing.assert_allclose(est.W_hat[:, 2:], 0.0)


def test_estimate_parameters(rng):
    model = _gaussian_model(alpha=0.25, variance=0.6)
    W = rng.standard_normal((L, 4))
    W[:, 2:] = 0.0
    priors = estimate_parameters(W, model, shrinkage=0.1)

    block = W[:, :2]
    S = 0.9 * block @ block.T / 2 + 0.1 * np.trace(block @ block.T / 2) / L * np.eye(L)
    np.testing.assert_allclose(priors[0].mean, block)
    np.testing.assert_allclose(priors[0].temporal, S, rtol=1e-9)
    assert priors[0].alpha == 0.25 and priors[0].variance == 0.6

    # bloco nulo: sobra apenas o piso de variância
    np.testing.assert_allclose(priors[1].temporal, 1e-12 * 0.6 * np.eye(L))
    np.testing.assert_array_equal(priors[1].spatial, np.eye(2))

    with pytest.raises(ValueError):
        estimate_parameters(W, MemModel.gaussian(LEADFIELD, _white_noise(), PARCELS, 0.5, 1.0))
    with pytest.raises(DimensionError):
        estimate_parameters(W[:, :3], model)


def test_default_variance():
    v = default_variance(np.ones((L, J)), np.ones((J, 4)), _white_noise())
    assert v == pytest.approx(12.0 / (4 * 16.0))
    assert default_variance(np.ones((L, J)), np.ones((J, 4)), _white_noise(), 2.0) == pytest.approx(2 * v)
    with pytest.raises(DegenerateInputError):
        default_variance(np.zeros((L, J)), np.ones((J, 4)), _white_noise())


def test_stage_pipeline(rng):
    cfg = WaveletConfig(taps=2, padded_length=4)
    basis = TimeBasis(cfg, CoefficientSelection(np.array([0, 1, 2]), 4), 4)
    model = _gaussian_model(alpha=0.5, variance=0.5, time_basis=basis)
    W_true = np.zeros((L, 4))
    W_true[:, 0] = [1.0, -2.0, 0.5]
    D = W_true @ LEADFIELD.T + 0.05 * rng.standard_normal((L, J))

    results = run_stages(D, model, STAGE_UGM, OptimizerConfig(max_iter=1000))
    assert list(results) == [STAGE_G, STAGE_GM, STAGE_UGM]

    g = results[STAGE_G].diagnostics
    assert g.converged is True and g.iterations == 0

    for stage in (STAGE_GM, STAGE_UGM):
        r = results[stage]
        assert r.diagnostics.converged
        assert r.diagnostics.free_energy >= r.diagnostics.start_free_energy - 1e-12
        assert r.estimate.W_hat.shape == (L, 4)
        assert r.estimate.time_courses.shape == (4, 4)
        assert np.all((r.estimate.alpha_post >= 0) & (r.estimate.alpha_post <= 1))

    np.testing.assert_array_equal(
        results[STAGE_GM].model.priors[0].mean, results[STAGE_G].estimate.W_hat[:, :2]
    )


def test_invert_stops_at_requested_stage(rng):
    model = _gaussian_model()
    D = rng.standard_normal((L, J))
    r = invert(D, model, STAGE_G)
    assert r.diagnostics.stage == STAGE_G
    np.testing.assert_allclose(r.estimate.lambda_star, solve_gaussian_reference(model, D))
    with pytest.raises(ValueError):
        invert(D, model, "XYZ")


def _dense_free_energy(Lam, model, D):
    lam = vec(Lam)
    value = lam @ vec(D) - 0.5 * lam @ np.kron(model.noise.temporal, model.noise.spatial) @ lam
    for p, prior in enumerate(model.priors):
        H = np.kron(np.eye(model.n_coeffs), model.block(p).T)
        u = H @ lam
        f1 = u @ vec(prior.mean) + 0.5 * u @ np.kron(prior.temporal, prior.spatial) @ u
        f0 = 0.5 * prior.variance * u @ u
        value -= np.log(prior.alpha * np.exp(f1) + (1 - prior.alpha) * np.exp(f0))
    return value


def test_free_energy_matches_kronecker_form():
    rng = np.random.default_rng(21)
    L4, J3, K = 4, 3, 10
    parcels = ParcelSet([np.arange(6), np.arange(6, 10)], K)
    priors = [
        ParcelPrior(a, v, 0.2 * rng.standard_normal((L4, len(idx))), random_spd(rng, L4), random_spd(rng, len(idx)))
        for a, v, idx in zip((0.25, 0.6), (0.3, 0.9), parcels)
    ]
    noise = KroneckerCovariance.normalized(random_spd(rng, L4), random_spd(rng, J3))
    model = MemModel(0.4 * rng.standard_normal((J3, K)), noise, parcels, priors)
    D = rng.standard_normal((L4, J3))
    for _ in range(10):
        Lam = 0.3 * rng.standard_normal((L4, J3))
        assert free_energy(Lam, model, D) == pytest.approx(_dense_free_energy(Lam, model, D), rel=1e-10)


def test_gradient_is_monotone(rng):
    model = _mixture_model(rng)
    D = rng.standard_normal((L, J))
    for _ in range(100):
        A, B = rng.standard_normal((L, J)), rng.standard_normal((L, J))
        diff = free_energy_gradient(A, model, D) - free_energy_gradient(B, model, D)
        assert np.sum(diff * (A - B)) <= 1e-10


def test_stationary_point_explains_data(rng):
    model = _mixture_model(rng)
    D = rng.standard_normal((L, J))
    Lam, report = _maximize(model, D)
    assert report.converged
    W = reconstruct(Lam, model).W_hat
    fitted = W @ LEADFIELD.T + model.noise.temporal @ Lam @ model.noise.spatial
    np.testing.assert_allclose(fitted, D, atol=1e-6 * np.linalg.norm(D))


def test_identity_leadfield_halves_the_data(rng):
    D = rng.standard_normal((2, 3))
    model = MemModel.gaussian(
        np.eye(3), KroneckerCovariance(np.eye(2), np.eye(3)), ParcelSet([np.arange(3)], 3), 1.0, 1.0
    )
    np.testing.assert_allclose(solve_gaussian_reference(model, D), D / 2, atol=1e-14)
    np.testing.assert_allclose(invert(D, model, STAGE_G).estimate.W_hat, D / 2, atol=1e-14)


def _random_instance(rng, gaussian=False):
    """L ≤ 6, J ≤ 4, K ≤ 20, P ≤ 3, parcelas por permutação aleatória."""
    n_coeffs, n_sensors = int(rng.integers(1, 7)), int(rng.integers(1, 5))
    n_parcels = int(rng.integers(1, 4))
    n_vertices = int(rng.integers(n_parcels, 21))
    cuts = np.sort(rng.choice(np.arange(1, n_vertices), size=n_parcels - 1, replace=False))
    parcels = ParcelSet(np.split(rng.permutation(n_vertices), cuts), n_vertices)

    noise = KroneckerCovariance.normalized(random_spd(rng, n_coeffs), random_spd(rng, n_sensors))
    leadfield = 0.4 * rng.standard_normal((n_sensors, n_vertices))
    if gaussian:
        variances = rng.uniform(0.1, 2.0, size=n_parcels)
        return MemModel.gaussian(leadfield, noise, parcels, 0.5, variances)
    priors = [
        ParcelPrior(
            float(rng.uniform(0.05, 0.95)), float(rng.uniform(0.1, 1.0)),
            0.2 * rng.standard_normal((n_coeffs, len(idx))),
            random_spd(rng, n_coeffs), random_spd(rng, len(idx)),
        )
        for idx in parcels
    ]
    return MemModel(leadfield, noise, parcels, priors)


def test_free_energy_matches_kronecker_form_on_random_instances():
    rng = np.random.default_rng(50)
    for _ in range(50):
        model = _random_instance(rng)
        shape = (model.n_coeffs, model.n_components)
        D = rng.standard_normal(shape)
        Lam = 0.3 * rng.standard_normal(shape)
        assert free_energy(Lam, model, D) == pytest.approx(_dense_free_energy(Lam, model, D), rel=1e-10, abs=1e-12)

        for p, prior in enumerate(model.priors):
            U = Lam @ model.block(p)
            u = vec(U)
            dense = u @ vec(prior.mean) + 0.5 * u @ np.kron(prior.temporal, prior.spatial) @ u
            assert logpart_active(U, prior) == pytest.approx(dense, rel=1e-10, abs=1e-12)
            assert logpart_silent(U, prior.variance) == pytest.approx(0.5 * prior.variance * u @ u, rel=1e-10, abs=1e-12)


def test_gradient_matches_central_differences_on_random_instances():
    rng = np.random.default_rng(20)
    h = 1e-5
    for _ in range(20):
        model = _random_instance(rng)
        shape = (model.n_coeffs, model.n_components)
        D = rng.standard_normal(shape)
        Lam = 0.3 * rng.standard_normal(shape)

        grad = free_energy_gradient(Lam, model, D)
        numeric = np.zeros(shape)
        for idx in np.ndindex(shape):
            E = np.zeros(shape)
            E[idx] = h
            numeric[idx] = (free_energy(Lam + E, model, D) - free_energy(Lam - E, model, D)) / (2 * h)
        assert np.linalg.norm(numeric - grad) <= 1e-6 * np.linalg.norm(grad) + 1e-9

        for _ in range(100):
            A, B = rng.standard_normal(shape), rng.standard_normal(shape)
            diff = free_energy_gradient(A, model, D) - free_energy_gradient(B, model, D)
            assert np.sum(diff * (A - B)) <= 1e-10


def test_closed_form_matches_optimizer_on_random_instances():
    rng = np.random.default_rng(10)
    for _ in range(10):
        model = _random_instance(rng, gaussian=True)
        L_, J_ = model.n_coeffs, model.n_components
        D = rng.standard_normal((L_, J_))
        closed = solve_gaussian_reference(model, D)

        def objective(x):
            return value_and_gradient(unvec(x, L_, J_), model, D)

        x, _ = maximize(objective, np.zeros(L_ * J_), OptimizerConfig(grad_tol=1e-10, max_iter=2000))
        assert np.linalg.norm(unvec(x, L_, J_) - closed) <= 1e-6 * np.linalg.norm(closed)
