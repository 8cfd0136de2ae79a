import numpy as np
import pytest
from scipy import stats

from fastar_lab.exceptions import DomainError, ShapeMismatchError, SingularCovarianceError
from fastar_lab.models import GaussianFieldConfig, Mixture2dConfig, TaskConfig
from fastar_lab.toylab import (
    GaussianFieldSpec,
    Mixture2dSpec,
    analytic_conditional,
    energy_distance,
    moment_error,
    sample_field,
    sample_mixture,
    task_sampler,
)


@pytest.fixture
def field():
    return GaussianFieldSpec.from_config(GaussianFieldConfig(height=2, width=3, token_dim=2, channel_correlation=0.4))


def test_field_covariance_is_a_correlation_matrix(field):
    assert field.covariance.shape == (12, 12)
    np.testing.assert_allclose(np.diag(field.covariance), 1.0)
    np.testing.assert_allclose(field.covariance, field.covariance.T)
    assert np.all(np.linalg.eigvalsh(field.covariance) > 0)
    # channels of the same token are correlated as configured
    assert field.covariance[0, 1] == pytest.approx(0.4, rel=1e-4)


def test_scalar_indices_are_token_major(field):
    np.testing.assert_array_equal(field.scalar_indices([0, 4]), [0, 1, 8, 9])
    with pytest.raises(DomainError):
        field.scalar_indices([6])


def test_field_rejects_bad_covariance():
    with pytest.raises(ShapeMismatchError):
        GaussianFieldSpec(1, 1, 2, np.zeros(2), np.eye(3))
    spec = GaussianFieldSpec(1, 1, 2, np.zeros(2), np.array([[1.0, 1.0], [1.0, 1.0]]) - np.eye(2) * 2.0)
    with pytest.raises(SingularCovarianceError):
        spec.cholesky


def test_conditional_matches_direct_inverse(field, rng):
    known = [1, 4]
    values = rng.standard_normal((2, 2))
    result = analytic_conditional(field, known, values)
    u = field.scalar_indices(known)
    m = field.scalar_indices(result.masked_positions)
    s = field.covariance
    gain = s[np.ix_(m, u)] @ np.linalg.inv(s[np.ix_(u, u)])
    np.testing.assert_allclose(result.mean, gain @ values.reshape(-1), atol=1e-10)
    np.testing.assert_allclose(result.covariance, s[np.ix_(m, m)] - gain @ s[np.ix_(u, m)], atol=1e-10)
    np.testing.assert_array_equal(result.masked_positions, [0, 2, 3, 5])
    assert result.token_mean(2).shape == (4, 2)


def test_conditional_without_clamps_is_the_marginal(field):
    result = analytic_conditional(field, [], np.zeros(0))
    np.testing.assert_array_equal(result.mean, field.mean)
    np.testing.assert_array_equal(result.covariance, field.covariance)


def test_conditional_rejects_bad_clamps(field):
    with pytest.raises(DomainError):
        analytic_conditional(field, [1, 1], np.zeros(4))
    with pytest.raises(ShapeMismatchError):
        analytic_conditional(field, [1], np.zeros(3))


def test_conditional_samples_have_conditional_moments(field, rng):
    result = analytic_conditional(field, [0, 5], rng.standard_normal(4))
    samples = result.sample(rng, 20000)
    report = moment_error(samples, result.mean, result.covariance)
    assert report.mean_error < 0.05
    assert report.cov_error < 0.05


def test_field_samples_have_field_moments(field, rng):
    grids = sample_field(field, rng, 20000)
    assert grids.shape == (20000, 2, 3, 2)
    report = moment_error(grids.reshape(20000, -1), field.mean, field.covariance)
    assert report.mean_error < 0.05
    assert report.cov_error < 0.05


def test_energy_distance_matches_scipy_in_one_dimension(rng):
    a, b = rng.standard_normal(200), rng.standard_normal(150) + 0.5
    assert energy_distance(a, b) == pytest.approx(stats.energy_distance(a, b) ** 2, rel=1e-9)


def test_energy_distance_properties(rng):
    a = rng.standard_normal((100, 2))
    assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)
    assert energy_distance(a, a + 3.0) > energy_distance(a, a + 0.5)
    with pytest.raises(DomainError):
        energy_distance(np.zeros((0, 2)), a)
    with pytest.raises(ShapeMismatchError):
        energy_distance(a, np.zeros((5, 3)))


def test_moment_error_needs_two_samples():
    with pytest.raises(DomainError):
        moment_error(np.zeros((1, 2)), np.zeros(2), np.eye(2))


def test_mixture_moments_and_labels(rng):
    spec = Mixture2dSpec.from_config(Mixture2dConfig(num_components=4, radius=2.0, std=0.1, conditional=True))
    mean, cov = spec.moments()
    np.testing.assert_allclose(mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(cov, (0.01 + 2.0) * np.eye(2), atol=1e-12)
    points, labels = sample_mixture(spec, rng, 5000, labels=np.full(5000, 1))
    np.testing.assert_array_equal(labels, 1)
    np.testing.assert_allclose(points.mean(axis=0), spec.moments(1)[0], atol=0.01)
    with pytest.raises(DomainError):
        sample_mixture(spec, rng, 2, labels=[0, 4])


def test_mixture_rejects_bad_weights():
    with pytest.raises(DomainError):
        Mixture2dSpec(np.zeros((2, 2)), 0.1, np.array([0.7, 0.7]))


def test_task_samplers():
    rng = np.random.default_rng(0)
    tokens, labels = task_sampler(TaskConfig(gaussian_field=GaussianFieldConfig(height=2, width=2)))(rng, 5)
    assert tokens.shape == (5, 4, 2)
    np.testing.assert_array_equal(labels, 0)

    tokens, labels = task_sampler(TaskConfig(kind="mixture2d", mixture2d=Mixture2dConfig(conditional=True)))(rng, 50)
    assert tokens.shape == (50, 1, 2)
    assert labels.max() < 8
    assert len(np.unique(labels)) > 1
