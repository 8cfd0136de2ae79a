"""Toy token distributions with exact conditionals, and sample-set metrics.

Gaussian fields stand in for latent token grids: every scalar of an
``h x w x token_dim`` grid is jointly normal, so the conditional law of any
masked set given the rest is known in closed form. Scalars are ordered
token-major in raster order (``index = position * token_dim + channel``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from pydantic import BaseModel, Field
from scipy.spatial.distance import cdist

from fastar_lab.conditioner import flatten_grid
from fastar_lab.exceptions import DomainError, ShapeMismatchError, SingularCovarianceError
from fastar_lab.models import GaussianFieldConfig, Mixture2dConfig, TaskConfig, TaskKind

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianFieldSpec:
    """Mean and full covariance over all ``h * w * token_dim`` scalars of a grid."""

    height: int
    width: int
    token_dim: int
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        size = self.height * self.width * self.token_dim
        if self.mean.shape != (size,) or self.covariance.shape != (size, size):
            shapes = f"mean {self.mean.shape} / covariance {self.covariance.shape}"
            raise ShapeMismatchError("GaussianFieldSpec", f"{shapes} for {size} scalars")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-12):
            raise SingularCovarianceError("field covariance is not symmetric")

    @property
    def tokens(self) -> int:
        return self.height * self.width

    @property
    def cholesky(self) -> np.ndarray:
        try:
            return scipy.linalg.cholesky(self.covariance, lower=True)
        except np.linalg.LinAlgError as exc:
            raise SingularCovarianceError("field covariance is not positive definite") from exc

    def scalar_indices(self, positions: Sequence[int]) -> np.ndarray:
        """Scalar indices of whole tokens at raster ``positions``."""
        positions = np.asarray(positions, dtype=np.int64).reshape(-1)
        if positions.size and (positions.min() < 0 or positions.max() >= self.tokens):
            raise DomainError(f"position out of range for a {self.tokens}-token field")
        return (positions[:, None] * self.token_dim + np.arange(self.token_dim)[None, :]).reshape(-1)

    @classmethod
    def from_config(cls, config: GaussianFieldConfig) -> "GaussianFieldSpec":
        """Squared-exponential kernel over grid distance, times a channel correlation, normalised to unit variance."""
        rows, cols = np.divmod(np.arange(config.height * config.width), config.width)
        coords = np.stack([rows, cols], axis=1).astype(np.float64)
        spatial = np.exp(-cdist(coords, coords, "sqeuclidean") / (2.0 * config.length_scale**2))
        channel = np.full((config.token_dim, config.token_dim), config.channel_correlation)
        np.fill_diagonal(channel, 1.0)
        covariance = np.kron(spatial, channel) + config.jitter * np.eye(spatial.shape[0] * config.token_dim)
        scale = 1.0 / np.sqrt(np.diag(covariance))
        covariance = covariance * scale[:, None] * scale[None, :]
        mean = np.full(covariance.shape[0], config.mean)
        return cls(config.height, config.width, config.token_dim, mean, (covariance + covariance.T) / 2.0)


@dataclass(frozen=True)
class ConditionalGaussian:
    """Law of the masked scalars given clamped known tokens."""

    masked_positions: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray

    def token_mean(self, token_dim: int) -> np.ndarray:
        """Conditional mean reshaped to (|M|, token_dim)."""
        return self.mean.reshape(-1, token_dim)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Exact draws of the masked scalars, shape (n, |M| * token_dim)."""
        if self.mean.size == 0:
            return np.zeros((n, 0))
        factor = scipy.linalg.cholesky(self.covariance + 1e-12 * np.eye(self.mean.size), lower=True)
        return self.mean[None, :] + rng.standard_normal((n, self.mean.size)) @ factor.T


def sample_field(spec: GaussianFieldSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """n exact draws via the Cholesky factor, shape (n, h, w, token_dim)."""
    draws = spec.mean[None, :] + rng.standard_normal((n, spec.mean.size)) @ spec.cholesky.T
    return draws.reshape(n, spec.height, spec.width, spec.token_dim)


def analytic_conditional(spec: GaussianFieldSpec, known_positions: Sequence[int], known_values) -> ConditionalGaussian:
    """Schur-complement conditional of the unclamped tokens.

    mean_M + S_MU S_UU^-1 (z_U - mean_U) and S_MM - S_MU S_UU^-1 S_UM, with
    ``known_values`` shaped (|U|, token_dim) or flat.
    """
    known_positions = np.asarray(known_positions, dtype=np.int64).reshape(-1)
    if np.unique(known_positions).size != known_positions.size:
        raise DomainError("clamped positions must be distinct")
    masked_positions = np.setdiff1d(np.arange(spec.tokens), known_positions)
    u = spec.scalar_indices(known_positions)
    m = spec.scalar_indices(masked_positions)
    z_u = np.asarray(known_values, dtype=np.float64).reshape(-1)
    if z_u.size != u.size:
        raise ShapeMismatchError("analytic_conditional", f"{z_u.size} clamped values for {u.size} scalars")

    mean_m = spec.mean[m]
    cov_mm = spec.covariance[np.ix_(m, m)]
    if u.size == 0:
        return ConditionalGaussian(masked_positions, mean_m.copy(), cov_mm.copy())
    cov_uu = spec.covariance[np.ix_(u, u)]
    cov_mu = spec.covariance[np.ix_(m, u)]
    try:
        factor = scipy.linalg.cho_factor(cov_uu, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("covariance of the clamped tokens is singular") from exc
    gain = scipy.linalg.cho_solve(factor, cov_mu.T).T
    mean = mean_m + gain @ (z_u - spec.mean[u])
    covariance = cov_mm - gain @ cov_mu.T
    return ConditionalGaussian(masked_positions, mean, (covariance + covariance.T) / 2.0)


@dataclass(frozen=True)
class Mixture2dSpec:
    """Isotropic Gaussian components in the plane; class label k selects component k."""

    means: np.ndarray
    std: float
    weights: np.ndarray
    conditional: bool = False

    def __post_init__(self):
        if self.means.ndim != 2 or self.means.shape[1] != 2 or self.weights.shape != (self.means.shape[0],):
            raise ShapeMismatchError("Mixture2dSpec", f"means {self.means.shape} / weights {self.weights.shape}")
        if not np.isclose(self.weights.sum(), 1.0) or np.any(self.weights < 0):
            raise DomainError("mixture weights must be non-negative and sum to 1")

    @property
    def num_components(self) -> int:
        return self.means.shape[0]

    def moments(self, label: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the whole mixture, or of one component."""
        if label is not None:
            return self.means[label].copy(), self.std**2 * np.eye(2)
        mean = self.weights @ self.means
        centered = self.means - mean
        return mean, self.std**2 * np.eye(2) + (self.weights[:, None] * centered).T @ centered

    @classmethod
    def from_config(cls, config: Mixture2dConfig) -> "Mixture2dSpec":
        angles = 2.0 * np.pi * np.arange(config.num_components) / config.num_components
        means = config.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        weights = np.full(config.num_components, 1.0 / config.num_components)
        return cls(means=means, std=config.std, weights=weights, conditional=config.conditional)


def sample_mixture(spec: Mixture2dSpec, rng: np.random.Generator, n: int, labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Draw (n, 2) points and their component labels; given ``labels`` fix the components."""
    if labels is None:
        labels = rng.choice(spec.num_components, size=n, p=spec.weights)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != n:
        raise ShapeMismatchError("sample_mixture", f"{labels.size} labels for {n} samples")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_components):
        raise DomainError(f"component label outside 0..{spec.num_components - 1}")
    points = spec.means[labels] + spec.std * rng.standard_normal((n, 2))
    return points, labels


class MetricReport(BaseModel):
    """Distance and moment errors of a generated sample set against a target."""

    energy_distance: Optional[float] = Field(default=None, ge=0.0)
    mean_error: Optional[float] = Field(default=None, ge=0.0)
    cov_error: Optional[float] = Field(default=None, ge=0.0)
    n_samples: int = Field(ge=0)
    n_reference: Optional[int] = None


def _as_rows(samples, what: str) -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    arr = arr.reshape(arr.shape[0], -1)
    if arr.shape[0] == 0:
        raise DomainError(f"{what} is empty")
    return arr


def energy_distance(samples_a, samples_b) -> float:
    """2 E|a - b| - E|a - a'| - E|b - b'| over all pairs (V-statistic); rows are points."""
    a = _as_rows(samples_a, "first sample set")
    b = _as_rows(samples_b, "second sample set")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError("energy_distance", f"dimensions {a.shape[1]} and {b.shape[1]}")
    value = 2.0 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
    return max(float(value), 0.0)


def moment_error(samples, target_mean, target_cov) -> MetricReport:
    """Max-abs errors of the empirical mean and (unbiased) covariance against a target."""
    x = _as_rows(samples, "sample set")
    if x.shape[0] < 2:
        raise DomainError("moment error needs at least two samples")
    target_mean = np.asarray(target_mean, dtype=np.float64).reshape(-1)
    target_cov = np.asarray(target_cov, dtype=np.float64).reshape(target_mean.size, target_mean.size)
    if target_mean.size != x.shape[1]:
        dims = f"{x.shape[1]}-dimensional samples vs {target_mean.size}-dimensional target"
        raise ShapeMismatchError("moment_error", dims)
    empirical_cov = np.atleast_2d(np.cov(x, rowvar=False))
    return MetricReport(
        mean_error=float(np.max(np.abs(x.mean(axis=0) - target_mean))),
        cov_error=float(np.max(np.abs(empirical_cov - target_cov))),
        n_samples=x.shape[0],
    )


BatchSampler = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]


def task_sampler(task: TaskConfig) -> BatchSampler:
    """Sampler of training batches for a task: tokens (n, T, token_dim) and class labels (n,)."""
    if task.kind == TaskKind.GAUSSIAN_FIELD:
        field_spec = GaussianFieldSpec.from_config(task.gaussian_field)

        def draw_field(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
            return flatten_grid(sample_field(field_spec, rng, n)), np.zeros(n, dtype=np.int64)

        return draw_field

    mixture_spec = Mixture2dSpec.from_config(task.mixture2d)

    def draw_mixture(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        points, components = sample_mixture(mixture_spec, rng, n)
        labels = components if mixture_spec.conditional else np.zeros(n, dtype=np.int64)
        return points[:, None, :], labels

    return draw_mixture
