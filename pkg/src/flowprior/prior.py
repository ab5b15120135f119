"""Class-conditional diagonal Gaussians over the flow's latent space.

Covariances are stored as log-variances so they stay strictly positive under
gradient updates; a variance floor guards against collapsed classes. Latent
densities combine with the flow's log-determinant to give exact feature-space
densities, and posteriors normalize the latent densities across classes (the
shared Jacobian factor cancels).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi

from .errors import InitializationError, ShapeError
from .flow import FlowModel, flow_forward
from .numerics import logsumexp

logger = logging.getLogger(__name__)

LOG_TWO_PI = float(np.log(2.0 * np.pi))
VARIANCE_FLOOR = 1e-4


@dataclass
class ClassPriorSet:
    """Per-class mean and diagonal covariance, parameterized by log-variance."""

    means: np.ndarray  # (K, C)
    log_variances: np.ndarray  # (K, C)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.log_variances = np.asarray(self.log_variances, dtype=np.float64)
        if self.means.ndim != 2 or self.means.shape != self.log_variances.shape:
            raise ShapeError(
                f"means {self.means.shape} and log_variances {self.log_variances.shape} "
                "must both be (num_classes, dim)"
            )
        if self.means.shape[0] < 1:
            raise ShapeError("need at least one class")

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"means": self.means, "log_vars": self.log_variances}

    def copy(self) -> "ClassPriorSet":
        return ClassPriorSet(self.means.copy(), self.log_variances.copy())

    def apply_variance_floor(self, floor: float = VARIANCE_FLOOR) -> None:
        np.maximum(self.log_variances, np.log(floor), out=self.log_variances)

    def check_class(self, k: int) -> None:
        if not 0 <= k < self.num_classes:
            raise IndexError(f"class index {k} out of range [0, {self.num_classes})")


@dataclass
class TruncationSpec:
    """Mahalanobis radius for anchor sampling.

    ``scaled`` multiplies the radius by sqrt(dim) so the knob keeps its
    meaning as dimension grows; ``absolute`` uses it as-is.
    """

    radius_d: float = 1.0
    interpretation: str = "scaled"
    max_rejection_attempts: int = 1000

    def __post_init__(self):
        if self.radius_d <= 0:
            raise ValueError(f"radius_d must be positive, got {self.radius_d}")
        if self.interpretation not in ("absolute", "scaled"):
            raise ValueError(f"unknown interpretation {self.interpretation!r}")
        if self.max_rejection_attempts < 1:
            raise ValueError("max_rejection_attempts must be >= 1")

    def effective_radius(self, dim: int) -> float:
        if self.interpretation == "scaled":
            return self.radius_d * float(np.sqrt(dim))
        return self.radius_d


@dataclass
class TruncationStats:
    """Bookkeeping from one sample_truncated call."""

    proposals: int = 0
    accepted: int = 0
    fallback: int = 0

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposals if self.proposals else 0.0


def log_density_matrix(priors: ClassPriorSet, z: np.ndarray) -> np.ndarray:
    """log N(z | mu_k, Sigma_k) for every class; rows follow the z batch."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if zb.shape[-1] != priors.dim:
        raise ShapeError(f"latent dim {zb.shape[-1]} does not match prior dim {priors.dim}")
    var = np.exp(priors.log_variances)  # (K, C)
    diff = zb[:, None, :] - priors.means[None, :, :]  # (n, K, C)
    quad = np.sum(diff * diff / var[None, :, :], axis=-1)  # (n, K)
    norm = priors.dim * LOG_TWO_PI + priors.log_variances.sum(axis=-1)  # (K,)
    out = -0.5 * (norm[None, :] + quad)
    return out[0] if single else out


def log_prior_density(priors: ClassPriorSet, z: np.ndarray, k: int) -> float | np.ndarray:
    """Latent log density of z under class k."""
    priors.check_class(k)
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z[None, :] if single else z
    if zb.shape[-1] != priors.dim:
        raise ShapeError(f"latent dim {zb.shape[-1]} does not match prior dim {priors.dim}")
    var = np.exp(priors.log_variances[k])
    diff = zb - priors.means[k]
    quad = np.sum(diff * diff / var, axis=-1)
    norm = priors.dim * LOG_TWO_PI + priors.log_variances[k].sum()
    out = -0.5 * (norm + quad)
    return float(out[0]) if single else out


def log_feature_density(
    priors: ClassPriorSet, model: FlowModel, v: np.ndarray, k: int
) -> float | np.ndarray:
    """Feature-space log density: latent density plus the flow log-determinant."""
    z, logdet = flow_forward(model, np.asarray(v, dtype=np.float64))
    return log_prior_density(priors, z, k) + logdet


def class_posterior(priors: ClassPriorSet, model: FlowModel, v: np.ndarray) -> np.ndarray:
    """Posterior over classes; the Jacobian factor is shared and cancels."""
    z, _ = flow_forward(model, np.asarray(v, dtype=np.float64))
    logs = log_density_matrix(priors, z)
    lse = logsumexp(logs, axis=-1)
    if np.isscalar(lse) or np.ndim(lse) == 0:
        return np.exp(logs - lse)
    return np.exp(logs - np.asarray(lse)[..., None])


def _mahalanobis(cand: np.ndarray, mean: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    # Recomputed exactly as the postcondition check does, so acceptance and
    # later verification can never disagree on boundary samples.
    w = (cand - mean) / sigma
    return np.sqrt(np.sum(w * w, axis=-1))


def sample_truncated(
    priors: ClassPriorSet,
    k: int,
    spec: TruncationSpec,
    n: int,
    rng: np.random.Generator,
    with_stats: bool = False,
):
    """Draw n latents from class k's Gaussian restricted to its Mahalanobis ball.

    Rejection sampling from the unrestricted Gaussian; slots still empty after
    max_rejection_attempts rounds are built exactly as uniform direction times
    a chi-distributed radius truncated at the bound, which has the identical
    restricted distribution.
    """
    priors.check_class(k)
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    mean = priors.means[k]
    sigma = np.exp(0.5 * priors.log_variances[k])
    dim = priors.dim
    d_eff = spec.effective_radius(dim)

    stats = TruncationStats()
    out = np.empty((n, dim), dtype=np.float64)
    filled = 0
    for _ in range(spec.max_rejection_attempts):
        if filled == n:
            break
        m = n - filled
        cand = mean + sigma * rng.standard_normal((m, dim))
        stats.proposals += m
        keep = cand[_mahalanobis(cand, mean, sigma) <= d_eff]
        stats.accepted += keep.shape[0]
        out[filled:filled + keep.shape[0]] = keep
        filled += keep.shape[0]

    if filled < n:
        m = n - filled
        stats.fallback = m
        logger.info(
            "truncated sampling fell back to radial construction for %d/%d samples "
            "(class %d, effective radius %.4g)", m, n, k, d_eff,
        )
        direction = rng.standard_normal((m, dim))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        u = rng.uniform(0.0, 1.0, size=m)
        radius = chi.ppf(u * chi.cdf(d_eff, df=dim), df=dim)
        cand = mean + sigma * (direction * radius[:, None])
        # Float cancellation can push a boundary sample a few ulps outside.
        bad = _mahalanobis(cand, mean, sigma) > d_eff
        while np.any(bad):
            radius[bad] *= 1.0 - 1e-9
            cand[bad] = mean + sigma * (direction[bad] * radius[bad, None])
            bad = _mahalanobis(cand, mean, sigma) > d_eff
        out[filled:] = cand

    return (out, stats) if with_stats else out


def init_priors_from_latents(
    latents: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    variance_floor: float = VARIANCE_FLOOR,
) -> ClassPriorSet:
    """Per-class mean and (population) variance, with the variance floored."""
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    if latents.ndim != 2 or latents.shape[0] != labels.shape[0]:
        raise ShapeError(f"latents {latents.shape} and labels {labels.shape} do not align")
    means = np.empty((num_classes, latents.shape[1]))
    log_vars = np.empty_like(means)
    for k in range(num_classes):
        members = latents[labels == k]
        if members.shape[0] < 2:
            raise InitializationError(f"class {k} has {members.shape[0]} latents; need at least 2")
        means[k] = members.mean(axis=0)
        log_vars[k] = np.log(np.maximum(members.var(axis=0), variance_floor))
    return ClassPriorSet(means, log_vars)
