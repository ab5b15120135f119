"""Training objectives: density NLL, posterior calibration, anchor alignment,
and the auxiliary instance contrastive loss, plus their weighted total.

Every loss returns ``(value, GradientBundle)`` with exact reverse-mode
gradients. Bundle keys are namespaced: ``flow.*`` and ``priors.*`` for
parameters, ``features`` / ``embeddings`` / ``anchor_embeddings`` for
gradients with respect to inputs (the trainer chains the latter through the
retrieval head). All softmax terms go through log-sum-exp, so losses are
invariant to a constant shift of the logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEmbeddingError, ShapeError
from .flow import FlowModel, flow_backward, flow_forward
from .numerics import GradientBundle, logsumexp
from .prior import ClassPriorSet, LOG_TWO_PI


@dataclass
class LossWeights:
    """Weights of the density, calibration, and alignment terms plus the
    shared softmax temperature."""

    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.4
    temperature_tau: float = 0.09

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.temperature_tau <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class Batch:
    """Mini-batch with exactly two instances per present category.

    ``positive_index[i]`` points at the other instance of i's category.
    """

    features: np.ndarray  # (2N, C)
    labels: np.ndarray  # (2N,)
    positive_index: np.ndarray  # (2N,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        self.positive_index = np.asarray(self.positive_index, dtype=np.intp)
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.labels.shape != (n,) or self.positive_index.shape != (n,):
            raise ShapeError("batch arrays do not align")
        _, counts = np.unique(self.labels, return_counts=True)
        if not np.all(counts == 2):
            raise ShapeError("each category must appear exactly twice in a batch")
        p = self.positive_index
        if np.any(p == np.arange(n)) or np.any(p[p] != np.arange(n)):
            raise ShapeError("positive_index must pair distinct items symmetrically")
        if np.any(self.labels[p] != self.labels):
            raise ShapeError("positive_index must pair items of the same category")

    @property
    def size(self) -> int:
        return self.features.shape[0]


def _unit_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms == 0.0):
        raise DegenerateEmbeddingError(f"{what} contains a zero-norm embedding")
    return x / norms[..., None], norms


def _masked_info_nce(
    logits: np.ndarray, pos_mask: np.ndarray, valid_mask: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """Mean over positive pairs of -log softmax(positive | valid candidates).

    Returns the loss and its gradient with respect to the logits. Rows must
    all contain the same number of positives.
    """
    work = logits if valid_mask is None else np.where(valid_mask, logits, -np.inf)
    n_pos = int(pos_mask[0].sum())
    lse = logsumexp(work.reshape(work.shape[0], -1), axis=-1)
    value = -(np.sum(logits[pos_mask]) - n_pos * lse.sum()) / (pos_mask.shape[0] * n_pos)
    soft = np.exp(work - lse.reshape((-1,) + (1,) * (work.ndim - 1)))
    grad = -(pos_mask.astype(np.float64) - n_pos * soft) / (pos_mask.shape[0] * n_pos)
    return float(value), grad


def _cosine_grads_first(g_sim, sims, unit_a, norms_a, unit_b):
    """d(sum g*sim)/da for sims between rows of a and rows of b."""
    along = (g_sim * sims).sum(axis=-1, keepdims=True)
    return (g_sim @ unit_b - along * unit_a) / norms_a[:, None]


def loss_nf(model: FlowModel, priors: ClassPriorSet, batch: Batch) -> tuple[float, GradientBundle]:
    """Negative mean log feature density of each instance under its own class."""
    if np.any(batch.labels >= priors.num_classes):
        raise ShapeError("batch labels exceed the number of prior classes")
    n = batch.size
    z, logdet = flow_forward(model, batch.features)
    var = np.exp(priors.log_variances[batch.labels])  # (n, C)
    diff = z - priors.means[batch.labels]
    quad = np.sum(diff * diff / var, axis=1)
    log_norm = priors.dim * LOG_TWO_PI + priors.log_variances[batch.labels].sum(axis=1)
    log_dens = -0.5 * (log_norm + quad)
    value = float(-(log_dens + logdet).mean())

    upstream_z = diff / var / n
    upstream_logdet = np.full(n, -1.0 / n)
    flow_bundle, g_features = flow_backward(model, batch.features, upstream_z, upstream_logdet)

    g_means = np.zeros_like(priors.means)
    g_logvars = np.zeros_like(priors.log_variances)
    np.add.at(g_means, batch.labels, -diff / var / n)
    np.add.at(g_logvars, batch.labels, 0.5 * (1.0 - diff * diff / var) / n)

    bundle = flow_bundle.prefixed("flow.")
    bundle.grads["priors.means"] = g_means
    bundle.grads["priors.log_vars"] = g_logvars
    bundle.grads["features"] = g_features
    bundle.loss_value = value
    return value, bundle


def loss_ca(model: FlowModel, priors: ClassPriorSet, batch: Batch) -> tuple[float, GradientBundle]:
    """Cross-entropy between the latent class posterior and the true labels."""
    if np.any(batch.labels >= priors.num_classes):
        raise ShapeError("batch labels exceed the number of prior classes")
    n, num_classes = batch.size, priors.num_classes
    z, _ = flow_forward(model, batch.features)
    var = np.exp(priors.log_variances)  # (K, C)
    diff = z[:, None, :] - priors.means[None, :, :]  # (n, K, C)
    quad = np.sum(diff * diff / var[None], axis=-1)
    logs = -0.5 * ((priors.dim * LOG_TWO_PI + priors.log_variances.sum(axis=1))[None, :] + quad)
    lse = logsumexp(logs, axis=-1)
    value = float(-(logs[np.arange(n), batch.labels] - lse).mean())

    post = np.exp(logs - lse[:, None])
    w = post.copy()
    w[np.arange(n), batch.labels] -= 1.0
    w /= n  # (n, K): d value / d logs

    scaled = diff / var[None]  # (n, K, C)
    upstream_z = -np.sum(w[:, :, None] * scaled, axis=1)
    flow_bundle, g_features = flow_backward(model, batch.features, upstream_z, 0.0)

    g_means = np.einsum("nk,nkc->kc", w, scaled)
    g_logvars = np.einsum("nk,nkc->kc", w, -0.5 * (1.0 - diff * scaled))

    bundle = flow_bundle.prefixed("flow.")
    bundle.grads["priors.means"] = g_means
    bundle.grads["priors.log_vars"] = g_logvars
    bundle.grads["features"] = g_features
    bundle.loss_value = value
    return value, bundle


def loss_ali(
    embeddings: np.ndarray,
    labels: np.ndarray,
    anchor_embeddings: np.ndarray,
    tau: float,
) -> tuple[float, GradientBundle]:
    """Pull each instance toward its own class's anchors against all anchors.

    ``anchor_embeddings`` has shape (K, N_S, C'); the denominator spans every
    anchor of every class, positives included.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    anchors = np.asarray(anchor_embeddings, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if anchors.ndim != 3 or embeddings.ndim != 2 or anchors.shape[-1] != embeddings.shape[-1]:
        raise ShapeError("loss_ali: embeddings (n,d) and anchors (K,N_S,d) required")
    if np.any(labels >= anchors.shape[0]) or np.any(labels < 0):
        raise ShapeError("loss_ali: labels must index anchor classes")
    n = embeddings.shape[0]
    num_classes, n_s, _ = anchors.shape

    unit_r, norms_r = _unit_rows(embeddings, "instance embeddings")
    anchors_flat = anchors.reshape(num_classes * n_s, -1)
    unit_a, norms_a = _unit_rows(anchors_flat, "anchor embeddings")

    sims = unit_r @ unit_a.T  # (n, K*N_S)
    pos_mask = np.zeros((n, num_classes, n_s), dtype=bool)
    pos_mask[np.arange(n), labels, :] = True
    pos_mask = pos_mask.reshape(n, num_classes * n_s)

    value, g_logits = _masked_info_nce(sims / tau, pos_mask)
    g_sims = g_logits / tau

    g_r = _cosine_grads_first(g_sims, sims, unit_r, norms_r, unit_a)
    g_a = _cosine_grads_first(g_sims.T, sims.T, unit_a, norms_a, unit_r)

    bundle = GradientBundle(
        {"embeddings": g_r, "anchor_embeddings": g_a.reshape(anchors.shape)}, value
    )
    return value, bundle


def loss_aux(
    embeddings: np.ndarray, positive_index: np.ndarray, tau: float
) -> tuple[float, GradientBundle]:
    """Instance-pair contrastive loss over a two-per-category batch."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    positive_index = np.asarray(positive_index, dtype=np.intp)
    n = embeddings.shape[0]
    if n < 4:
        raise ShapeError(f"loss_aux needs a batch of at least 4, got {n}")
    if positive_index.shape != (n,) or np.any(positive_index == np.arange(n)):
        raise ShapeError("positive_index must map each item to a different item")

    unit, norms = _unit_rows(embeddings, "embeddings")
    sims = unit @ unit.T
    pos_mask = np.zeros((n, n), dtype=bool)
    pos_mask[np.arange(n), positive_index] = True
    valid = ~np.eye(n, dtype=bool)

    value, g_logits = _masked_info_nce(sims / tau, pos_mask, valid)
    g_sims = g_logits / tau  # zero on the diagonal via softmax of -inf

    # Each similarity is consumed twice: once per ordered slot.
    g_first = _cosine_grads_first(g_sims, sims, unit, norms, unit)
    g_second = _cosine_grads_first(g_sims.T, sims.T, unit, norms, unit)
    bundle = GradientBundle({"embeddings": g_first + g_second}, value)
    return value, bundle


def loss_total(
    weights: LossWeights,
    aux: tuple[float, GradientBundle],
    nf: tuple[float, GradientBundle],
    ca: tuple[float, GradientBundle],
    ali: tuple[float, GradientBundle],
) -> tuple[float, GradientBundle]:
    """Weighted sum ``aux + alpha*nf + beta*ca + gamma*ali`` with grads merged."""
    value = aux[0] + weights.alpha * nf[0] + weights.beta * ca[0] + weights.gamma * ali[0]
    bundle = GradientBundle({k: g.copy() for k, g in aux[1].grads.items()}, value)
    bundle.add_scaled(nf[1], weights.alpha)
    bundle.add_scaled(ca[1], weights.beta)
    bundle.add_scaled(ali[1], weights.gamma)
    bundle.loss_value = value
    return value, bundle
