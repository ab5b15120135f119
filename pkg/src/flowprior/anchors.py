"""Per-class anchor synthesis: truncated latent draws mapped back through the
inverse flow and projected by the shared retrieval head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .flow import FlowModel, flow_inverse
from .prior import ClassPriorSet, TruncationSpec, sample_truncated
from .retrieval import RetrievalHead, embed


@dataclass
class AnchorSet:
    """Anchors grouped by class: latent draws, their feature-space preimages,
    and the embeddings the head produced at generation time.

    ``whitened`` keeps the underlying standardized draws so gradients can be
    re-parameterized through the prior parameters when that mode is enabled.
    """

    classes: np.ndarray  # (K_sel,)
    latents: np.ndarray  # (K_sel, n_s, C)
    features: np.ndarray  # (K_sel, n_s, C)
    embeddings: np.ndarray  # (K_sel, n_s, C')
    whitened: np.ndarray  # (K_sel, n_s, C)

    @property
    def per_class(self) -> int:
        return self.latents.shape[1]


def generate_anchors(
    model: FlowModel,
    priors: ClassPriorSet,
    head: RetrievalHead,
    class_set,
    n_s: int,
    spec: TruncationSpec,
    rng: np.random.Generator,
) -> AnchorSet:
    """Sample n_s truncated latents per class and map them to embeddings.

    Classes are processed in the order given, drawing sequentially from the
    one generator, so a fixed seed reproduces the set bit for bit.
    """
    classes = np.asarray(list(class_set), dtype=np.intp)
    if classes.size == 0:
        raise ValueError("class_set must be nonempty")
    if n_s < 1:
        raise ValueError(f"need n_s >= 1 anchors per class, got {n_s}")

    latents = np.empty((classes.size, n_s, priors.dim))
    whitened = np.empty_like(latents)
    for i, k in enumerate(classes):
        s = sample_truncated(priors, int(k), spec, n_s, rng)
        latents[i] = s
        whitened[i] = (s - priors.means[k]) / np.exp(0.5 * priors.log_variances[k])

    flat = latents.reshape(classes.size * n_s, priors.dim)
    features = flow_inverse(model, flat)
    embeddings = embed(head, features)
    return AnchorSet(
        classes=classes,
        latents=latents,
        features=features.reshape(classes.size, n_s, priors.dim),
        embeddings=embeddings.reshape(classes.size, n_s, head.embed_dim),
        whitened=whitened,
    )
