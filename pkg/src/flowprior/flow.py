"""Invertible feature-to-latent map built from stacked affine coupling layers.

Each layer leaves a passive index block unchanged and applies an elementwise
affine transform to the active block, with scale and shift produced by MLPs
of the passive block. That structure gives a closed-form inverse and a
log-determinant that is just the sum of the effective scale exponents, so
densities transform exactly. The scale exponent is squashed through
``clamp * tanh(raw / clamp)`` to keep ``exp`` bounded during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError
from .numerics import GradientBundle, Mlp, mlp_backward, mlp_forward, mlp_init


@dataclass
class PartitionSpec:
    """Split of the coordinate range into an active and a passive block."""

    dim: int
    active_indices: np.ndarray
    passive_indices: np.ndarray

    def __post_init__(self):
        self.active_indices = np.asarray(self.active_indices, dtype=np.intp)
        self.passive_indices = np.asarray(self.passive_indices, dtype=np.intp)
        if self.active_indices.size == 0 or self.passive_indices.size == 0:
            raise ShapeError("both partition blocks must be nonempty")
        merged = np.sort(np.concatenate([self.active_indices, self.passive_indices]))
        if not np.array_equal(merged, np.arange(self.dim)):
            raise ShapeError("partition blocks must cover each index exactly once")


def alternating_partition(dim: int, layer_index: int) -> PartitionSpec:
    """First-half/second-half split, with roles swapping on odd layers."""
    if dim < 2:
        raise ShapeError(f"coupling needs dim >= 2, got {dim}")
    cut = (dim + 1) // 2
    first = np.arange(cut)
    second = np.arange(cut, dim)
    if layer_index % 2 == 0:
        return PartitionSpec(dim, active_indices=second, passive_indices=first)
    return PartitionSpec(dim, active_indices=first, passive_indices=second)


@dataclass
class CouplingLayer:
    partition: PartitionSpec
    scale_net: Mlp
    translate_net: Mlp
    scale_clamp: float = 5.0

    def __post_init__(self):
        n_passive = self.partition.passive_indices.size
        n_active = self.partition.active_indices.size
        for name, net in (("scale", self.scale_net), ("translate", self.translate_net)):
            if net.in_dim != n_passive or net.out_dim != n_active:
                raise ShapeError(
                    f"{name} net maps {net.in_dim}->{net.out_dim}, "
                    f"partition needs {n_passive}->{n_active}"
                )
        if self.scale_clamp <= 0:
            raise ShapeError("scale_clamp must be positive")

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        out.update({f"scale.{k}": v for k, v in self.scale_net.parameters().items()})
        out.update({f"translate.{k}": v for k, v in self.translate_net.parameters().items()})
        return out


@dataclass
class FlowModel:
    layers: list[CouplingLayer]
    dim: int

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("flow needs at least one coupling layer")
        for i, layer in enumerate(self.layers):
            if layer.partition.dim != self.dim:
                raise ShapeError(f"layer {i} has dim {layer.partition.dim}, flow has {self.dim}")
        for i in range(len(self.layers) - 1):
            a = self.layers[i].partition.active_indices
            b = self.layers[i + 1].partition.active_indices
            if a.size == b.size and np.array_equal(a, b):
                raise ShapeError(f"layers {i} and {i + 1} share the same active block")

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update({f"layers.{i}.{k}": v for k, v in layer.parameters().items()})
        return out


def build_flow(
    dim: int,
    depth: int,
    hidden_size: int,
    rng: np.random.Generator,
    scale_clamp: float = 5.0,
    dtype=np.float64,
) -> FlowModel:
    """Random flow whose final MLP layers are zeroed so it starts as the identity."""
    layers = []
    for l in range(depth):
        part = alternating_partition(dim, l)
        n_p, n_a = part.passive_indices.size, part.active_indices.size
        nets = []
        for _ in range(2):
            net = mlp_init([n_p, hidden_size, n_a], rng, dtype=dtype)
            net.weights[-1][:] = 0.0
            nets.append(net)
        layers.append(CouplingLayer(part, nets[0], nets[1], scale_clamp))
    return FlowModel(layers, dim)


def _squash_scale(raw: np.ndarray, clamp: float) -> np.ndarray:
    return clamp * np.tanh(raw / clamp)


def _split(x: np.ndarray, part: PartitionSpec) -> tuple[np.ndarray, np.ndarray]:
    return x[..., part.passive_indices], x[..., part.active_indices]


def _merge(passive: np.ndarray, active: np.ndarray, part: PartitionSpec) -> np.ndarray:
    out = np.empty(passive.shape[:-1] + (part.dim,), dtype=passive.dtype)
    out[..., part.passive_indices] = passive
    out[..., part.active_indices] = active
    return out


def coupling_forward(layer: CouplingLayer, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Affine-transform the active block conditioned on the passive one.

    Returns the transformed vector(s) and the per-row log-determinant, which
    equals the sum of the squashed scale exponents.
    """
    x = np.asarray(x)
    if x.shape[-1] != layer.partition.dim:
        raise ShapeError(f"coupling_forward: expected dim {layer.partition.dim}, got {x.shape[-1]}")
    xp, xa = _split(x, layer.partition)
    s = _squash_scale(mlp_forward(layer.scale_net, xp), layer.scale_clamp)
    t = mlp_forward(layer.translate_net, xp)
    ya = xa * np.exp(s) + t
    if not np.all(np.isfinite(ya)):
        raise NumericError("coupling_forward produced non-finite values")
    return _merge(xp, ya, layer.partition), s.sum(axis=-1)


def coupling_inverse(layer: CouplingLayer, y: np.ndarray) -> np.ndarray:
    """Exact algebraic inverse of coupling_forward."""
    y = np.asarray(y)
    if y.shape[-1] != layer.partition.dim:
        raise ShapeError(f"coupling_inverse: expected dim {layer.partition.dim}, got {y.shape[-1]}")
    yp, ya = _split(y, layer.partition)
    s = _squash_scale(mlp_forward(layer.scale_net, yp), layer.scale_clamp)
    t = mlp_forward(layer.translate_net, yp)
    xa = (ya - t) * np.exp(-s)
    if not np.all(np.isfinite(xa)):
        raise NumericError("coupling_inverse produced non-finite values")
    return _merge(yp, xa, layer.partition)


def flow_forward(model: FlowModel, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map features to latents; log-determinants add across layers."""
    z = np.asarray(v)
    single = z.ndim == 1
    logdet = np.zeros(z.shape[:-1])
    for i, layer in enumerate(model.layers):
        try:
            z, ld = coupling_forward(layer, z)
        except NumericError as e:
            raise NumericError(f"flow_forward failed at layer {i}: {e}") from e
        logdet = logdet + ld
    if single:
        return z, float(logdet)
    return z, logdet


def flow_inverse(model: FlowModel, z: np.ndarray) -> np.ndarray:
    """Map latents back to features by inverting layers in reverse order."""
    x = np.asarray(z)
    for i in range(len(model.layers) - 1, -1, -1):
        try:
            x = coupling_inverse(model.layers[i], x)
        except NumericError as e:
            raise NumericError(f"flow_inverse failed at layer {i}: {e}") from e
    return x


def _coupling_backward(
    layer: CouplingLayer, x: np.ndarray, g_y: np.ndarray, g_logdet: np.ndarray
) -> tuple[GradientBundle, np.ndarray]:
    """Reverse-mode step: grads of (g_y . y + g_logdet * logdet) wrt params and x."""
    part = layer.partition
    xp, xa = _split(x, part)
    raw = mlp_forward(layer.scale_net, xp)
    s = _squash_scale(raw, layer.scale_clamp)
    es = np.exp(s)

    gyp, gya = _split(g_y, part)
    g_t = gya
    g_s = gya * xa * es + g_logdet[..., None]
    g_xa = gya * es
    # d/d raw of clamp * tanh(raw / clamp) = 1 - (s / clamp)^2
    g_raw = g_s * (1.0 - (s / layer.scale_clamp) ** 2)

    scale_grads, gxp_s = mlp_backward(layer.scale_net, xp, g_raw)
    trans_grads, gxp_t = mlp_backward(layer.translate_net, xp, g_t)
    bundle = scale_grads.prefixed("scale.").add_scaled(trans_grads.prefixed("translate."))
    return bundle, _merge(gyp + gxp_s + gxp_t, g_xa, part)


def flow_backward(
    model: FlowModel,
    v: np.ndarray,
    upstream_z: np.ndarray,
    upstream_logdet: np.ndarray | float,
) -> tuple[GradientBundle, np.ndarray]:
    """Exact gradients of ``upstream_z . z + upstream_logdet * logdet``.

    Accepts a single vector or a batch; parameter gradients are summed over
    the batch while the returned feature gradient stays per-row.
    """
    v = np.asarray(v)
    uz = np.asarray(upstream_z, dtype=np.float64)
    if uz.shape != v.shape:
        raise ShapeError(f"upstream_z shape {uz.shape} does not match input {v.shape}")
    ul = np.broadcast_to(np.asarray(upstream_logdet, dtype=np.float64), v.shape[:-1]).copy()

    inputs = [v]
    x = v
    for layer in model.layers:
        x, _ = coupling_forward(layer, x)
        inputs.append(x)

    bundle = GradientBundle()
    g = uz
    for i in range(len(model.layers) - 1, -1, -1):
        layer_bundle, g = _coupling_backward(model.layers[i], inputs[i], g, ul)
        bundle.add_scaled(layer_bundle.prefixed(f"layers.{i}."))
    return bundle, g


def _coupling_inverse_backward(
    layer: CouplingLayer, y: np.ndarray, g_x: np.ndarray
) -> tuple[GradientBundle, np.ndarray]:
    """Reverse-mode step through coupling_inverse: grads wrt params and y."""
    part = layer.partition
    yp, ya = _split(y, part)
    raw = mlp_forward(layer.scale_net, yp)
    s = _squash_scale(raw, layer.scale_clamp)
    ens = np.exp(-s)
    t = mlp_forward(layer.translate_net, yp)
    xa = (ya - t) * ens

    gxp, gxa = _split(g_x, part)
    g_ya = gxa * ens
    g_t = -gxa * ens
    g_s = -gxa * xa
    g_raw = g_s * (1.0 - (s / layer.scale_clamp) ** 2)

    scale_grads, gyp_s = mlp_backward(layer.scale_net, yp, g_raw)
    trans_grads, gyp_t = mlp_backward(layer.translate_net, yp, g_t)
    bundle = scale_grads.prefixed("scale.").add_scaled(trans_grads.prefixed("translate."))
    return bundle, _merge(gxp + gyp_s + gyp_t, g_ya, part)


def flow_inverse_backward(
    model: FlowModel, z: np.ndarray, upstream_v: np.ndarray
) -> tuple[GradientBundle, np.ndarray]:
    """Exact gradients of ``upstream_v . flow_inverse(z)`` wrt params and z.

    Used when anchor gradients are allowed to pass through the inverse map.
    """
    z = np.asarray(z)
    uv = np.asarray(upstream_v, dtype=np.float64)
    if uv.shape != z.shape:
        raise ShapeError(f"upstream_v shape {uv.shape} does not match input {z.shape}")

    # inv(layer_i) consumes stage_inputs[i]; layers invert from last to first.
    stage_inputs: list[np.ndarray | None] = [None] * len(model.layers)
    x = z
    for i in range(len(model.layers) - 1, -1, -1):
        stage_inputs[i] = x
        x = coupling_inverse(model.layers[i], x)

    bundle = GradientBundle()
    g = uv
    for i in range(len(model.layers)):
        layer_bundle, g = _coupling_inverse_backward(model.layers[i], stage_inputs[i], g)
        bundle.add_scaled(layer_bundle.prefixed(f"layers.{i}."))
    return bundle, g
