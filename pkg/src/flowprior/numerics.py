"""Dense numerical substrate: a small MLP with analytic forward/backward,
a central-difference gradient oracle, and stable log-sum-exp.

Everything here operates on plain numpy arrays and is purely functional:
no function mutates its arguments, and outputs are deterministic for fixed
inputs. Vector arguments may be given as a single vector ``(d,)`` or as a
row-stacked batch ``(n, d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError


class GradientBundle:
    """Named gradient arrays plus the scalar value they differentiate.

    Keys mirror a parameter set (e.g. ``W0``, ``b0`` for an Mlp). Bundles
    are addable and scalable so weighted loss sums merge linearly.
    """

    def __init__(self, grads: dict[str, np.ndarray] | None = None, loss_value: float = 0.0):
        self.grads: dict[str, np.ndarray] = dict(grads or {})
        self.loss_value = float(loss_value)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.grads[key]

    def __contains__(self, key: str) -> bool:
        return key in self.grads

    def keys(self):
        return self.grads.keys()

    def add_scaled(self, other: "GradientBundle", scale: float = 1.0) -> "GradientBundle":
        """In-place ``self += scale * other`` over the union of keys."""
        for name, g in other.grads.items():
            if name in self.grads:
                self.grads[name] = self.grads[name] + scale * g
            else:
                self.grads[name] = scale * g
        self.loss_value += scale * other.loss_value
        return self

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        out = GradientBundle({k: v.copy() for k, v in self.grads.items()}, self.loss_value)
        return out.add_scaled(other)

    def scaled(self, c: float) -> "GradientBundle":
        return GradientBundle({k: c * v for k, v in self.grads.items()}, c * self.loss_value)

    def __mul__(self, c: float) -> "GradientBundle":
        return self.scaled(c)

    __rmul__ = __mul__

    def prefixed(self, prefix: str) -> "GradientBundle":
        """Return a copy with every key prefixed, for merging submodule grads."""
        return GradientBundle({prefix + k: v for k, v in self.grads.items()}, self.loss_value)


@dataclass
class Mlp:
    """Fully-connected net with tanh hidden units and an identity output layer.

    ``weights[i]`` has shape ``(layer_sizes[i], layer_sizes[i+1])`` and acts by
    right-multiplication (``h @ W + b``). Two layer sizes and no hidden layer
    give a plain affine map.
    """

    layer_sizes: list[int]
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ShapeError("Mlp needs at least an input and an output size")
        if any(s <= 0 for s in self.layer_sizes):
            raise ShapeError(f"layer sizes must be positive, got {self.layer_sizes}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape} do not match sizes {expect}")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    def parameters(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        return out

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_sizes), [w.copy() for w in self.weights], [b.copy() for b in self.biases])


def mlp_init(layer_sizes: list[int], rng: np.random.Generator, dtype=np.float64) -> Mlp:
    """Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return Mlp(list(layer_sizes), weights, biases)


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ShapeError(f"{what}: expected dim {dim}, got {x.shape[0]}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ShapeError(f"{what}: expected last dim {dim}, got {x.shape[1]}")
        return x, False
    raise ShapeError(f"{what}: expected 1-D or 2-D array, got ndim={x.ndim}")


def _mlp_layer_inputs(net: Mlp, x: np.ndarray) -> list[np.ndarray]:
    """Inputs seen by each layer, plus the final output as the last entry."""
    acts = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ w + b
        h = np.tanh(a) if i < last else a
        acts.append(h)
    return acts


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Apply the net to a vector ``(d,)`` or batch ``(n, d)``."""
    xb, single = _as_batch(x, net.in_dim, "mlp_forward input")
    out = _mlp_layer_inputs(net, xb)[-1]
    return out[0] if single else out


def mlp_backward(net: Mlp, x: np.ndarray, upstream: np.ndarray) -> tuple[GradientBundle, np.ndarray]:
    """Gradients of ``sum(upstream * mlp_forward(net, x))``.

    Returns a bundle with keys ``W{i}``/``b{i}`` plus the gradient with
    respect to ``x`` (batch gradients are per-row, parameter gradients are
    summed over the batch).
    """
    xb, single = _as_batch(x, net.in_dim, "mlp_backward input")
    ub, usingle = _as_batch(upstream, net.out_dim, "mlp_backward upstream")
    if single != usingle or xb.shape[0] != ub.shape[0]:
        raise ShapeError("mlp_backward: input and upstream batch shapes disagree")

    acts = _mlp_layer_inputs(net, xb)
    grads: dict[str, np.ndarray] = {}
    g = ub
    for i in range(len(net.weights) - 1, -1, -1):
        h_in = acts[i]
        grads[f"W{i}"] = h_in.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ net.weights[i].T
        if i > 0:
            # acts[i] is the tanh output of layer i-1; tanh' = 1 - tanh^2.
            g = g * (1.0 - acts[i] ** 2)
    return GradientBundle(grads), (g[0] if single else g)


def finite_diff_grad(f, p: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector.

    The verification oracle for every analytic gradient in the package; it
    never shares code with the paths it checks.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    p = np.asarray(p, dtype=np.float64)
    grad = np.empty_like(p)
    for i in range(p.size):
        bump = np.zeros_like(p)
        bump[i] = step
        hi = float(f(p + bump))
        lo = float(f(p - bump))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NumericError(f"finite_diff_grad: non-finite value at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * step)
    return grad


def logsumexp(xs: np.ndarray, axis: int | None = None) -> np.ndarray:
    """Shift-stable log(sum(exp(xs))), exact under the max-shift identity."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size == 0:
        raise ValueError("logsumexp of an empty array")
    m = np.max(xs, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(xs - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.ravel()[0])
    return np.squeeze(out, axis=axis)


def pack_params(params: dict[str, np.ndarray]) -> tuple[np.ndarray, list[tuple[str, tuple[int, ...]]]]:
    """Flatten a named parameter dict to one vector (sorted by name)."""
    layout = [(name, params[name].shape) for name in sorted(params)]
    if not layout:
        return np.zeros(0), layout
    flat = np.concatenate([np.asarray(params[name], dtype=np.float64).ravel() for name, _ in layout])
    return flat, layout


def unpack_params(flat: np.ndarray, layout: list[tuple[str, tuple[int, ...]]]) -> dict[str, np.ndarray]:
    """Inverse of pack_params."""
    out: dict[str, np.ndarray] = {}
    pos = 0
    for name, shape in layout:
        n = int(np.prod(shape)) if shape else 1
        out[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    if pos != flat.size:
        raise ShapeError(f"unpack_params: vector of size {flat.size} does not match layout size {pos}")
    return out
