"""Shared fixtures for random flows, closed-form layers, and gradient checks."""

import math

import numpy as np

from flowprior.flow import CouplingLayer, FlowModel, alternating_partition
from flowprior.numerics import Mlp, finite_diff_grad, mlp_init, pack_params, unpack_params


def numeric_jacobian(f, x, step=1e-6):
    """Central-difference Jacobian, column by column."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        b = np.zeros_like(x)
        b[i] = step
        cols.append((f(x + b) - f(x - b)) / (2.0 * step))
    return np.stack(cols, axis=1)


def constant_net(value: float, n_in: int, n_out: int) -> Mlp:
    return Mlp([n_in, n_out], [np.zeros((n_in, n_out))], [np.full(n_out, float(value))])


def closed_form_layer(scale_exponent: float, shift: float, dim: int = 2, clamp: float = 5.0) -> CouplingLayer:
    # Invert the tanh squash so the effective exponent equals scale_exponent.
    raw = clamp * math.atanh(scale_exponent / clamp)
    part = alternating_partition(dim, 0)
    n_p, n_a = part.passive_indices.size, part.active_indices.size
    return CouplingLayer(part, constant_net(raw, n_p, n_a), constant_net(shift, n_p, n_a), clamp)


def random_layer(dim, layer_index, rng, hidden=6):
    part = alternating_partition(dim, layer_index)
    n_p, n_a = part.passive_indices.size, part.active_indices.size
    return CouplingLayer(part, mlp_init([n_p, hidden, n_a], rng), mlp_init([n_p, hidden, n_a], rng))


def random_flow(dim, depth, rng, hidden=6):
    return FlowModel([random_layer(dim, l, rng, hidden) for l in range(depth)], dim)


def set_flow_params(model, params):
    for name, value in params.items():
        _, idx, net_name, pname = name.split(".")
        net = getattr(model.layers[int(idx)], f"{net_name}_net")
        kind, layer_i = pname[0], int(pname[1:])
        (net.weights if kind == "W" else net.biases)[layer_i][:] = value


def relative_grad_error(analytic: dict, objective, params: dict, step=1e-5) -> float:
    """Max abs difference between analytic grads and central differences,
    relative to the larger gradient magnitude."""
    flat, layout = pack_params(params)
    num = finite_diff_grad(lambda p: objective(unpack_params(p, layout)), flat, step)
    ana, _ = pack_params({k: analytic[k] for k, _ in layout})
    scale = max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-12)
    return float(np.max(np.abs(num - ana)) / scale)


def brute_force_recall(embeddings, labels, ks):
    """Independent O(n^2) oracle with the same descending-sim, ascending-index order."""
    n = len(labels)
    unit = [np.asarray(e) / np.linalg.norm(e) for e in embeddings]
    out = {}
    for k in ks:
        hits = 0
        for i in range(n):
            ranked = sorted(
                (-float(np.dot(unit[i], unit[j])), j) for j in range(n) if j != i
            )
            top = [j for _, j in ranked[: min(k, n - 1)]]
            hits += any(labels[j] == labels[i] for j in top)
        out[k] = hits / n
    return out
