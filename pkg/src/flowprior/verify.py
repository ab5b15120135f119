"""End-to-end gradient verification: every analytic gradient in the package
checked against central finite differences on randomized scenarios.

Finite differencing bumps the live parameter arrays in place, so the checks
exercise exactly the objects the trainer optimizes. ``CORRUPT_COMPONENT`` is
a test hook: naming a component skews its analytic gradients so the failure
path stays honest.
"""

from __future__ import annotations

import numpy as np

from .anchors import AnchorSet
from .flow import FlowModel, alternating_partition, CouplingLayer, flow_backward, flow_forward, flow_inverse
from .losses import Batch, loss_ali, loss_aux, loss_ca, loss_nf
from .numerics import mlp_init
from .prior import ClassPriorSet
from .retrieval import build_head
from .trainer import OptimizerState, TrainConfig, TrainerState, step_losses

TOLERANCE = 1e-4

# Test hook: set to a component name to corrupt its analytic gradients.
CORRUPT_COMPONENT: str | None = None


def _random_flow(dim, depth, hidden, rng) -> FlowModel:
    layers = []
    for l in range(depth):
        part = alternating_partition(dim, l)
        n_p, n_a = part.passive_indices.size, part.active_indices.size
        layers.append(
            CouplingLayer(part, mlp_init([n_p, hidden, n_a], rng), mlp_init([n_p, hidden, n_a], rng))
        )
    return FlowModel(layers, dim)


def _fd_grads(objective, params: dict[str, np.ndarray], step: float = 1e-6) -> dict[str, np.ndarray]:
    """Central differences by bumping each live coordinate in place."""
    grads = {}
    for name, arr in params.items():
        g = np.empty_like(arr)
        flat, gflat = arr.ravel(), g.ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            hi = objective()
            flat[i] = saved - step
            lo = objective()
            flat[i] = saved
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads


def _max_rel_err(analytic: dict[str, np.ndarray], numeric: dict[str, np.ndarray]) -> float:
    scale = 1e-12
    for name in numeric:
        scale = max(scale, np.max(np.abs(numeric[name])), np.max(np.abs(analytic[name])))
    worst = 0.0
    for name in numeric:
        worst = max(worst, float(np.max(np.abs(analytic[name] - numeric[name]))) / scale)
    return worst


def _maybe_corrupt(component: str, analytic: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    if component != CORRUPT_COMPONENT:
        return analytic
    return {k: g + 0.05 * (1.0 + np.abs(g)) for k, g in analytic.items()}


class _Scenario:
    """One randomized configuration shared by all component checks."""

    def __init__(self, seed: int, dim=4, num_classes=3, depth=2, hidden=4, embed_dim=3, n_s=2):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.flow = _random_flow(dim, depth, hidden, rng)
        self.head = build_head(dim, embed_dim, rng)
        self.priors = ClassPriorSet(
            rng.normal(size=(num_classes, dim)),
            rng.uniform(-0.5, 0.5, size=(num_classes, dim)),
        )
        features = rng.normal(size=(2 * num_classes, dim))
        labels = np.repeat(np.arange(num_classes), 2)
        positive = np.arange(2 * num_classes)
        positive[0::2] += 1
        positive[1::2] -= 1
        self.batch = Batch(features, labels, positive)
        self.embeddings = rng.normal(size=(2 * num_classes, embed_dim))
        self.anchor_embeddings = rng.normal(size=(num_classes, n_s, embed_dim))
        self.whitened = rng.normal(size=(num_classes, n_s, dim))
        self.n_s = n_s
        self.rng = rng
        self.config = TrainConfig(
            embed_dim=embed_dim, flow_depth=depth, hidden_dim=hidden, n_s=n_s,
            batch_categories=num_classes, seed=seed,
        )

    def flow_params(self, prefix=""):
        return {prefix + k: v for k, v in self.flow.parameters().items()}

    def model_params(self):
        out = {f"head.{k}": v for k, v in self.head.parameters().items()}
        out.update(self.flow_params("flow."))
        out.update({f"priors.{k}": v for k, v in self.priors.parameters().items()})
        return out

    def anchors(self) -> AnchorSet:
        """Anchors rebuilt from the fixed whitened draws and the live
        flow/prior arrays, so finite differences see the full dependency."""
        sigma = np.exp(0.5 * self.priors.log_variances)
        latents = self.priors.means[:, None, :] + sigma[:, None, :] * self.whitened
        flat = latents.reshape(-1, self.dim)
        feats = flow_inverse(self.flow, flat)
        embs = np.zeros((latents.shape[0], self.n_s, self.head.embed_dim))
        return AnchorSet(np.arange(latents.shape[0]), latents,
                         feats.reshape(latents.shape), embs, self.whitened)

    def trainer_state(self) -> TrainerState:
        return TrainerState(self.head, self.flow, self.priors, OptimizerState({}), self.rng)


def _check_flow_backward(sc: _Scenario) -> float:
    v = sc.rng.normal(size=sc.dim)
    uz = sc.rng.normal(size=sc.dim)
    ul = float(sc.rng.normal())
    bundle, gv = flow_backward(sc.flow, v, uz, ul)
    analytic = {k: bundle.grads[k] for k in sc.flow_params()}
    analytic["input"] = gv
    analytic = _maybe_corrupt("flow_backward", analytic)

    params = dict(sc.flow_params())
    params["input"] = v

    def objective():
        z, ld = flow_forward(sc.flow, v)
        return float(uz @ z + ul * ld)

    return _max_rel_err(analytic, _fd_grads(objective, params))


def _check_flow_logdet(sc: _Scenario) -> float:
    """Analytic log-determinant against the numerically differentiated Jacobian."""
    v = sc.rng.normal(size=sc.dim)
    _, logdet = flow_forward(sc.flow, v)
    if CORRUPT_COMPONENT == "flow_logdet":
        logdet += 0.05
    step = 1e-6
    jac = np.empty((sc.dim, sc.dim))
    for i in range(sc.dim):
        bump = np.zeros(sc.dim)
        bump[i] = step
        jac[:, i] = (flow_forward(sc.flow, v + bump)[0] - flow_forward(sc.flow, v - bump)[0]) / (2 * step)
    sign, ref = np.linalg.slogdet(jac)
    if sign <= 0:
        return np.inf
    return abs(logdet - ref) / max(1.0, abs(ref))


def _check_density_loss(sc: _Scenario, which: str) -> float:
    fn = loss_nf if which == "loss_nf" else loss_ca
    _, bundle = fn(sc.flow, sc.priors, sc.batch)
    params = dict(sc.flow_params("flow."))
    params["priors.means"] = sc.priors.means
    params["priors.log_vars"] = sc.priors.log_variances
    params["features"] = sc.batch.features
    analytic = _maybe_corrupt(which, {k: bundle.grads[k] for k in params})
    return _max_rel_err(analytic, _fd_grads(lambda: fn(sc.flow, sc.priors, sc.batch)[0], params))


def _check_loss_ali(sc: _Scenario) -> float:
    tau = sc.config.tau
    _, bundle = loss_ali(sc.embeddings, sc.batch.labels, sc.anchor_embeddings, tau)
    params = {"embeddings": sc.embeddings, "anchor_embeddings": sc.anchor_embeddings}
    analytic = _maybe_corrupt("loss_ali", {k: bundle.grads[k] for k in params})
    objective = lambda: loss_ali(sc.embeddings, sc.batch.labels, sc.anchor_embeddings, tau)[0]
    return _max_rel_err(analytic, _fd_grads(objective, params))


def _check_loss_aux(sc: _Scenario) -> float:
    tau = sc.config.tau
    _, bundle = loss_aux(sc.embeddings, sc.batch.positive_index, tau)
    params = {"embeddings": sc.embeddings}
    analytic = _maybe_corrupt("loss_aux", {k: bundle.grads[k] for k in params})
    objective = lambda: loss_aux(sc.embeddings, sc.batch.positive_index, tau)[0]
    return _max_rel_err(analytic, _fd_grads(objective, params))


def _check_loss_total(sc: _Scenario, passthrough: bool) -> float:
    name = "loss_total_passthrough" if passthrough else "loss_total"
    sc.config.anchor_grad_passthrough = passthrough
    state = sc.trainer_state()
    fixed_anchors = sc.anchors()

    def current_anchors():
        # With passthrough the anchors track the live flow/prior arrays;
        # without it they are constants of the step.
        return sc.anchors() if passthrough else fixed_anchors

    _, merged = step_losses(state, sc.batch, sc.config, current_anchors())
    params = sc.model_params()
    analytic = _maybe_corrupt(name, {k: merged.grads[k] for k in params})
    objective = lambda: step_losses(state, sc.batch, sc.config, current_anchors())[1].loss_value
    return _max_rel_err(analytic, _fd_grads(objective, params))


def run_gradcheck(seed: int = 0, n_seeds: int = 20) -> dict[str, float]:
    """Max relative error per component across seeds."""
    worst: dict[str, float] = {}
    for s in range(seed, seed + n_seeds):
        sc = _Scenario(s)
        results = {
            "flow_backward": _check_flow_backward(sc),
            "flow_logdet": _check_flow_logdet(sc),
            "loss_nf": _check_density_loss(sc, "loss_nf"),
            "loss_ca": _check_density_loss(sc, "loss_ca"),
            "loss_ali": _check_loss_ali(sc),
            "loss_aux": _check_loss_aux(sc),
            "loss_total": _check_loss_total(sc, passthrough=False),
            "loss_total_passthrough": _check_loss_total(sc, passthrough=True),
        }
        for k, v in results.items():
            worst[k] = max(worst.get(k, 0.0), v)
    return worst
