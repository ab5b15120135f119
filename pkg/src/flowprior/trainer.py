"""Two-phase training: head-only contrastive warm-up, then joint optimization
of head, flow, and class priors under the weighted total objective.

Training is single-threaded and strictly seeded: batch sampling consumes one
master generator (serialized into checkpoints), while per-step anchor draws
use a stateless stream keyed by (seed, step) so ablation runs that skip
anchors still see identical batches.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .anchors import AnchorSet, generate_anchors
from .data import FeatureDataset, sample_batch
from .errors import ConfigError, DatasetError, FormatError, ShapeError
from .flow import FlowModel, build_flow, flow_forward, flow_inverse_backward
from .losses import Batch, LossWeights, loss_ali, loss_aux, loss_ca, loss_nf, loss_total
from .numerics import GradientBundle, mlp_backward
from .prior import ClassPriorSet, TruncationSpec, init_priors_from_latents
from .retrieval import RetrievalHead, build_head, embed, recall_at_k

CHECKPOINT_MAGIC = b"GAPC"
CHECKPOINT_VERSION = 1
_ANCHOR_STREAM_SALT = 0x414E4348


@dataclass
class TrainConfig:
    """Every training knob, defaulting to the published protocol values."""

    epochs: int = 50
    warmup_epochs: int = 5
    lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.9
    lr_decay_every: int = 5
    lr_scale_head: float = 1.0
    lr_scale_flow: float = 1.0
    lr_scale_priors: float = 1.0
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.4
    tau: float = 0.09
    embed_dim: int = 128
    flow_depth: int = 8
    hidden_dim: int = 512
    scale_clamp: float = 5.0
    n_s: int = 6
    truncation_d: float = 1.0
    truncation_mode: str = "scaled"
    max_rejection_attempts: int = 1000
    restrict_ali_to_batch_classes: bool = False
    anchor_grad_passthrough: bool = False
    batch_categories: int = 16
    eval_ks: tuple = (1, 2, 4, 8)
    seed: int = 0

    def __post_init__(self):
        self.eval_ks = tuple(int(k) for k in self.eval_ks)
        if self.epochs < 1 or not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need epochs >= 1 and 0 <= warmup_epochs < epochs")
        if min(self.lr, self.lr_decay_factor, self.tau, self.truncation_d) <= 0:
            raise ConfigError("lr, lr_decay_factor, tau, and truncation_d must be positive")
        if self.lr_decay_every < 1 or self.n_s < 1 or self.batch_categories < 1:
            raise ConfigError("lr_decay_every, n_s, and batch_categories must be >= 1")
        if min(self.momentum, self.weight_decay, self.alpha, self.beta, self.gamma) < 0:
            raise ConfigError("momentum, weight_decay, and loss weights must be nonnegative")
        if min(self.embed_dim, self.flow_depth, self.hidden_dim) < 1:
            raise ConfigError("architecture sizes must be positive")
        if self.truncation_mode not in ("absolute", "scaled"):
            raise ConfigError(f"unknown truncation_mode {self.truncation_mode!r}")
        if not self.eval_ks or min(self.eval_ks) < 1:
            raise ConfigError("eval_ks must be positive integers")

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.tau)

    def truncation(self) -> TruncationSpec:
        return TruncationSpec(self.truncation_d, self.truncation_mode, self.max_rejection_attempts)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Exponentially decayed rate for the 0-based schedule index."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)


@dataclass
class OptimizerState:
    """Momentum buffers, congruent with the trainable parameter set."""

    buffers: dict[str, np.ndarray]

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({name: np.zeros_like(p) for name, p in params.items()})


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    momentum: float,
    weight_decay: float,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Momentum SGD update, in place: buf = m*buf + (g + wd*p); p -= lr*buf."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        buf = state.buffers[name]
        step = g + weight_decay * p if weight_decay else g
        buf *= momentum
        buf += step
        p -= lr * buf
    return params, state


@dataclass
class TrainerState:
    head: RetrievalHead
    flow: FlowModel
    priors: ClassPriorSet
    opt: OptimizerState
    rng: np.random.Generator
    epoch: int = 0  # last completed epoch; 0 before training

    def parameters(self) -> dict[str, np.ndarray]:
        out = {f"head.{k}": v for k, v in self.head.parameters().items()}
        out.update({f"flow.{k}": v for k, v in self.flow.parameters().items()})
        out.update({f"priors.{k}": v for k, v in self.priors.parameters().items()})
        return out


def init_trainer(config: TrainConfig, feature_dim: int, num_classes: int) -> TrainerState:
    """Fresh models: random head, identity-initialized flow, placeholder priors."""
    rng = np.random.default_rng(config.seed)
    head = build_head(feature_dim, config.embed_dim, rng)
    flow = build_flow(feature_dim, config.flow_depth, config.hidden_dim, rng, config.scale_clamp)
    priors = ClassPriorSet(np.zeros((num_classes, feature_dim)), np.zeros((num_classes, feature_dim)))
    state = TrainerState(head, flow, priors, OptimizerState({}), rng)
    state.opt = OptimizerState.for_params(state.parameters())
    return state


def _decayed(name: str) -> bool:
    # Weight matrices of head and flow MLPs decay; biases and prior
    # distribution parameters do not.
    return name.rsplit(".", 1)[-1].startswith("W") and not name.startswith("priors.")


def _apply_updates(state: TrainerState, groups: dict[str, float], grads: GradientBundle,
                   config: TrainConfig, epoch: int) -> None:
    """One optimizer step over the named parameter groups (prefix -> lr scale)."""
    lr = lr_at(config, epoch - 1)
    params = state.parameters()
    for prefix, scale in groups.items():
        group = {n: p for n, p in params.items() if n.startswith(prefix)}
        # Parameters untouched by the active losses get a zero gradient.
        group_grads = {n: grads.grads.get(n, np.zeros_like(p)) for n, p in group.items()}
        decayed = {n: p for n, p in group.items() if _decayed(n)}
        plain = {n: p for n, p in group.items() if not _decayed(n)}
        if decayed:
            sgd_step(decayed, group_grads, state.opt, lr * scale, config.momentum, config.weight_decay)
        if plain:
            sgd_step(plain, group_grads, state.opt, lr * scale, config.momentum, 0.0)


def step_losses(
    state: TrainerState,
    batch: Batch,
    config: TrainConfig,
    anchors: AnchorSet | None,
) -> tuple[dict[str, float | None], GradientBundle]:
    """All active loss components for one batch, merged into parameter-space
    gradients (embedding gradients chained through the head)."""
    weights = config.loss_weights()
    zero = (0.0, GradientBundle())
    embeddings = embed(state.head, batch.features)

    aux = loss_aux(embeddings, batch.positive_index, weights.temperature_tau)
    nf = loss_nf(state.flow, state.priors, batch) if weights.alpha > 0 else zero
    ca = loss_ca(state.flow, state.priors, batch) if weights.beta > 0 else zero

    anchor_features_flat = None
    if weights.gamma > 0:
        if anchors is None:
            raise ValueError("alignment loss is active but no anchors were supplied")
        anchor_features_flat = anchors.features.reshape(-1, anchors.features.shape[-1])
        anchor_embeddings = embed(state.head, anchor_features_flat).reshape(
            anchors.embeddings.shape
        )
        if anchors.classes.size == state.priors.num_classes and np.array_equal(
            anchors.classes, np.arange(state.priors.num_classes)
        ):
            ali_labels = batch.labels
        else:
            ali_labels = np.searchsorted(anchors.classes, batch.labels)
            if np.any(anchors.classes[ali_labels] != batch.labels):
                raise ValueError("anchor set does not cover all batch classes")
        ali = loss_ali(embeddings, ali_labels, anchor_embeddings, weights.temperature_tau)
    else:
        ali = zero

    total_value, total = loss_total(weights, aux, nf, ca, ali)

    merged = GradientBundle(loss_value=total_value)
    for name, g in total.grads.items():
        if name.startswith(("flow.", "priors.")):
            merged.grads[name] = g

    head_bundle, _ = mlp_backward(state.head.projector, batch.features, total["embeddings"])
    merged.add_scaled(head_bundle.prefixed("head."))

    if "anchor_embeddings" in total:
        g_anchor_emb = total["anchor_embeddings"].reshape(-1, config.embed_dim)
        anchor_head_bundle, g_anchor_feat = mlp_backward(
            state.head.projector, anchor_features_flat, g_anchor_emb
        )
        merged.add_scaled(anchor_head_bundle.prefixed("head."))
        if config.anchor_grad_passthrough:
            _add_passthrough_grads(state, anchors, g_anchor_feat, merged)

    components = {
        "loss_aux": aux[0],
        "loss_nf": nf[0] if weights.alpha > 0 else None,
        "loss_ca": ca[0] if weights.beta > 0 else None,
        "loss_ali": ali[0] if weights.gamma > 0 else None,
        "loss_total": total_value,
    }
    return components, merged


def _add_passthrough_grads(
    state: TrainerState, anchors: AnchorSet, g_anchor_feat: np.ndarray, merged: GradientBundle
) -> None:
    """Re-parameterized anchor gradients: through the inverse flow into the
    flow parameters, and through the latent draws into the priors."""
    latents_flat = anchors.latents.reshape(-1, anchors.latents.shape[-1])
    flow_bundle, g_latents = flow_inverse_backward(state.flow, latents_flat, g_anchor_feat)
    merged.add_scaled(flow_bundle.prefixed("flow."))

    g_latents = g_latents.reshape(anchors.latents.shape)
    g_means = np.zeros_like(state.priors.means)
    g_logvars = np.zeros_like(state.priors.log_variances)
    centered = anchors.latents - state.priors.means[anchors.classes][:, None, :]
    np.add.at(g_means, anchors.classes, g_latents.sum(axis=1))
    np.add.at(g_logvars, anchors.classes, 0.5 * (g_latents * centered).sum(axis=1))
    merged.add_scaled(GradientBundle({"priors.means": g_means, "priors.log_vars": g_logvars}))


def steps_per_epoch(dataset: FeatureDataset, config: TrainConfig) -> int:
    return max(1, dataset.size // (2 * config.batch_categories))


def _anchor_rng(config: TrainConfig, global_step: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, _ANCHOR_STREAM_SALT, global_step])


def train_epoch_phase1(state: TrainerState, dataset: FeatureDataset, config: TrainConfig) -> dict:
    """Warm-up epoch: only the head trains, under the auxiliary loss alone."""
    epoch = state.epoch + 1
    totals = []
    for _ in range(steps_per_epoch(dataset, config)):
        batch = sample_batch(dataset, config.batch_categories, state.rng)
        embeddings = embed(state.head, batch.features)
        value, bundle = loss_aux(embeddings, batch.positive_index, config.tau)
        head_bundle, _ = mlp_backward(state.head.projector, batch.features, bundle["embeddings"])
        _apply_updates(state, {"head.": config.lr_scale_head}, head_bundle.prefixed("head."),
                       config, epoch)
        totals.append(value)
    mean_aux = float(np.mean(totals))
    return {
        "loss_aux": mean_aux, "loss_nf": None, "loss_ca": None, "loss_ali": None,
        "loss_total": mean_aux,
    }


def train_epoch_phase2(state: TrainerState, dataset: FeatureDataset, config: TrainConfig) -> dict:
    """Joint epoch: fresh anchors each step, all four objectives, one SGD step
    over head, flow, and priors; the prior variance floor is re-applied."""
    epoch = state.epoch + 1
    n_steps = steps_per_epoch(dataset, config)
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for i in range(n_steps):
        batch = sample_batch(dataset, config.batch_categories, state.rng)
        anchors = None
        if config.gamma > 0:
            class_set = (
                np.unique(batch.labels)
                if config.restrict_ali_to_batch_classes
                else np.arange(state.priors.num_classes)
            )
            global_step = (epoch - 1) * n_steps + i
            anchors = generate_anchors(
                state.flow, state.priors, state.head, class_set, config.n_s,
                config.truncation(), _anchor_rng(config, global_step),
            )
        components, merged = step_losses(state, batch, config, anchors)
        groups = {
            "head.": config.lr_scale_head,
            "flow.": config.lr_scale_flow,
            "priors.": config.lr_scale_priors,
        }
        _apply_updates(state, groups, merged, config, epoch)
        state.priors.apply_variance_floor()
        for key, value in components.items():
            if value is not None:
                sums[key] = sums.get(key, 0.0) + value
                counts[key] = counts.get(key, 0) + 1
    out: dict[str, float | None] = {k: None for k in
                                    ("loss_aux", "loss_nf", "loss_ca", "loss_ali", "loss_total")}
    out.update({k: sums[k] / counts[k] for k in sums})
    return out


def initialize_priors_from_features(state: TrainerState, dataset: FeatureDataset) -> None:
    """Phase-boundary prior init from the current flow's latents, in place so
    optimizer buffers and checkpoints keep their shapes."""
    latents, _ = flow_forward(state.flow, dataset.features.astype(np.float64))
    fresh = init_priors_from_latents(latents, dataset.labels, state.priors.num_classes)
    state.priors.means[:] = fresh.means
    state.priors.log_variances[:] = fresh.log_variances


def evaluate(state: TrainerState, dataset: FeatureDataset, ks) -> dict[int, float]:
    embeddings = embed(state.head, dataset.features.astype(np.float64))
    return recall_at_k(embeddings, dataset.labels, ks)


def _check_train_labels(dataset: FeatureDataset) -> int:
    classes = np.unique(dataset.labels)
    if classes[0] != 0 or classes[-1] != classes.size - 1:
        raise DatasetError("training labels must be contiguous from 0")
    return int(classes.size)


def train(
    config: TrainConfig,
    train_set: FeatureDataset,
    test_set: FeatureDataset | None,
    metrics_path=None,
    checkpoint_path=None,
    resume: TrainerState | None = None,
) -> tuple[TrainerState, list[dict]]:
    """Run the two-phase schedule, evaluating after every epoch.

    Returns the final state and the per-epoch metric records; optionally
    appends JSON-lines metrics (with a leading config header on fresh runs)
    and writes a final checkpoint.
    """
    num_classes = _check_train_labels(train_set)
    state = resume if resume is not None else init_trainer(config, train_set.dim, num_classes)
    if state.priors.num_classes != num_classes or state.priors.dim != train_set.dim:
        raise DatasetError("resumed state does not match the training dataset shape")

    sink = None
    if metrics_path is not None:
        fresh = state.epoch == 0
        sink = open(metrics_path, "a" if not fresh else "w", encoding="utf-8")
        if fresh:
            sink.write(json.dumps({"config": asdict(config)}, sort_keys=True) + "\n")

    history = []
    try:
        for epoch in range(state.epoch + 1, config.epochs + 1):
            started = time.perf_counter()
            if epoch == config.warmup_epochs + 1:
                initialize_priors_from_features(state, train_set)
            if epoch <= config.warmup_epochs:
                losses = train_epoch_phase1(state, train_set, config)
                phase = 1
            else:
                losses = train_epoch_phase2(state, train_set, config)
                phase = 2
            state.epoch = epoch

            record = {"epoch": epoch, "phase": phase}
            record.update(losses)
            record["lr"] = lr_at(config, epoch - 1)
            if test_set is not None:
                for k, value in evaluate(state, test_set, config.eval_ks).items():
                    record[f"recall@{k}"] = value
            record["wall_seconds"] = time.perf_counter() - started
            history.append(record)
            if sink is not None:
                sink.write(json.dumps(record, sort_keys=True) + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()

    if checkpoint_path is not None:
        save_checkpoint(state, config, checkpoint_path)
    return state, history


def _pack_named_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    out = bytearray(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8", copy=False).tobytes(order="C")
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError(f"checkpoint truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _unpack_named_arrays(reader: _Reader) -> dict[str, np.ndarray]:
    out = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(reader.take(8 * n), dtype="<f8").reshape(shape).copy()
    return out


def save_checkpoint(state: TrainerState, config: TrainConfig, path) -> None:
    """Versioned binary container: config text, parameter tensors, optimizer
    buffers, and the master generator state."""
    payload = bytearray()
    payload += CHECKPOINT_MAGIC
    payload += struct.pack("<II", CHECKPOINT_VERSION, state.epoch)
    config_bytes = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
    payload += struct.pack("<I", len(config_bytes)) + config_bytes
    payload += _pack_named_arrays(state.parameters())
    payload += _pack_named_arrays(state.opt.buffers)
    rng_bytes = json.dumps(state.rng.bit_generator.state, sort_keys=True).encode("utf-8")
    payload += struct.pack("<I", len(rng_bytes)) + rng_bytes
    Path(path).write_bytes(bytes(payload))


def load_checkpoint(path) -> tuple[TrainerState, TrainConfig]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r} at byte 0")
    reader = _Reader(data)
    reader.take(4)
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte 4")
    epoch = reader.u32()
    config_raw = json.loads(reader.take(reader.u32()).decode("utf-8"))
    config = TrainConfig(**config_raw)
    params = _unpack_named_arrays(reader)
    buffers = _unpack_named_arrays(reader)
    rng_state = json.loads(reader.take(reader.u32()).decode("utf-8"))

    feature_dim, _ = params["head.W0"].shape
    num_classes = params["priors.means"].shape[0]
    state = init_trainer(config, feature_dim, num_classes)
    own = state.parameters()
    if set(own) != set(params):
        raise FormatError("checkpoint parameter names do not match the configured model")
    for name, value in params.items():
        if own[name].shape != value.shape:
            raise FormatError(f"checkpoint tensor {name} has shape {value.shape}, expected {own[name].shape}")
        own[name][:] = value
    for name, value in buffers.items():
        state.opt.buffers[name][:] = value
    state.rng.bit_generator.state = rng_state
    state.epoch = epoch
    return state, config
