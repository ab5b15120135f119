import hashlib
import json

import numpy as np
import pytest

from flowprior.data import FeatureDataset, SyntheticSpec, gen_synthetic
from flowprior.errors import ConfigError, DatasetError, ShapeError
from flowprior.numerics import GradientBundle
from flowprior.prior import init_priors_from_latents
from flowprior.trainer import (
    OptimizerState,
    TrainConfig,
    TrainerState,
    init_trainer,
    initialize_priors_from_features,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    sgd_step,
    steps_per_epoch,
    train,
    train_epoch_phase1,
    train_epoch_phase2,
)


def desk_config(**overrides):
    base = dict(
        epochs=4, warmup_epochs=2, lr=0.05, lr_scale_flow=0.05, lr_scale_priors=0.05,
        embed_dim=8, flow_depth=2, hidden_dim=16,
        batch_categories=4, n_s=2, eval_ks=(1, 2), seed=11,
    )
    base.update(overrides)
    return TrainConfig(**base)


def desk_data(seed=0):
    spec = SyntheticSpec(
        dim=8, seen_classes=6, unseen_classes=4, instances_per_class=6,
        class_separation=4.0, intra_class_scale=0.4, nuisance_dims=2,
        nuisance_scale=2.0, seed=seed,
    )
    return gen_synthetic(spec)


def params_digest(state: TrainerState, prefixes=("head.", "flow.", "priors.")) -> str:
    h = hashlib.sha256()
    for name, p in sorted(state.parameters().items()):
        if name.startswith(prefixes):
            h.update(name.encode())
            h.update(p.tobytes())
    return h.hexdigest()


class TestLrSchedule:
    def test_initial_plateau(self):
        config = TrainConfig()
        for epoch in range(5):
            assert lr_at(config, epoch) == pytest.approx(1e-5)

    def test_first_decay(self):
        assert lr_at(TrainConfig(), 5) == pytest.approx(9e-6)

    def test_second_decay(self):
        assert lr_at(TrainConfig(), 10) == pytest.approx(8.1e-6)

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_at(TrainConfig(), -1)


class TestSgdStep:
    def test_zero_grads_leave_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = OptimizerState.for_params(params)
        sgd_step(params, {"w": np.zeros(2)}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_plain_gradient_descent(self):
        params = {"w": np.array([1.0])}
        state = OptimizerState.for_params(params)
        sgd_step(params, {"w": np.array([2.0])}, state, lr=0.1, momentum=0.0, weight_decay=0.0)
        np.testing.assert_allclose(params["w"], [0.8])

    def test_momentum_unrolled_two_steps(self):
        g = 2.0
        params = {"w": np.array([5.0])}
        state = OptimizerState.for_params(params)
        sgd_step(params, {"w": np.array([g])}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
        before = params["w"].copy()
        sgd_step(params, {"w": np.array([g])}, state, lr=0.1, momentum=0.9, weight_decay=0.0)
        # Second update: buf = 0.9*g + g = 1.9*g.
        np.testing.assert_allclose(before - params["w"], [0.1 * 1.9 * g])

    def test_weight_decay_added_to_gradient(self):
        params = {"w": np.array([2.0])}
        state = OptimizerState.for_params(params)
        sgd_step(params, {"w": np.array([0.0])}, state, lr=0.1, momentum=0.0, weight_decay=0.5)
        np.testing.assert_allclose(params["w"], [2.0 - 0.1 * 0.5 * 2.0])

    def test_shape_mismatch(self):
        params = {"w": np.zeros(2)}
        state = OptimizerState.for_params(params)
        with pytest.raises(ShapeError):
            sgd_step(params, {"w": np.zeros(3)}, state, 0.1, 0.0, 0.0)


class TestConfig:
    def test_defaults_follow_protocol(self):
        config = TrainConfig()
        assert config.tau == 0.09
        assert config.flow_depth == 8
        assert config.n_s == 6
        assert config.truncation_d == 1.0
        assert config.warmup_epochs == 5
        assert (config.alpha, config.beta, config.gamma) == (0.5, 0.3, 0.4)
        assert config.lr == 1e-5
        assert config.momentum == 0.9
        assert config.weight_decay == 1e-4
        assert config.lr_decay_factor == 0.9
        assert config.lr_decay_every == 5
        assert config.epochs == 50
        assert config.eval_ks == (1, 2, 4, 8)
        assert config.embed_dim == 128

    def test_invalid_configs(self):
        with pytest.raises(ConfigError):
            TrainConfig(warmup_epochs=50, epochs=50)
        with pytest.raises(ConfigError):
            TrainConfig(truncation_mode="elliptic")
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0)


class TestPhase1:
    def test_flow_and_priors_frozen(self):
        train_set, _ = desk_data()
        config = desk_config()
        state = init_trainer(config, train_set.dim, train_set.class_count)
        frozen_before = params_digest(state, ("flow.", "priors."))
        head_before = params_digest(state, ("head.",))
        train_epoch_phase1(state, train_set, config)
        assert params_digest(state, ("flow.", "priors.")) == frozen_before
        assert params_digest(state, ("head.",)) != head_before

    def test_loss_decreases_on_separated_data(self):
        spec = SyntheticSpec(
            dim=8, seen_classes=6, unseen_classes=4, instances_per_class=6,
            class_separation=6.0, intra_class_scale=0.2, nuisance_dims=0, seed=3,
        )
        train_set, _ = gen_synthetic(spec)
        config = desk_config(epochs=7, warmup_epochs=6, seed=5)
        state = init_trainer(config, train_set.dim, train_set.class_count)
        first = train_epoch_phase1(state, train_set, config)["loss_aux"]
        for _ in range(4):
            last = train_epoch_phase1(state, train_set, config)["loss_aux"]
            state.epoch += 1
        assert last < first

    def test_single_batch_epoch_reproducible(self):
        train_set, _ = desk_data()
        config = desk_config(batch_categories=6)
        assert steps_per_epoch(train_set, config) == 3
        runs = []
        for _ in range(2):
            state = init_trainer(config, train_set.dim, train_set.class_count)
            runs.append(train_epoch_phase1(state, train_set, config)["loss_aux"])
        assert runs[0] == runs[1]


class TestPhase2:
    def test_first_joint_step_is_finite(self):
        train_set, _ = desk_data()
        config = desk_config()
        state = init_trainer(config, train_set.dim, train_set.class_count)
        for _ in range(config.warmup_epochs):
            train_epoch_phase1(state, train_set, config)
            state.epoch += 1
        initialize_priors_from_features(state, train_set)
        losses = train_epoch_phase2(state, train_set, config)
        for key, value in losses.items():
            assert value is not None and np.isfinite(value), key

    def test_zero_weights_reduce_to_warmup_dynamics(self):
        train_set, _ = desk_data()
        zeroed = dict(alpha=0.0, beta=0.0, gamma=0.0, epochs=4, seed=21)
        early = desk_config(warmup_epochs=1, **zeroed)
        late = desk_config(warmup_epochs=3, **zeroed)
        state_a, _ = train(early, train_set, None)
        state_b, _ = train(late, train_set, None)
        assert params_digest(state_a, ("head.",)) == params_digest(state_b, ("head.",))

    def test_restricted_anchor_classes(self):
        # Negatives limited to batch-present classes: anchors cover a subset
        # and batch labels are remapped onto it.
        train_set, _ = desk_data()
        config = desk_config(restrict_ali_to_batch_classes=True)
        state = init_trainer(config, train_set.dim, train_set.class_count)
        for _ in range(config.warmup_epochs):
            train_epoch_phase1(state, train_set, config)
            state.epoch += 1
        initialize_priors_from_features(state, train_set)
        losses = train_epoch_phase2(state, train_set, config)
        assert np.isfinite(losses["loss_ali"])

    def test_priors_initialized_from_feature_statistics(self):
        train_set, _ = desk_data()
        config = desk_config()
        state = init_trainer(config, train_set.dim, train_set.class_count)
        initialize_priors_from_features(state, train_set)
        # Identity-initialized flow: latents are the features themselves.
        expected = init_priors_from_latents(
            train_set.features.astype(np.float64), train_set.labels, train_set.class_count
        )
        np.testing.assert_allclose(state.priors.means, expected.means)
        np.testing.assert_allclose(state.priors.log_variances, expected.log_variances)


class TestWeightDecayPartition:
    def test_only_head_and_flow_weights_decay(self):
        train_set, _ = desk_data()
        config = desk_config(weight_decay=0.1, momentum=0.0)
        state = init_trainer(config, train_set.dim, train_set.class_count)
        state.priors.means[:] = 1.5  # nonzero so decay would be visible
        state.priors.log_variances[:] = -0.5
        before = {k: v.copy() for k, v in state.parameters().items()}

        from flowprior.trainer import _apply_updates
        groups = {"head.": 1.0, "flow.": 1.0, "priors.": 1.0}
        _apply_updates(state, groups, GradientBundle(), config, epoch=1)

        after = state.parameters()
        for name in after:
            leaf = name.rsplit(".", 1)[-1]
            if name.startswith("priors.") or leaf.startswith("b"):
                np.testing.assert_array_equal(after[name], before[name], err_msg=name)
            elif leaf.startswith("W") and np.any(before[name] != 0):
                assert np.any(after[name] != before[name]), name


class TestTrain:
    def test_single_phase2_epoch_at_boundary(self):
        train_set, test_set = desk_data()
        config = desk_config(epochs=4, warmup_epochs=3)
        _, history = train(config, train_set, test_set)
        assert [rec["phase"] for rec in history] == [1, 1, 1, 2]
        assert all(f"recall@{k}" in history[-1] for k in (1, 2))

    def test_seeded_runs_identical(self):
        train_set, test_set = desk_data()
        config = desk_config()
        _, h1 = train(config, train_set, test_set)
        s2, h2 = train(config, train_set, test_set)
        strip = lambda rec: {k: v for k, v in rec.items() if k != "wall_seconds"}
        assert [strip(r) for r in h1] == [strip(r) for r in h2]
        s3, _ = train(config, train_set, test_set)
        assert params_digest(s2) == params_digest(s3)

    def test_metrics_file_layout(self, tmp_path):
        train_set, test_set = desk_data()
        config = desk_config(epochs=3, warmup_epochs=1)
        metrics_path = tmp_path / "metrics.jsonl"
        _, history = train(config, train_set, test_set, metrics_path=metrics_path)
        lines = metrics_path.read_text().splitlines()
        header = json.loads(lines[0])
        assert header["config"]["seed"] == config.seed
        assert header["config"]["tau"] == config.tau
        records = [json.loads(line) for line in lines[1:]]
        assert len(records) == 3
        for rec, hist in zip(records, history):
            assert rec["epoch"] == hist["epoch"]
            assert rec["loss_total"] == hist["loss_total"]
            assert {"loss_aux", "loss_nf", "loss_ca", "loss_ali", "lr", "wall_seconds"} <= set(rec)

    def test_noncontiguous_labels_rejected(self):
        rng = np.random.default_rng(0)
        bad = FeatureDataset(rng.normal(size=(4, 3)), np.array([1, 1, 2, 2]))
        with pytest.raises(DatasetError):
            train(desk_config(), bad, None)


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        train_set, test_set = desk_data()
        config = desk_config(epochs=3, warmup_epochs=1)
        state, _ = train(config, train_set, test_set)
        path = tmp_path / "model.gapc"
        save_checkpoint(state, config, path)
        loaded, loaded_config = load_checkpoint(path)
        assert loaded_config == config
        assert loaded.epoch == state.epoch
        assert params_digest(loaded) == params_digest(state)
        for name, buf in state.opt.buffers.items():
            np.testing.assert_array_equal(loaded.opt.buffers[name], buf)
        assert loaded.rng.bit_generator.state == state.rng.bit_generator.state

    def test_file_round_trip_byte_identical(self, tmp_path):
        train_set, _ = desk_data()
        config = desk_config(epochs=2, warmup_epochs=1)
        state, _ = train(config, train_set, None)
        p1, p2 = tmp_path / "a.gapc", tmp_path / "b.gapc"
        save_checkpoint(state, config, p1)
        loaded, loaded_config = load_checkpoint(p1)
        save_checkpoint(loaded, loaded_config, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_matches_uninterrupted(self, tmp_path):
        train_set, test_set = desk_data()
        config = desk_config(epochs=5, warmup_epochs=2)
        full_state, full_hist = train(config, train_set, test_set)

        partial = TrainConfig(**{**config.__dict__, "epochs": 3})
        mid_state, _ = train(partial, train_set, test_set)
        path = tmp_path / "mid.gapc"
        save_checkpoint(mid_state, config, path)
        resumed, resumed_config = load_checkpoint(path)
        final_state, tail_hist = train(resumed_config, train_set, test_set, resume=resumed)

        assert params_digest(final_state) == params_digest(full_state)
        strip = lambda rec: {k: v for k, v in rec.items() if k != "wall_seconds"}
        assert [strip(r) for r in tail_hist] == [strip(r) for r in full_hist[3:]]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.gapc"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        from flowprior.errors import FormatError
        with pytest.raises(FormatError):
            load_checkpoint(path)
