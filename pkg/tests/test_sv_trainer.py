import math
from dataclasses import replace

import numpy as np
import pytest

from tools import sv_grad as G
from tools import sv_trainer
from tools.sv_network import NetworkDims, embed, embed_transformed, init_params
from tools.sv_trainer import (
    METRICS_COLUMNS,
    AdamState,
    FrozenBackboneViolation,
    TrainingDiverged,
    adam_step,
    lr_at,
    network_dims,
    train_acl,
    train_acl_q,
    train_baseline,
    train_combined,
    train_mlft,
    train_mltc,
    train_mltc_stage2,
    train_pn,
    train_stage2_only,
    train_system,
    with_system,
)


def _assert_same_params(a, b):
    assert a.dims == b.dims
    for key in a.tensors:
        np.testing.assert_array_equal(a.tensors[key], b.tensors[key])


class TestSchedule:
    def test_endpoints_exact(self):
        assert lr_at(1e-3, 1e-4, 0, 2000) == 1e-3
        assert lr_at(1e-3, 1e-4, 1999, 2000) == 1e-4

    def test_monotone_and_geometric(self):
        values = [lr_at(1e-3, 1e-4, t, 11) for t in range(11)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert values[5] == pytest.approx(math.sqrt(1e-3 * 1e-4), rel=1e-12)

    def test_single_step_uses_start(self):
        assert lr_at(0.5, 0.1, 0, 1) == 0.5


class TestAdamStep:
    def test_zero_gradient_keeps_params(self, rng):
        params = {"w": rng.standard_normal((3, 2))}
        new, state = adam_step(params, {"w": np.zeros((3, 2))}, AdamState.zeros(params), lr=0.1)
        np.testing.assert_array_equal(new["w"], params["w"])
        assert state.t == 1

    def test_zero_gradient_decays_moments(self):
        params = {"w": np.zeros(2)}
        state = AdamState(m={"w": np.array([1.0, -2.0])}, v={"w": np.array([4.0, 1.0])}, t=3)
        _, new_state = adam_step(params, {"w": np.zeros(2)}, state, lr=0.01)
        np.testing.assert_allclose(new_state.m["w"], [0.9, -1.8])
        np.testing.assert_allclose(new_state.v["w"], [0.999 * 4.0, 0.999])

    def test_first_step_has_magnitude_lr(self, rng):
        params = {"w": np.zeros(5)}
        g = rng.choice([-1.0, 1.0], size=5) * rng.uniform(0.5, 2.0, size=5)
        new, _ = adam_step(params, {"w": g}, AdamState.zeros(params), lr=0.01)
        np.testing.assert_allclose(new["w"], -0.01 * np.sign(g), rtol=1e-6)

    def test_inputs_untouched(self, rng):
        params = {"w": rng.standard_normal(3)}
        before = params["w"].copy()
        state = AdamState.zeros(params)
        adam_step(params, {"w": np.ones(3)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"], before)
        assert state.t == 0 and not state.m["w"].any()

    def test_quadratic_bowl_converges(self, rng):
        c = rng.standard_normal(4)
        params = {"x": rng.standard_normal(4)}
        state = AdamState.zeros(params)
        steps = 500
        for t in range(steps):
            grads = {"x": 2.0 * (params["x"] - c)}
            params, state = adam_step(params, grads, state, lr_at(0.1, 1e-3, t, steps))
        np.testing.assert_allclose(params["x"], c, atol=1e-3)

    def test_mismatched_keys_rejected(self):
        params = {"a": np.zeros(2)}
        with pytest.raises(ValueError):
            adam_step(params, {"b": np.zeros(2)}, AdamState.zeros(params), lr=0.1)

    def test_mismatched_shapes_rejected(self):
        params = {"a": np.zeros(2)}
        with pytest.raises(G.ShapeError):
            adam_step(params, {"a": np.zeros(3)}, AdamState.zeros(params), lr=0.1)


class TestStageOne:
    def test_zero_steps_returns_initialization(self, tiny_corpus, tiny_train_config):
        cfg = replace(tiny_train_config, steps_stage1=0)
        result = train_baseline(tiny_corpus, cfg)
        expected = init_params(network_dims(tiny_corpus, cfg), sv_trainer.derive_rng(cfg.seed, "init"))
        _assert_same_params(result.params, expected)
        assert result.report.rows == []

    def test_same_seed_same_checkpoint(self, tiny_corpus, tiny_train_config):
        a = train_pn(tiny_corpus, tiny_train_config)
        b = train_pn(tiny_corpus, tiny_train_config)
        assert a.params.checksum() == b.params.checksum()
        assert a.report.to_frame().equals(b.report.to_frame())

    def test_seed_changes_trajectory(self, tiny_corpus, tiny_train_config):
        a = train_pn(tiny_corpus, tiny_train_config)
        b = train_pn(tiny_corpus, replace(tiny_train_config, seed=1))
        assert a.params.checksum() != b.params.checksum()

    def test_zero_lambda_matches_baseline(self, tiny_corpus, tiny_train_config):
        cfg = replace(tiny_train_config, lam=0.0)
        pn = train_pn(tiny_corpus, cfg)
        base = train_baseline(tiny_corpus, cfg)
        _assert_same_params(pn.params, base.params)
        np.testing.assert_array_equal(
            pn.report.to_frame()["loss_total"].to_numpy(), base.report.to_frame()["loss_total"].to_numpy()
        )

    def test_pn_report_decomposes(self, tiny_corpus, tiny_train_config):
        frame = train_pn(tiny_corpus, tiny_train_config).report.to_frame()
        assert list(frame.columns) == METRICS_COLUMNS
        assert len(frame) == tiny_train_config.steps_stage1
        recomputed = frame["loss_ce"] + tiny_train_config.lam * frame["loss_pn"]
        np.testing.assert_allclose(frame["loss_total"], recomputed, atol=1e-12)
        assert (frame["loss_contra"] == 0.0).all()
        assert frame["lr"].iloc[0] == tiny_train_config.lr_stage1[0]
        assert frame["lr"].iloc[-1] == tiny_train_config.lr_stage1[1]

    def test_baseline_logs_only_ce(self, tiny_corpus, tiny_train_config):
        frame = train_baseline(tiny_corpus, tiny_train_config).report.to_frame()
        assert (frame["loss_pn"] == 0.0).all() and (frame["loss_contra"] == 0.0).all()
        np.testing.assert_array_equal(frame["loss_total"], frame["loss_ce"])

    @pytest.mark.parametrize("train", [train_acl, train_acl_q])
    def test_contrastive_systems_decompose(self, tiny_corpus, tiny_train_config, train):
        frame = train(tiny_corpus, tiny_train_config).report.to_frame()
        lam = tiny_train_config.lam
        recomputed = frame["loss_ce"] + lam * (frame["loss_pn"] + frame["loss_contra"])
        np.testing.assert_allclose(frame["loss_total"], recomputed, atol=1e-12)
        assert (frame["loss_contra"] > 0.0).all()

    def test_acl_without_erasing_still_trains(self, tiny_corpus, tiny_train_config):
        cfg = replace(tiny_train_config, episode=replace(tiny_train_config.episode, erase_fraction=0.0))
        frame = train_acl(tiny_corpus, cfg).report.to_frame()
        assert np.isfinite(frame["loss_total"]).all()

    def test_baseline_beats_uniform_classifier(self, tiny_corpus, tiny_train_config):
        cfg = replace(tiny_train_config, steps_stage1=200)
        frame = train_baseline(tiny_corpus, cfg).report.to_frame()
        assert frame["loss_ce"].tail(20).mean() < math.log(tiny_corpus.num_train_speakers)

    def test_divergence_aborts_with_step(self, tiny_corpus, tiny_train_config, monkeypatch):
        def exploding(*args, **kwargs):
            return G.constant(np.inf), {"ce": np.inf, "pn": 0.0, "contra": 0.0}

        monkeypatch.setattr(sv_trainer, "_episode_losses", exploding)
        with pytest.raises(TrainingDiverged, match="step 0") as info:
            train_baseline(tiny_corpus, tiny_train_config)
        assert info.value.step == 0


class TestStageTwo:
    @pytest.fixture
    def stage1(self, tiny_corpus, tiny_train_config):
        return train_pn(tiny_corpus, tiny_train_config)

    def test_backbone_untouched(self, tiny_corpus, tiny_train_config, stage1):
        before = stage1.params.checksum()
        result = train_mltc_stage2(tiny_corpus, stage1.params, tiny_train_config)
        assert stage1.params.checksum() == before
        assert result.params.checksum() == before
        assert result.coeffs is not None

    def test_zero_steps_gives_near_identity(self, tiny_corpus, tiny_train_config, stage1):
        cfg = replace(tiny_train_config, steps_stage2=0)
        result = train_mltc_stage2(tiny_corpus, stage1.params, cfg)
        for key, value in result.coeffs.tensors.items():
            target = 1.0 if key.endswith(".S1") else 0.0
            assert np.all(np.abs(value - target) <= 1e-3 + 1e-12)
        x = tiny_corpus.held_out_utterances[0].features
        plain = embed(x, stage1.params).vector
        shifted = embed_transformed(x, stage1.params, result.coeffs).vector
        assert np.linalg.norm(shifted - plain) <= 1e-2 * np.linalg.norm(plain)

    def test_report_continues_stage_one(self, tiny_corpus, tiny_train_config, stage1):
        result = train_mltc(tiny_corpus, tiny_train_config, stage1)
        frame = result.report.to_frame()
        total = tiny_train_config.steps_stage1 + tiny_train_config.steps_stage2
        assert list(frame["step"]) == list(range(total))
        stage2 = frame.iloc[tiny_train_config.steps_stage1:]
        assert (stage2["loss_ce"] == 0.0).all()
        np.testing.assert_array_equal(stage2["loss_total"], stage2["loss_pn"])
        assert result.report.system == "mltc"
        assert len(stage1.report.rows) == tiny_train_config.steps_stage1

    def test_reused_stage_one_matches_fresh_run(self, tiny_corpus, tiny_train_config, stage1):
        cfg = with_system(tiny_train_config, "mltc")
        reused = train_system(tiny_corpus, cfg, stage1=stage1)
        fresh = train_system(tiny_corpus, cfg)
        _assert_same_params(reused.params, fresh.params)
        for key in reused.coeffs.tensors:
            np.testing.assert_array_equal(reused.coeffs.tensors[key], fresh.coeffs.tensors[key])

    def test_backbone_mutation_detected(self, tiny_corpus, tiny_train_config, stage1, monkeypatch):
        original = sv_trainer.as_constants

        def mutating(tensors):
            tensors["fc1.b"] += 1.0
            return original(tensors)

        monkeypatch.setattr(sv_trainer, "as_constants", mutating)
        with pytest.raises(FrozenBackboneViolation):
            train_mltc_stage2(tiny_corpus, stage1.params.copy(), tiny_train_config)

    def test_combined_keeps_acl_backbone(self, tiny_corpus, tiny_train_config):
        acl = train_acl(tiny_corpus, tiny_train_config)
        combined = train_combined(tiny_corpus, tiny_train_config, acl)
        assert combined.params.checksum() == acl.params.checksum()
        assert combined.report.system == "mltc-acl"

    def test_mlft_zero_steps_is_identity(self, tiny_corpus, tiny_train_config, stage1):
        cfg = replace(tiny_train_config, steps_stage2=0)
        result = train_mlft(tiny_corpus, stage1.params, cfg)
        _assert_same_params(result.params, stage1.params)

    def test_mlft_leaves_head_alone(self, tiny_corpus, tiny_train_config, stage1):
        result = train_mlft(tiny_corpus, stage1.params, tiny_train_config)
        for key in ("fc2.W", "fc2.b", "classifier.W", "classifier.b"):
            np.testing.assert_array_equal(result.params.tensors[key], stage1.params.tensors[key])
        assert not np.array_equal(result.params.tensors["fc1.W"], stage1.params.tensors["fc1.W"])
        assert result.coeffs is None

    def test_stage2_only_checks_dimensions(self, tiny_corpus, tiny_train_config):
        other = init_params(NetworkDims(input_dim=6, frame_dims=(3,), embed_dim=4, fc2_dim=4, num_classes=10), 0)
        with pytest.raises(G.ShapeError, match="dimension chain"):
            train_stage2_only(tiny_corpus, with_system(tiny_train_config, "mltc"), other)

    def test_stage2_only_requires_two_stage_system(self, tiny_corpus, tiny_train_config, stage1):
        with pytest.raises(ValueError, match="no second stage"):
            train_stage2_only(tiny_corpus, with_system(tiny_train_config, "acl"), stage1.params)

    def test_stage2_only_matches_in_process_run(self, tiny_corpus, tiny_train_config, stage1):
        cfg = with_system(tiny_train_config, "mltc")
        alone = train_stage2_only(tiny_corpus, cfg, stage1.params)
        chained = train_mltc(tiny_corpus, cfg, stage1)
        for key in alone.coeffs.tensors:
            np.testing.assert_array_equal(alone.coeffs.tensors[key], chained.coeffs.tensors[key])
        assert len(alone.report.rows) == tiny_train_config.steps_stage2

    @pytest.mark.slow
    def test_stage_two_makes_progress(self, tiny_corpus, tiny_train_config):
        cfg = replace(tiny_train_config, steps_stage1=200, steps_stage2=300, lr_stage2=(1e-2, 1e-3))
        result = train_mltc(tiny_corpus, cfg)
        stage2 = result.report.to_frame().iloc[cfg.steps_stage1:]["loss_pn"]
        assert stage2.tail(30).mean() <= stage2.head(30).mean()
