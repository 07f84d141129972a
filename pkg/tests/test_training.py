"""Losses, optimiser, data handling, and the training loop."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densflow import nn
from densflow.errors import ConfigurationError, TrainingDiverged
from densflow.paths import EPS_T, gaussian_conditional_score
from densflow.training import (
    AdamW,
    ConditionMaskPolicy,
    Dataset,
    DiffusionEDM,
    Estimator,
    FlowMatching,
    ScoreMatching,
    TrainConfig,
    cfm_loss,
    dsm_loss,
    edm_loss,
    ema_update,
    joint_masked_loss,
    load_dataset,
    lr_schedule,
    make_method,
    save_dataset,
    standardize,
    destandardize,
    train,
)

TINY = dict(hidden_width=16, depth=2, time_embed_dim=8)


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=100, warmup_steps=100)
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=1000, min_lr=1e-3, peak_lr=1e-4)
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=1000, val_fraction=0.0)
        with pytest.raises(ConfigurationError):
            TrainConfig(total_steps=1000, early_stop_ratio=1.0)

    def test_lr_schedule_shape(self):
        cfg = TrainConfig(total_steps=1000, warmup_steps=100, peak_lr=1e-4, min_lr=1e-6)
        assert lr_schedule(cfg, 0) == 0.0
        assert lr_schedule(cfg, 50) == pytest.approx(5e-5)
        assert lr_schedule(cfg, 100) == pytest.approx(1e-4)
        # Cosine midpoint sits halfway between peak and min.
        assert lr_schedule(cfg, 550) == pytest.approx(0.5 * (1e-4 + 1e-6), rel=1e-12)
        assert lr_schedule(cfg, 1000) == pytest.approx(1e-6, rel=1e-9)
        with pytest.raises(ValueError):
            lr_schedule(cfg, 1001)

    @settings(max_examples=30)
    @given(step=st.integers(0, 1000))
    def test_lr_schedule_bounds(self, step):
        cfg = TrainConfig(total_steps=1000, warmup_steps=100, peak_lr=1e-4, min_lr=1e-6)
        lr = lr_schedule(cfg, step)
        assert 0.0 <= lr <= 1e-4 + 1e-15


class TestDataset:
    def test_column_stats(self):
        thetas = np.array([[0.0, 10.0], [2.0, 10.0], [4.0, 10.0]])
        xs = np.array([[1.0], [2.0], [3.0]])
        ds = Dataset(thetas=thetas, xs=xs)
        assert np.allclose(ds.theta_mean, [2.0, 10.0])
        # The constant column keeps std 1 so standardization stays finite.
        assert ds.theta_std[1] == 1.0
        assert ds.n == 3 and ds.d_theta == 2 and ds.d_x == 1

    def test_standardize_roundtrip(self):
        rng = np.random.default_rng(0)
        vals = rng.standard_normal((50, 3)) * 4 + 2
        mean, std = vals.mean(axis=0), vals.std(axis=0)
        back = destandardize(standardize(vals, mean, std), mean, std)
        assert np.allclose(back, vals, atol=1e-12)

    def test_csv_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        ds = Dataset(thetas=rng.standard_normal((20, 2)), xs=rng.standard_normal((20, 3)))
        path = tmp_path / "sims.csv"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert np.array_equal(back.thetas, ds.thetas)
        assert np.array_equal(back.xs, ds.xs)

    def test_empty_x_columns(self):
        ds = Dataset(thetas=np.zeros((5, 2)), xs=np.zeros((5, 0)))
        assert ds.d_x == 0
        assert ds.x_mean.shape == (0,)


class TestMaskPolicy:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigurationError):
            ConditionMaskPolicy(joint=0.5, posterior=0.5, likelihood=0.5, bernoulli=0.5)

    def test_sampled_masks(self):
        policy = ConditionMaskPolicy()
        rng = np.random.default_rng(0)
        masks = policy.sample(rng, 4000, d_theta=2, d_x=3)
        assert masks.shape == (4000, 5)
        # Never all-observed: that mask would zero the training signal.
        assert masks.sum(axis=1).max() < 5
        is_joint = np.all(masks == 0, axis=1)
        is_post = np.all(masks == [0, 0, 1, 1, 1], axis=1)
        is_lik = np.all(masks == [1, 1, 0, 0, 0], axis=1)
        # Bernoulli draws can reproduce any named pattern, so the named
        # rates are lower bounds.
        assert 0.1 < is_joint.mean() < 0.25
        assert is_post.mean() > 0.3
        assert is_lik.mean() > 0.15


class TestMethods:
    def test_flow_matching_prepare_geometry(self):
        rng = np.random.default_rng(0)
        x1 = np.random.default_rng(1).standard_normal((200, 3))
        prep = FlowMatching().prepare(x1, rng)
        t = prep["time_input"]
        # Reconstruct x0 from the interpolation point and the target.
        x0 = x1 - prep["target"]
        assert np.allclose(prep["net_input"], (1 - t[:, None]) * x0 + t[:, None] * x1)
        assert prep["weight"] is None

    @pytest.mark.parametrize("sde", ["vp", "ve"])
    def test_score_matching_target_is_conditional_score(self, sde):
        method = ScoreMatching(sde=sde)
        rng = np.random.default_rng(2)
        x1 = np.random.default_rng(3).standard_normal((300, 2))
        prep = method.prepare(x1, rng)
        t = prep["time_input"]
        assert t.min() >= EPS_T - 1e-12
        tau = 1.0 - t
        scale, std = method.kernel(tau)
        score = gaussian_conditional_score(scale[:, None] * x1, std[:, None], prep["net_input"])
        assert np.allclose(prep["target"], score, rtol=1e-9)

    def test_score_matching_weightings(self):
        rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
        x1 = np.zeros((100, 2))
        prep_s = ScoreMatching(weighting="sigma2").prepare(x1, rng_a)
        prep_l = ScoreMatching(weighting="likelihood").prepare(x1, rng_b)
        tau = 1.0 - prep_s["time_input"]
        method = ScoreMatching()
        _, std = method.kernel(tau)
        assert np.allclose(prep_s["weight"], std * std)
        assert np.allclose(prep_l["weight"], method.squared_diffusion(tau))

    def test_edm_sigma_data_measured_from_targets(self):
        method = DiffusionEDM()
        rng = np.random.default_rng(0)
        targets = np.random.default_rng(1).standard_normal((5000, 4)) * 2.0
        method.resolve_sigma_data(targets)
        assert method.sigma_data == pytest.approx(2.0, abs=0.05)
        # Degenerate targets fall back to the stock value.
        fallback = DiffusionEDM()
        fallback.resolve_sigma_data(np.zeros((10, 2)))
        assert fallback.sigma_data == 0.5
        prep = method.prepare(targets[:10], rng)
        assert set(prep) >= {"net_input", "time_input", "target", "weight",
                             "edm_noisy", "edm_c_skip", "edm_c_out"}

    def test_make_method_roundtrip_and_unknown(self):
        method = ScoreMatching(sde="ve", weighting="likelihood")
        clone = make_method(method.tag, method.state())
        assert clone.state() == method.state()
        with pytest.raises(ConfigurationError):
            make_method("nope")


class TestZeroInitLossIdentities:
    """A fresh model outputs the zero field, so each loss has a closed form."""

    def setup_method(self):
        cfg = nn.FieldModelConfig(input_dim=3, **TINY)
        self.model = nn.FieldModel(cfg)
        self.params = nn.init_model(cfg, seed=0).astype(np.float64)
        self.x1 = np.random.default_rng(0).standard_normal((20000, 3))

    def test_flow_matching_is_twice_dim(self):
        # E||x1 - x0||^2 = 2d for unit-variance data and noise.
        loss = cfm_loss(self.model, self.params, self.x1, rng=1)
        assert loss == pytest.approx(6.0, abs=0.2)

    def test_score_matching_sigma2_is_dim(self):
        # sigma^2 ||eps/sigma||^2 reduces to ||eps||^2, expectation d.
        loss = dsm_loss(self.model, self.params, self.x1, rng=2)
        assert loss == pytest.approx(3.0, abs=0.15)

    def test_edm_is_dim_for_unit_sigma_data(self):
        method = DiffusionEDM(sigma_data=1.0)
        loss = edm_loss(self.model, self.params, self.x1, rng=3, method=method)
        assert loss == pytest.approx(3.0, abs=0.15)


def test_joint_masked_loss_matches_manual_computation():
    cfg = nn.FieldModelConfig(input_dim=4, joint_mode=True, **TINY)
    model = nn.FieldModel(cfg)
    params = nn.init_model(cfg, seed=0).astype(np.float64)
    z1 = np.random.default_rng(7).standard_normal((500, 4))
    policy = ConditionMaskPolicy()

    loss = joint_masked_loss(model, params, z1, rng=9, policy=policy, d_theta=2)

    # Replay the same draws: prepare consumes t then x0, then the policy
    # draws its masks. At zero init only the masked target survives.
    rng = np.random.default_rng(9)
    n, d = z1.shape
    t = rng.uniform(0.0, 1.0, n)
    x0 = rng.standard_normal((n, d))
    masks = policy.sample(rng, n, 2, 2)
    expected = float(np.sum(((1.0 - masks) * (z1 - x0)) ** 2) / n)
    assert loss == pytest.approx(expected, rel=1e-12)


class TestAdamW:
    def test_single_step_scalar_oracle(self):
        p = nn.ParamStore({"w": np.array([1.0])})
        g = nn.ParamStore({"w": np.array([0.5])})
        opt = AdamW(p, weight_decay=0.01)
        out = opt.step(p, g, lr=0.1)
        # Hand computation: m=0.05, v=2.5e-4; bias-corrected m_hat=0.5,
        # v_hat=0.25; update = 0.5/(0.5 + 1e-8) + 0.01.
        expected = 1.0 - 0.1 * (0.5 / (math.sqrt(0.25) + 1e-8) + 0.01)
        assert out["w"][0] == pytest.approx(expected, rel=1e-12)

    def test_frozen_entries_pass_through(self):
        cfg = nn.FieldModelConfig(input_dim=2, **TINY)
        params = nn.init_model(cfg, seed=0)
        grads = nn.ParamStore({k: np.ones_like(v) for k, v in params.items()})
        out = AdamW(params).step(params, grads, lr=0.01)
        assert np.array_equal(out["time_frequencies"], params["time_frequencies"])
        assert not np.array_equal(out["w_in"], params["w_in"])

    def test_bias_correction_first_step_magnitude(self):
        # With zero weight decay the first update has magnitude ~lr
        # regardless of gradient scale.
        for scale in (1e-4, 1.0, 1e4):
            p = nn.ParamStore({"w": np.array([0.0])})
            g = nn.ParamStore({"w": np.array([scale])})
            out = AdamW(p, weight_decay=0.0).step(p, g, lr=0.01)
            assert abs(out["w"][0]) == pytest.approx(0.01, rel=1e-3)


def test_ema_update_formula():
    shadow = nn.ParamStore({"w": np.array([1.0], dtype=np.float32)})
    params = nn.ParamStore({"w": np.array([2.0], dtype=np.float32)})
    out = ema_update(shadow, params, decay=0.9)
    assert out["w"][0] == pytest.approx(0.9 * 1.0 + 0.1 * 2.0)
    assert out["w"].dtype == np.float32


def _toy_dataset(n=400, seed=0):
    # Strongly correlated columns: structure that survives the per-column
    # z-scoring, so training has something to learn.
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(n)
    thetas = np.stack([z, z + 0.1 * rng.standard_normal(n)], axis=1)
    return Dataset(thetas=thetas, xs=np.zeros((n, 0)))


def _tiny_model():
    return nn.FieldModel(nn.FieldModelConfig(input_dim=2, **TINY))


class TestTrainLoop:
    def test_loss_decreases_and_history_grid(self):
        cfg = TrainConfig(total_steps=300, batch_size=64, peak_lr=3e-3, warmup_steps=30,
                          eval_interval=50, seed=0)
        res = train(_tiny_model(), _toy_dataset(), FlowMatching(), cfg,
                    pipeline="unconditional")
        steps = [row["step"] for row in res.history]
        assert steps == [50, 100, 150, 200, 250, 300]
        assert res.history[-1]["val_loss"] < res.history[0]["val_loss"]
        assert res.estimator.step == 300

    def test_same_seed_is_bit_deterministic(self):
        cfg = TrainConfig(total_steps=120, batch_size=32, warmup_steps=10,
                          eval_interval=40, seed=4)
        res_a = train(_tiny_model(), _toy_dataset(), FlowMatching(), cfg,
                      pipeline="unconditional")
        res_b = train(_tiny_model(), _toy_dataset(), FlowMatching(), cfg,
                      pipeline="unconditional")
        assert res_a.history == res_b.history
        for name in res_a.estimator.params.names():
            assert np.array_equal(res_a.estimator.params[name], res_b.estimator.params[name])
            assert np.array_equal(res_a.estimator.ema_params[name],
                                  res_b.estimator.ema_params[name])

    def test_resume_continues_step_grid(self):
        ds = _toy_dataset()
        cfg_full = TrainConfig(total_steps=200, batch_size=32, warmup_steps=10,
                               eval_interval=50, seed=2)
        full = train(_tiny_model(), ds, FlowMatching(), cfg_full, pipeline="unconditional")

        cfg_half = TrainConfig(total_steps=100, batch_size=32, warmup_steps=10,
                               eval_interval=50, seed=2)
        half = train(_tiny_model(), ds, FlowMatching(), cfg_half, pipeline="unconditional")
        resumed = train(_tiny_model(), ds, FlowMatching(), cfg_full, pipeline="unconditional",
                        init_params=half.estimator.params, init_ema=half.estimator.ema_params,
                        start_step=100)
        assert [r["step"] for r in resumed.history] == [150, 200]
        assert resumed.estimator.step == 200
        # Resumed training draws fresh batches, so losses agree only in
        # distribution with the uninterrupted run.
        assert resumed.history[-1]["val_loss"] == pytest.approx(
            full.history[-1]["val_loss"], rel=0.5)

    def test_early_stopping_triggers(self):
        # Learning rate ramps all the way up; late evaluations deteriorate
        # past the ratio and stop the run.
        cfg = TrainConfig(total_steps=400, batch_size=32, peak_lr=0.1, warmup_steps=399,
                          eval_interval=10, early_stop_ratio=1.2, patience=2,
                          ema_decay=0.05, seed=1)
        res = train(_tiny_model(), _toy_dataset(), FlowMatching(), cfg,
                    pipeline="unconditional")
        assert res.stopped_early
        assert res.estimator.step < 400

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        cfg = TrainConfig(total_steps=200, batch_size=32, peak_lr=1e4, warmup_steps=2,
                          eval_interval=10, seed=0)
        with pytest.raises(TrainingDiverged):
            train(_tiny_model(), _toy_dataset(), FlowMatching(), cfg,
                  pipeline="unconditional")

    def test_checkpoints_written(self, tmp_path):
        cfg = TrainConfig(total_steps=80, batch_size=32, warmup_steps=10,
                          eval_interval=40, seed=0)
        out = tmp_path / "run"
        res = train(_tiny_model(), _toy_dataset(), FlowMatching(), cfg,
                    pipeline="unconditional", out_dir=str(out), task=None)
        assert (out / "checkpoint.bin").exists()
        assert (out / "checkpoint_best" / "checkpoint.bin").exists()
        loaded = Estimator.load(str(out))
        assert loaded.step == 80
        assert loaded.method == "flow_matching"
        assert loaded.pipeline == "unconditional"
        for name in loaded.ema_params.names():
            want = res.estimator.ema_params[name].astype(np.float32)
            assert np.allclose(loaded.ema_params[name], want, atol=1e-7)

    def test_pipeline_model_mismatch(self):
        cfg = TrainConfig(total_steps=50, warmup_steps=5)
        joint_model = nn.FieldModel(nn.FieldModelConfig(input_dim=2, joint_mode=True, **TINY))
        with pytest.raises(ConfigurationError):
            train(joint_model, _toy_dataset(), FlowMatching(), cfg, pipeline="unconditional")
        with pytest.raises(ConfigurationError):
            train(_tiny_model(), _toy_dataset(), FlowMatching(), cfg, pipeline="joint")


def test_estimator_roundtrip_preserves_method_state(tmp_path):
    cfg = nn.FieldModelConfig(input_dim=2, **TINY)
    params = nn.init_model(cfg, seed=0)
    est = Estimator(
        config=cfg, params=params, ema_params=params.copy(),
        method="score_matching", pipeline="unconditional",
        method_state=ScoreMatching(sde="ve").state(),
        theta_mean=np.array([0.5, -0.5]), theta_std=np.array([2.0, 3.0]),
        x_mean=np.zeros(0), x_std=np.ones(0), step=123, task="checkerboard",
    )
    est.save(str(tmp_path))
    back = Estimator.load(str(tmp_path))
    assert back.method_state["sde"] == "ve"
    assert back.step == 123
    assert back.task == "checkerboard"
    assert np.array_equal(back.theta_mean, est.theta_mean)
    assert np.array_equal(back.theta_std, est.theta_std)
    assert back.d_theta == 2
