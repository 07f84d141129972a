"""Model forward pass, hand-rolled derivatives, and checkpoint IO."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densflow import autodiff as ad
from densflow import nn
from densflow.errors import ConfigurationError


def small_config(**kw):
    base = dict(input_dim=3, cond_dim=2, hidden_width=16, depth=2, time_embed_dim=8)
    base.update(kw)
    return nn.FieldModelConfig(**base)


def f64(params):
    return params.astype(np.float64)


class TestConfig:
    def test_feature_dim(self):
        assert small_config().feature_dim == 3 + 2 + 8
        assert small_config(cond_dim=0).feature_dim == 3 + 8
        assert small_config(cond_dim=0, joint_mode=True).feature_dim == 3 + 3 + 8

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            small_config(input_dim=0)
        with pytest.raises(ConfigurationError):
            small_config(time_embed_dim=7)
        with pytest.raises(ConfigurationError):
            small_config(activation="relu6")
        with pytest.raises(ConfigurationError):
            small_config(joint_mode=True)  # cond_dim=2 clashes with the mask


class TestParamStore:
    def test_param_count_matches_closed_form(self):
        cfg = small_config()
        params = nn.init_model(cfg, seed=0)
        assert params.param_count == nn.param_count(cfg)

    @settings(max_examples=20)
    @given(seed=st.integers(0, 2**31 - 1))
    def test_flatten_roundtrip(self, seed):
        params = nn.init_model(small_config(), seed=seed)
        back = params.unflatten(params.flatten())
        for name in params.names():
            assert np.array_equal(back[name], params[name])

    def test_unflatten_rejects_wrong_length(self):
        params = nn.init_model(small_config(), seed=0)
        with pytest.raises(ValueError):
            params.unflatten(np.zeros(params.param_count + 1))


class TestForward:
    cfg = small_config()
    model = nn.FieldModel(cfg)
    params = nn.init_model(cfg, seed=0)

    def test_zero_at_init(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 3))
        out = self.model.forward(self.params, x, 0.3, cond=rng.standard_normal(2))
        assert out.shape == (5, 3)
        assert np.all(out == 0.0)

    def test_deterministic_and_batch_consistent(self):
        params = _trained_like(self.cfg, seed=3)
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 3))
        cond = rng.standard_normal((4, 2))
        t = rng.uniform(0.1, 0.9, 4)
        full = self.model.forward(params, x, t, cond=cond)
        again = self.model.forward(params, x, t, cond=cond)
        assert np.array_equal(full, again)
        # Row i alone must reproduce row i of the batch.
        one = self.model.forward(params, x[2:3], t[2], cond=cond[2:3])
        assert np.allclose(one, full[2:3], atol=1e-6)

    def test_input_validation(self):
        with pytest.raises(ValueError):
            self.model.forward(self.params, np.zeros(3), 0.5, cond=np.zeros(2))
        with pytest.raises(ValueError):
            self.model.forward(self.params, np.zeros((2, 4)), 0.5, cond=np.zeros(2))
        with pytest.raises(ValueError):
            self.model.forward(self.params, np.zeros((2, 3)), 0.5)  # missing cond
        with pytest.raises(ValueError):
            self.model.forward(self.params, np.zeros((2, 3)), np.zeros(3), cond=np.zeros(2))

    def test_joint_mode_wants_mask_not_cond(self):
        cfg = small_config(cond_dim=0, joint_mode=True)
        model = nn.FieldModel(cfg)
        params = nn.init_model(cfg, seed=0)
        x = np.zeros((2, 3))
        with pytest.raises(ValueError):
            model.forward(params, x, 0.5)
        with pytest.raises(ValueError):
            model.forward(params, x, 0.5, cond=np.zeros(2), mask=np.zeros(3))
        out = model.forward(params, x, 0.5, mask=np.array([1.0, 0.0, 0.0]))
        assert out.shape == (2, 3)


def _trained_like(cfg, seed):
    """Init perturbed away from zero so derivatives are nontrivial."""
    params = nn.init_model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    arrays = {}
    for name, arr in params.items():
        if name in nn.FROZEN_NAMES:
            arrays[name] = arr
        else:
            arrays[name] = arr + rng.standard_normal(arr.shape).astype(np.float32) * 0.05
    return nn.ParamStore(arrays)


@pytest.mark.parametrize("activation", nn.ACTIVATIONS)
def test_grad_params_matches_finite_differences(activation):
    cfg = small_config(hidden_width=8, depth=1, activation=activation)
    model = nn.FieldModel(cfg)
    params = f64(_trained_like(cfg, seed=7))
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3))
    cond = rng.standard_normal((4, 2))
    target = rng.standard_normal((4, 3))

    def loss_fn(p):
        out = model.forward_traced(p, x, 0.37, cond=cond)
        r = out - target
        return ad.sum_all(r * r) * (1.0 / 4.0)

    loss, grads = model.grad_params(params, loss_fn)
    flat = params.flatten()
    gflat = grads.flatten()

    def loss_at(vec):
        p = params.unflatten(vec)
        out = model.forward(p, x, 0.37, cond=cond)
        return float(np.sum((out - target) ** 2) / 4.0)

    assert loss == pytest.approx(loss_at(flat), rel=1e-12)
    # Spot-check 25 coordinates against central differences.
    idx = rng.choice(flat.size, size=25, replace=False)
    h = 1e-6
    for i in idx:
        e = np.zeros_like(flat)
        e[i] = h
        fd = (loss_at(flat + e) - loss_at(flat - e)) / (2 * h)
        assert gflat[i] == pytest.approx(fd, rel=2e-4, abs=1e-8)


def test_grad_of_frozen_frequencies_is_zero():
    cfg = small_config(hidden_width=8, depth=1)
    model = nn.FieldModel(cfg)
    params = f64(_trained_like(cfg, seed=2))
    x = np.random.default_rng(3).standard_normal((2, 3))

    def loss_fn(p):
        out = model.forward_traced(p, x, 0.5, cond=np.zeros(2))
        return ad.sum_all(out * out)

    _, grads = model.grad_params(params, loss_fn)
    assert np.all(grads["time_frequencies"] == 0.0)


def test_jvp_matches_finite_differences():
    cfg = small_config(hidden_width=8, depth=2)
    model = nn.FieldModel(cfg)
    params = f64(_trained_like(cfg, seed=11))
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 3))
    cond = rng.standard_normal(2)
    direction = rng.standard_normal(3)
    jvp = model.jvp_input(params, x, 0.61, cond=cond, direction=direction)
    h = 1e-6
    fd = (
        model.forward(params, x + h * direction, 0.61, cond=cond)
        - model.forward(params, x - h * direction, 0.61, cond=cond)
    ) / (2 * h)
    assert np.allclose(jvp, fd, atol=1e-5)


def test_divergence_matches_finite_differences():
    cfg = small_config(hidden_width=8, depth=2)
    model = nn.FieldModel(cfg)
    params = f64(_trained_like(cfg, seed=13))
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 3))
    cond = rng.standard_normal(2)
    div = model.divergence(params, x, 0.44, cond=cond)
    h = 1e-6
    fd = np.zeros(4)
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd += (
            model.forward(params, x + e, 0.44, cond=cond)
            - model.forward(params, x - e, 0.44, cond=cond)
        )[:, i] / (2 * h)
    assert np.allclose(div, fd, atol=1e-5)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = small_config()
    raw = _trained_like(cfg, seed=21)
    ema = _trained_like(cfg, seed=22)
    meta = {"note": "roundtrip", "numbers": [1, 2, 3]}
    nn.save_params(tmp_path, {"raw": raw, "ema": ema}, metadata=meta)
    stores, back_meta = nn.load_params(tmp_path)
    assert back_meta == meta
    assert set(stores) == {"raw", "ema"}
    for name in raw.names():
        assert np.array_equal(stores["raw"][name], raw[name])
        assert np.array_equal(stores["ema"][name], ema[name])
        assert stores["ema"][name].dtype == np.float32


def test_checkpoint_rejects_float64(tmp_path):
    params = f64(nn.init_model(small_config(), seed=0))
    with pytest.raises(ValueError):
        nn.save_params(tmp_path, {"raw": params})


# -- autodiff primitives ------------------------------------------------


def _fd_scalar(fn, x, h=1e-6):
    return (fn(x + h) - fn(x - h)) / (2 * h)


@pytest.mark.parametrize(
    "name,fn,xs",
    [
        ("tanh", ad.tanh, [-2.0, -0.3, 0.0, 1.7]),
        ("erf", ad.erf, [-1.5, 0.0, 0.4, 2.0]),
        ("exp", ad.exp, [-2.0, 0.0, 1.3]),
        ("sqrt", ad.sqrt, [0.25, 1.0, 4.0]),
    ],
)
def test_unary_gradients(name, fn, xs):
    from scipy import special

    plain = {
        "tanh": np.tanh,
        "erf": special.erf,
        "exp": np.exp,
        "sqrt": np.sqrt,
    }[name]
    for x0 in xs:
        v = ad.Var(np.array([x0]))
        out = ad.sum_all(fn(v))
        out.backward()
        assert out.val == pytest.approx(plain(x0), rel=1e-12)
        assert v.grad[0] == pytest.approx(_fd_scalar(plain, x0), rel=1e-5)


@given(
    a=st.floats(-3, 3, allow_nan=False),
    b=st.floats(-3, 3, allow_nan=False),
)
def test_mul_add_gradients(a, b):
    va = ad.Var(np.array([a]))
    vb = ad.Var(np.array([b]))
    out = ad.sum_all(va * vb + va * 2.0 - vb)
    out.backward()
    assert va.grad[0] == pytest.approx(b + 2.0, abs=1e-9)
    assert vb.grad[0] == pytest.approx(a - 1.0, abs=1e-9)


def test_dual_arithmetic_chain():
    # Forward-mode through a small expression: f(x) = x * exp(x), f'(x) = (1+x) exp(x).
    x0 = 0.7
    d = ad.Dual(np.array([x0]), np.array([1.0]))
    out = d * ad.exp(d)
    assert out.val[0] == pytest.approx(x0 * np.exp(x0), rel=1e-12)
    assert out.tan[0] == pytest.approx((1 + x0) * np.exp(x0), rel=1e-12)


def test_numpy_defers_to_var():
    # ndarray + Var must route through Var's reflected operator, not
    # numpy broadcasting over the object.
    v = ad.Var(np.ones(3))
    out = np.ones(3) + v
    assert isinstance(out, ad.Var)
    out2 = np.float64(2.0) * v
    assert isinstance(out2, ad.Var)
