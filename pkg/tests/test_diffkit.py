import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from civbalance import diffkit as dk
from civbalance.diffkit import MlpSpec, ParamSet, Tensor
from civbalance.errors import ConfigurationError, NumericError, ShapeError


def test_linear_model_has_one_weight_and_bias():
    params = dk.mlp_init(MlpSpec(3, (), 1))
    assert list(params) == ["layer0.W", "layer0.b"]
    assert params["layer0.W"].shape == (3, 1)


def test_init_is_deterministic():
    spec = MlpSpec(4, (8, 8), 2, init_seed=11)
    assert dk.mlp_init(spec).equals(dk.mlp_init(spec))
    assert not dk.mlp_init(spec).equals(dk.mlp_init(MlpSpec(4, (8, 8), 2, init_seed=12)))


def test_parameter_count():
    spec = MlpSpec(4, (32, 32), 1)
    assert spec.n_params == 4 * 32 + 32 + 32 * 32 + 32 + 32 * 1 + 1 == 1249
    assert dk.mlp_init(spec).size == 1249


def test_init_scale_and_zero_bias():
    params = dk.mlp_init(MlpSpec(10, (20,), 5, init_seed=3))
    lim = np.sqrt(6 / 30)
    assert np.all(np.abs(params["layer0.W"]) <= lim)
    assert np.all(params["layer0.b"] == 0) and np.all(params["layer1.b"] == 0)


@pytest.mark.parametrize("bad", [dict(input_dim=0), dict(input_dim=2, hidden_dims=(0,)),
                                 dict(input_dim=2, output_dim=0),
                                 dict(input_dim=2, output_activation="tanh")])
def test_invalid_spec(bad):
    with pytest.raises(ConfigurationError):
        MlpSpec(**bad)


def test_zero_network_sigmoid_gives_half():
    spec = MlpSpec(3, (4,), 1, "sigmoid")
    params = dk.mlp_init(spec).zeros_like()
    out = dk.mlp_forward(params, spec, np.random.default_rng(0).normal(size=(6, 3)))
    assert np.all(out == 0.5)


def test_single_layer_matches_hand_computation():
    spec = MlpSpec(2, (), 2)
    params = ParamSet({"layer0.W": np.array([[1.0, 2.0], [3.0, 4.0]]), "layer0.b": np.array([0.5, -1.0])})
    X = np.array([[1.0, 0.0], [2.0, -1.0]])
    want = np.array([[1.5, 1.0], [-0.5, -1.0]])
    assert np.array_equal(dk.mlp_forward(params, spec, X), want)


def test_sigmoid_clamps_to_delta():
    spec = MlpSpec(1, (), 1, "sigmoid")
    lo = ParamSet({"layer0.W": np.array([[-1000.0]]), "layer0.b": np.zeros(1)})
    assert dk.mlp_forward(lo, spec, np.ones((1, 1)))[0, 0] == 1e-6
    hi = ParamSet({"layer0.W": np.array([[1000.0]]), "layer0.b": np.zeros(1)})
    assert dk.mlp_forward(hi, spec, np.ones((1, 1)))[0, 0] == 1 - 1e-6


def test_forward_shape_error():
    spec = MlpSpec(3, (), 1)
    with pytest.raises(ShapeError):
        dk.mlp_forward(dk.mlp_init(spec), spec, np.ones((2, 4)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 2), elements=st.floats(-50, 50)), st.integers(0, 2**32))
def test_sigmoid_output_always_in_clamp_band(X, seed):
    spec = MlpSpec(2, (4,), 1, "sigmoid", init_seed=seed)
    params = ParamSet((k, 30 * v) for k, v in dk.mlp_init(spec).items())
    out = dk.mlp_forward(params, spec, X)
    assert np.all(out >= 1e-6) and np.all(out <= 1 - 1e-6)


def test_half_squared_norm_gradient_is_params():
    params = dk.mlp_init(MlpSpec(3, (4,), 2, init_seed=5))

    def loss(ps):
        total = Tensor(0.0)
        for v in ps.values():
            total = dk.add(total, dk.sum_all(dk.square(v)))
        return dk.scale(total, 0.5)

    _, grads = dk.value_and_grad(loss, params)
    for k in params:
        assert np.allclose(grads[k], params[k], atol=0, rtol=1e-15)


def test_constant_loss_has_zero_gradient():
    params = dk.mlp_init(MlpSpec(3, (), 1))
    value, grads = dk.value_and_grad(lambda ps: Tensor(2.5), params)
    assert value == 2.5
    assert all(np.all(g == 0) for g in grads.values())


def test_non_finite_loss_names_stage():
    params = dk.mlp_init(MlpSpec(1, (), 1))
    with pytest.raises(NumericError) as info:
        dk.value_and_grad(lambda ps: dk.log(dk.sub(dk.sum_all(ps["layer0.b"]), 1.0)), params, "civ")
    assert info.value.stage == "civ"


def _mlp_mse(spec, X, y):
    def loss(ps):
        return dk.mean_all(dk.square(dk.sub(dk.mlp_apply(ps, spec, X), y[:, None])))
    return loss


@pytest.mark.parametrize("act", ["identity", "sigmoid"])
def test_mlp_gradient_matches_finite_differences(act):
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(10, 3)), rng.uniform(size=10)
    spec = MlpSpec(3, (5, 4), 1, act, init_seed=2)
    params = dk.mlp_init(spec)
    loss = _mlp_mse(spec, X, y)
    _, g = dk.value_and_grad(loss, params)
    fd = dk.finite_difference_grad(lambda p: loss(p).item(), params, 1e-5)
    assert dk.relative_error(g.flatten(), fd.flatten()) < 1e-4


def test_row_normalize_gradient():
    rng = np.random.default_rng(4)
    A = ParamSet({"a.W": rng.normal(size=(6, 3))})
    target = rng.normal(size=(6, 3))

    def loss(ps):
        return dk.sum_all(dk.mul(dk.row_normalize(ps["a.W"]), target))

    _, g = dk.value_and_grad(loss, A)
    fd = dk.finite_difference_grad(lambda p: loss(p).item(), A)
    assert dk.relative_error(g.flatten(), fd.flatten()) < 1e-6


def test_forward_and_gradients_are_bitwise_reproducible():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(10, 3)), rng.normal(size=10)
    spec = MlpSpec(3, (8,), 1, init_seed=9)
    a = dk.value_and_grad(_mlp_mse(spec, X, y), dk.mlp_init(spec))
    b = dk.value_and_grad(_mlp_mse(spec, X, y), dk.mlp_init(spec))
    assert a[0] == b[0] and a[1].equals(b[1])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4),
       st.integers(0, 2**32))
def test_flatten_unflatten_roundtrip(shapes, seed):
    rng = np.random.default_rng(seed)
    ps = ParamSet((f"layer{i}.W", rng.normal(size=s)) for i, s in enumerate(shapes))
    back = ps.unflatten(ps.flatten())
    assert back.equals(ps)
    assert np.array_equal(back.flatten(), ps.flatten())


def test_unflatten_rejects_wrong_length():
    ps = ParamSet({"layer0.W": np.zeros((2, 2))})
    with pytest.raises(ShapeError):
        ps.unflatten(np.zeros(3))


def test_sgd_step_arithmetic():
    p, g = ParamSet({"w.W": np.array([1.0])}), ParamSet({"w.W": np.array([2.0])})
    assert dk.sgd_step(p, g, 0.05)["w.W"][0] == pytest.approx(0.9, abs=1e-15)
    assert dk.sgd_step(p, g.zeros_like(), 0.05).equals(p)


def test_sgd_two_steps_equal_one_double_step():
    rng = np.random.default_rng(0)
    p = ParamSet({"w.W": rng.normal(size=(3, 2))})
    g = ParamSet({"w.W": rng.normal(size=(3, 2))})
    two = dk.sgd_step(dk.sgd_step(p, g, 0.05), g, 0.05)
    one = dk.sgd_step(p, g, 0.1)
    assert np.allclose(two["w.W"], one["w.W"], atol=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        dk.sgd_step(ParamSet({"w.W": np.zeros(2)}), ParamSet({"w.W": np.zeros(3)}), 0.1)


def test_first_adam_step_has_magnitude_lr():
    p = ParamSet({"w.W": np.array([0.3, -0.2])})
    g = ParamSet({"w.W": np.array([1.0, 1.0])})
    state, new = dk.adam_step(dk.AdamState.zeros(p, lr=0.0005), p, g)
    assert state.step == 1
    assert np.allclose(p["w.W"] - new["w.W"], 0.0005, atol=1e-9)


def test_adam_zero_gradient_and_step_counter():
    p = ParamSet({"w.W": np.array([0.3, -0.2])})
    state = dk.AdamState.zeros(p)
    for i in range(3):
        state, q = dk.adam_step(state, p, p.zeros_like())
        assert q.equals(p) and state.step == i + 1


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3)))
def test_adam_update_opposes_gradient(g):
    p = ParamSet({"w.W": np.zeros(6)})
    _, new = dk.adam_step(dk.AdamState.zeros(p), p, ParamSet({"w.W": g}))
    assert np.all(np.sign(new["w.W"]) == -np.sign(g))


def test_l2_penalty_values():
    assert dk.l2_penalty(ParamSet({"a.W": np.ones((2, 2))}), 0.0) == 0.0
    assert dk.l2_penalty(ParamSet({"a.W": np.array([3.0])}), 0.1) == pytest.approx(0.9)
    assert dk.l2_penalty(ParamSet({"a.W": np.array([1.0]), "a.b": np.array([5.0])}), 1.0) == 1.0


def test_l2_penalty_gradient():
    params = dk.mlp_init(MlpSpec(3, (4,), 1, init_seed=1))
    params = ParamSet((k, v + 0.1) for k, v in params.items())
    _, g = dk.value_and_grad(lambda ps: dk.l2_penalty(ps, 0.3), params)
    for k in params:
        want = 0.6 * params[k] if dk.is_weight(k) else np.zeros_like(params[k])
        assert np.allclose(g[k], want, atol=1e-15)
    fd = dk.finite_difference_grad(lambda p: dk.l2_penalty(p, 0.3), params)
    assert dk.relative_error(g.flatten(), fd.flatten()) < 1e-6
