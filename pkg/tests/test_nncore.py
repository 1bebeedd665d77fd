"""Autodiff and optimizer tests.

The finite-difference oracle here is local to the test module on purpose:
it must stay independent of nncore.gradient_check, which it also vets.
"""

import numpy as np
import pytest

from deskdiff import nncore
from deskdiff.errors import NonFiniteError
from deskdiff.nncore import AdamState, ParamSet, Tensor, adam_step


def central_diff(loss_fn, params: ParamSet, name: str, flat_index: int, h: float = 1e-3) -> float:
    """Independent central-difference derivative of loss_fn wrt one coordinate."""
    p = params.astype(np.float64)
    flat = p.value(name).reshape(-1)
    saved = flat[flat_index]
    flat[flat_index] = saved + h
    f_plus = loss_fn(p)
    flat[flat_index] = saved - h
    f_minus = loss_fn(p)
    flat[flat_index] = saved
    return (f_plus - f_minus) / (2.0 * h)


def eval_loss(graph, params: ParamSet) -> float:
    outs, _ = nncore.eval_with_grads(graph, params)
    return float(outs[0])


def test_square_gradient_is_2x():
    params = ParamSet()
    params.add("x", np.array(3.0))

    def graph(p, _):
        return nncore.square(p["x"])

    outs, grads = nncore.eval_with_grads(graph, params)
    assert outs[0] == pytest.approx(9.0)
    assert grads["x"] == pytest.approx(6.0)


def test_linear_sum_gradient_is_all_ones_structure():
    params = ParamSet()
    params.add("w", np.arange(6, dtype=np.float32).reshape(2, 3))
    v = np.ones((3, 1), dtype=np.float32)

    def graph(p, inputs):
        return nncore.sum_all(nncore.matmul(p["w"], inputs[0]))

    _, grads = nncore.eval_with_grads(graph, params, [v])
    np.testing.assert_array_equal(grads["w"], np.ones((2, 3), dtype=np.float32))


def two_layer_graph(p, inputs):
    h = nncore.silu(nncore.affine(inputs[0], p["w1"], p["b1"]))
    out = nncore.affine(h, p["w2"], p["b2"])
    return nncore.mean_all(nncore.square(out))


def make_two_layer_params(seed: int = 7) -> tuple[ParamSet, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = ParamSet()
    params.add("w1", rng.normal(0, 0.5, (4, 8)).astype(np.float32))
    params.add("b1", rng.normal(0, 0.5, (8,)).astype(np.float32))
    params.add("w2", rng.normal(0, 0.5, (8, 3)).astype(np.float32))
    params.add("b2", rng.normal(0, 0.5, (3,)).astype(np.float32))
    x = rng.normal(0, 1, (5, 4)).astype(np.float32)
    return params, x


def test_two_layer_net_matches_finite_differences():
    params, x = make_two_layer_params()
    p64 = params.astype(np.float64)
    _, grads = nncore.eval_with_grads(two_layer_graph, p64, [x.astype(np.float64)])

    def loss_fn(p):
        out, _ = nncore.eval_with_grads(two_layer_graph, p, [x.astype(np.float64)])
        return float(out[0])

    rng = np.random.default_rng(0)
    for name in params.names():
        size = params.value(name).size
        for flat_index in rng.choice(size, size=min(6, size), replace=False):
            fd = central_diff(loss_fn, p64, name, int(flat_index))
            analytic = grads[name].reshape(-1)[int(flat_index)]
            assert abs(analytic - fd) / max(1.0, abs(analytic)) < 1e-4


@pytest.mark.parametrize(
    "opname",
    [
        "affine",
        "silu",
        "softmax",
        "layernorm",
        "mean_pool",
        "gather",
        "concat_cols",
        "concat_rows",
        "cross_entropy",
        "square_sum",
        "mul_broadcast",
        "sub",
    ],
)
def test_each_op_passes_gradient_check(opname):
    rng = np.random.default_rng(hash(opname) % (2**32))
    params = ParamSet()
    x = rng.normal(0, 1, (6, 5)).astype(np.float32)
    params.add("a", rng.normal(0, 0.7, (6, 5)).astype(np.float32))
    params.add("w", rng.normal(0, 0.7, (5, 4)).astype(np.float32))
    params.add("b", rng.normal(0, 0.7, (4,)).astype(np.float32))
    params.add("gain", rng.normal(1, 0.2, (5,)).astype(np.float32))
    labels = rng.integers(0, 5, size=6)
    col = rng.normal(0, 1, (6, 1)).astype(np.float32)

    def graph(p, inputs):
        if opname == "affine":
            return nncore.sum_all(nncore.square(nncore.affine(p["a"], p["w"], p["b"])))
        if opname == "silu":
            return nncore.sum_all(nncore.square(nncore.silu(p["a"])))
        if opname == "softmax":
            return nncore.sum_all(nncore.square(nncore.softmax_rows(p["a"])))
        if opname == "layernorm":
            return nncore.sum_all(
                nncore.square(nncore.layer_norm_rows(p["a"], p["gain"], p["b4"]))
            )
        if opname == "mean_pool":
            return nncore.sum_all(nncore.square(nncore.mean_pool_rows(p["a"], 3)))
        if opname == "gather":
            picked = nncore.gather_rows(p["a"], np.array([0, 2, 2, 5, 1]))
            return nncore.sum_all(nncore.square(picked))
        if opname == "concat_cols":
            both = nncore.concat_cols([p["a"], nncore.silu(p["a"])])
            return nncore.sum_all(nncore.square(both))
        if opname == "concat_rows":
            both = nncore.concat_rows([p["a"], nncore.scale(p["a"], 2.0)])
            return nncore.sum_all(nncore.square(both))
        if opname == "cross_entropy":
            return nncore.cross_entropy(p["a"], labels)
        if opname == "square_sum":
            return nncore.mean_all(nncore.square(nncore.sub(p["a"], inputs[0])))
        if opname == "mul_broadcast":
            return nncore.sum_all(nncore.square(nncore.mul(p["a"], Tensor(col))))
        if opname == "sub":
            return nncore.sum_all(nncore.square(nncore.sub(p["a"], p["w5"])))
        raise AssertionError(opname)

    if opname == "layernorm":
        params.add("b4", rng.normal(0, 0.3, (5,)).astype(np.float32))
    if opname == "sub":
        params.add("w5", rng.normal(0, 0.7, (6, 5)).astype(np.float32))

    err = nncore.gradient_check(graph, params, [x], probe_count=24, h=1e-3, seed=3)
    assert err < 1e-4


def test_gradient_check_linear_model_is_nearly_exact():
    params = ParamSet()
    params.add("w", np.array([[1.0, -2.0], [0.5, 3.0]], dtype=np.float32))
    x = np.array([[1.0, 2.0]], dtype=np.float32)

    def graph(p, inputs):
        return nncore.sum_all(nncore.matmul(inputs[0], p["w"]))

    err = nncore.gradient_check(graph, params, [x], probe_count=4, h=1e-3)
    assert err < 1e-6


def test_gradient_check_flags_corrupted_gradient(monkeypatch):
    params, x = make_two_layer_params()
    real = nncore.eval_with_grads

    def corrupted(graph, p, inputs=()):
        outs, grads = real(graph, p, inputs)
        grads["w1"] = grads["w1"].copy()
        grads["w1"].reshape(-1)[0] += 1.0
        return outs, grads

    monkeypatch.setattr(nncore, "eval_with_grads", corrupted)
    total = sum(params.value(n).size for n in params.names())
    err = nncore.gradient_check(two_layer_graph, params, [x], probe_count=total, h=1e-3)
    assert err >= 0.5


def test_gradient_check_rejects_bad_step_size():
    params, x = make_two_layer_params()
    with pytest.raises(ValueError):
        nncore.gradient_check(two_layer_graph, params, [x], probe_count=1, h=0.0)
    with pytest.raises(ValueError):
        nncore.gradient_check(two_layer_graph, params, [x], probe_count=0)


def test_forward_is_deterministic_bitwise():
    params, x = make_two_layer_params()
    out1, grads1 = nncore.eval_with_grads(two_layer_graph, params, [x])
    out2, grads2 = nncore.eval_with_grads(two_layer_graph, params, [x])
    assert out1[0].tobytes() == out2[0].tobytes()
    for name in grads1:
        assert grads1[name].tobytes() == grads2[name].tobytes()


def test_non_scalar_loss_rejected():
    params = ParamSet()
    params.add("w", np.ones((2, 2), dtype=np.float32))

    def graph(p, _):
        return nncore.square(p["w"])

    with pytest.raises(ValueError):
        nncore.eval_with_grads(graph, params)


def test_non_finite_loss_raises():
    params = ParamSet()
    params.add("x", np.array(1e30, dtype=np.float32))

    def graph(p, _):
        big = nncore.square(p["x"])
        return nncore.square(big)  # overflows float32 to inf

    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        nncore.eval_with_grads(graph, params)


# ---------------------------------------------------------------------------
# Optimizer


def test_adam_zero_gradient_leaves_params_unchanged():
    params = ParamSet()
    params.add("w", np.array([1.0, 2.0], dtype=np.float32))
    state = AdamState(params, lr=0.1)
    before = params.value("w").copy()
    adam_step(params, {"w": np.zeros(2, dtype=np.float32)}, state)
    np.testing.assert_array_equal(params.value("w"), before)
    assert state.step_count == 1


def test_adam_first_step_matches_hand_computation():
    # t=1, g=1: m_hat=g, v_hat=g^2, so the step is lr * 1/(1+eps) ~= lr.
    params = ParamSet()
    params.add("w", np.array(1.0, dtype=np.float32))
    state = AdamState(params, lr=0.1)
    adam_step(params, {"w": np.array(1.0, dtype=np.float32)}, state)
    assert params.value("w") == pytest.approx(0.9, abs=1e-6)


def test_adam_rejects_gradient_for_frozen_tensor():
    params = ParamSet()
    params.add("w", np.ones(3, dtype=np.float32), trainable=True)
    params.add("frozen", np.ones(3, dtype=np.float32), trainable=False)
    state = AdamState(params, lr=0.1)
    grads = {"w": np.ones(3, dtype=np.float32), "frozen": np.ones(3, dtype=np.float32)}
    with pytest.raises(ValueError):
        adam_step(params, grads, state)


def test_adam_rejects_missing_gradient():
    params = ParamSet()
    params.add("w", np.ones(3, dtype=np.float32))
    params.add("u", np.ones(3, dtype=np.float32))
    state = AdamState(params, lr=0.1)
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.ones(3, dtype=np.float32)}, state)


def test_adam_never_touches_frozen_tensors_bitwise():
    rng = np.random.default_rng(11)
    params = ParamSet()
    params.add("w", rng.normal(0, 1, (4, 4)).astype(np.float32), trainable=True)
    params.add("frozen", rng.normal(0, 1, (4, 4)).astype(np.float32), trainable=False)
    frozen_bytes = params.value("frozen").tobytes()
    state = AdamState(params, lr=0.05)
    for _ in range(10):
        adam_step(params, {"w": rng.normal(0, 1, (4, 4)).astype(np.float32)}, state)
    assert params.value("frozen").tobytes() == frozen_bytes


def test_adam_detects_divergence_to_non_finite():
    params = ParamSet()
    params.add("w", np.array(np.float32(3.0e38)))
    state = AdamState(params, lr=1e38)
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        adam_step(params, {"w": np.array(-1.0, dtype=np.float32)}, state)
