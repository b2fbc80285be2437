import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal, special

from embtrack.core import (
    Adam, Tape, Tensor, add, concat_channels, conv2d, he_init, load_arrays, max_pool2d, mean, mul,
    precision, relu, save_arrays, sigmoid, slice_channels, square, sub, sum as tsum, tanh, upsample2x,
)
from embtrack.core.checkpoint import CheckpointError
from embtrack.core.tensor import get_default_dtype
from embtrack.harness.gradcheck import check


def grad_of(fn, *arrays):
    ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        tape.backward(fn(*ts))
    return [t.grad for t in ts]


# ---------------------------------------------------------------- tensor / tape

def test_precision_context_restores_dtype():
    before = get_default_dtype()
    with precision("float32"):
        assert Tensor([1.0]).data.dtype == np.float32
    assert get_default_dtype() is before


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = mul(x, 2.0)
        with pytest.raises(ValueError):
            tape.backward(y)


def test_backward_rejects_untracked_root():
    with Tape() as tape:
        y = tsum(Tensor(np.ones(3)))
        with pytest.raises(ValueError):
            tape.backward(y)


def test_gradient_accumulates_over_reuse():
    x = np.array([1.5, -2.0, 3.0])
    (g,) = grad_of(lambda t: tsum(mul(t, t)), x)
    np.testing.assert_allclose(g, 2 * x)


def test_ops_outside_tape_record_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = tsum(mul(x, x))
    assert y.item() == 3.0
    with Tape() as tape:
        pass
    assert len(tape) == 0


def test_dunder_arithmetic():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    np.testing.assert_array_equal((a + b).data, [4, 7])
    np.testing.assert_array_equal((a - b).data, [-2, -3])
    np.testing.assert_array_equal((a * b).data, [3, 10])
    np.testing.assert_array_equal((-a).data, [-1, -2])
    np.testing.assert_array_equal((1.0 - a).data, [0, -1])


# ---------------------------------------------------------------- forward oracles

def test_conv2d_zero_padding_matches_scipy():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    y = conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(4):
            ref[n, o] = b[o] + sum(signal.correlate2d(x[n, c], w[o, c], mode="same") for c in range(3))
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_conv2d_reflect_padding_matches_padded_valid_correlation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((1, 2, 5, 5))
    y = conv2d(Tensor(x), Tensor(w), padding="reflect").data
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2), (2, 2)), mode="reflect")
    ref = sum(signal.correlate2d(xp[0, c], w[0, c], mode="valid") for c in range(2))
    np.testing.assert_allclose(y[0, 0], ref, atol=1e-12)


def test_conv2d_1x1_is_channel_mixing():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((5, 3, 1, 1))
    y = conv2d(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(y, np.einsum("oc,bchw->bohw", w[:, :, 0, 0], x), atol=1e-12)


def test_conv2d_errors():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ValueError):
        conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), padding="wrap")


def test_max_pool_and_upsample_match_numpy():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 8))
    y = max_pool2d(Tensor(x)).data
    np.testing.assert_array_equal(y, x.reshape(2, 3, 3, 2, 4, 2).max(axis=(3, 5)))
    u = upsample2x(Tensor(y)).data
    np.testing.assert_array_equal(u, np.repeat(np.repeat(y, 2, axis=2), 2, axis=3))
    with pytest.raises(ValueError):
        max_pool2d(Tensor(np.zeros((1, 1, 3, 4))))


def test_max_pool_tie_gradient_goes_to_first_element():
    x = np.zeros((1, 1, 2, 2))
    (g,) = grad_of(lambda t: tsum(max_pool2d(t)), x)
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


def test_activations_match_reference():
    x = np.linspace(-800, 800, 101)
    np.testing.assert_allclose(sigmoid(Tensor(x)).data, special.expit(x), atol=1e-300)
    np.testing.assert_allclose(tanh(Tensor(x)).data, np.tanh(x))
    np.testing.assert_array_equal(relu(Tensor(x)).data, np.maximum(x, 0))


def test_concat_and_slice_roundtrip():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))
    c = concat_channels(Tensor(a), Tensor(b))
    np.testing.assert_array_equal(slice_channels(c, 2, 5).data, b)
    with pytest.raises(ValueError):
        concat_channels(Tensor(a), Tensor(np.zeros((1, 1, 4, 3))))


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("padding", ["zero", "reflect"])
def test_conv2d_gradients(padding):
    rng = np.random.default_rng(5)
    arrays = [rng.standard_normal((2, 2, 5, 4)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]
    r = rng.standard_normal((2, 3, 5, 4))
    with precision(np.float64):
        err = check(lambda x, w, b: tsum(mul(conv2d(x, w, b, padding=padding), Tensor(r))), arrays)
    assert err < 1e-6


def test_elementwise_gradients():
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    with precision(np.float64):
        assert check(lambda x, y: tsum(square(sub(add(x, y), mul(x, y)))), [a, b]) < 1e-6
        assert check(lambda x: mean(tanh(x)), [a]) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([(3, 4), (1, 4), (3, 1), (4,), (1,)]))
def test_broadcast_gradient_has_input_shape(shape):
    a = np.ones((3, 4))
    b = np.full(shape, 2.0)
    ga, gb = grad_of(lambda x, y: tsum(mul(x, y)), a, b)
    assert ga.shape == a.shape and gb.shape == b.shape
    np.testing.assert_allclose(gb.sum(), 12.0)


# ---------------------------------------------------------------- optimiser

def test_adam_first_step_matches_hand_computation():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1, weight_decay=0.0)
    w.grad = np.array([0.5, -0.25])
    opt.step()
    # bias-corrected first step moves every weight by lr * sign(g)
    np.testing.assert_allclose(w.data, [0.9, -1.9], atol=1e-6)


def test_adam_weight_decay_acts_without_gradient():
    w = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.01, weight_decay=1e-5)
    opt.step()
    assert w.data[0] < 3.0


def test_adam_rejects_nan_gradient():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"w": w})
    w.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError):
        opt.step()
    assert w.data[0] == 1.0


def test_he_init_statistics():
    w = he_init((64, 32, 3, 3), np.random.default_rng(0))
    assert abs(w.data.std() - np.sqrt(2 / (32 * 9))) < 0.01
    assert abs(w.data.mean()) < 0.01


# ---------------------------------------------------------------- checkpoint

@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["float32", "float64", "int64", "uint8", "int32"]),
                          st.lists(st.integers(0, 4), max_size=4)), max_size=5))
def test_checkpoint_roundtrip(tmp_path_factory, specs):
    rng = np.random.default_rng(0)
    arrays = {f"a{k}/x": (rng.standard_normal(shape) * 50).astype(dt) for k, (dt, shape) in enumerate(specs)}
    path = tmp_path_factory.mktemp("ck") / "c.embt"
    save_arrays(path, arrays)
    back = load_arrays(path)
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(back[k], arrays[k])


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "c.embt"
    save_arrays(path, {"w": np.ones(3)})
    raw = path.read_bytes()
    path.write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        load_arrays(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_arrays(path)
    with pytest.raises(CheckpointError):
        save_arrays(path, {"c": np.ones(2, dtype=np.complex64)})
