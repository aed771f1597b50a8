"""Oracle tests for the reverse-mode engine: hand-derived gradients,
central-difference checks for every primitive, and the Adam contracts."""

import numpy as np
import pytest

from sceneadapt.autodiff import (
    AdamState,
    Parameter,
    Tape,
    adam_step,
    grad_check,
    stable_sigmoid,
)
from sceneadapt.errors import (
    EmptyGradientError,
    NumericError,
    ShapeError,
    TapeReuseError,
)


def test_sigmoid_value_and_derivative():
    p = Parameter(np.zeros((1, 1)))
    tape = Tape()
    out = tape.sigmoid(tape.param(p))
    assert out.value[0, 0] == 0.5
    tape.backward(tape.sum(out))
    assert p.grad[0, 0] == pytest.approx(0.25, abs=1e-15)


def test_mean_of_square_hand_gradient():
    # d/dx mean(x*x) at [1,2,3] is 2x/3 = [2/3, 4/3, 2]
    p = Parameter(np.array([[1.0, 2.0, 3.0]]))
    tape = Tape()
    x = tape.param(p)
    tape.backward(tape.mean(tape.multiply(x, x)))
    np.testing.assert_allclose(p.grad, [[2 / 3, 4 / 3, 2.0]], rtol=1e-15)


def test_matmul_gradient_is_outer_product():
    rng = np.random.default_rng(0)
    w = Parameter(rng.standard_normal((3, 4)))
    v = rng.standard_normal((4, 1))

    def loss(tape):
        return tape.sum(tape.matmul(tape.param(w), tape.constant(v)))

    assert grad_check(loss, [w]) < 1e-7
    for p in [w]:
        p.zero_grad()
    tape = Tape()
    tape.backward(loss(tape))
    np.testing.assert_allclose(w.grad, np.ones((3, 1)) @ v.T, rtol=1e-14)


def test_grad_check_quadratic_ten_params():
    rng = np.random.default_rng(1)
    params = [Parameter(rng.uniform(1.0, 2.0, size=(1, 1))) for _ in range(10)]
    anchors = rng.uniform(-1.0, -0.5, size=10)

    def loss(tape):
        total = tape.constant(np.zeros(()))
        for p, a in zip(params, anchors):
            d = tape.offset(tape.param(p), -a)
            total = tape.add(total, tape.sum(tape.multiply(d, d)))
        return total

    assert grad_check(loss, params) <= 1e-7


def test_grad_check_constant_function():
    p = Parameter(np.ones((2, 2)))

    def loss(tape):
        tape.param(p)
        return tape.sum(tape.constant(np.ones((1, 1))))

    assert grad_check(loss, [p]) == 0.0
    tape = Tape()
    tape.param(p)
    tape.backward(tape.sum(tape.constant(np.ones(()))))
    assert np.all(p.grad == 0.0)


@pytest.mark.parametrize("shape", [(1, 1), (5, 3), (64, 64)])
@pytest.mark.parametrize(
    "name", ["matmul", "add", "bias_add", "multiply", "scale", "offset",
             "sigmoid", "tanh", "power_frac", "power_int", "sum", "mean",
             "log10", "cols", "hstack"])
def test_every_primitive_grad_check(name, shape):
    rng = np.random.default_rng(hash((name, shape)) % 2**32)
    a = Parameter(rng.uniform(0.5, 1.5, size=shape))
    b = Parameter(rng.uniform(0.5, 1.5, size=shape))
    matmul_const = rng.uniform(-1, 1, (shape[1], 3))

    def loss(tape):
        x = tape.param(a)
        y = tape.param(b)
        if name == "matmul":
            out = tape.matmul(x, tape.constant(matmul_const))
        elif name == "add":
            out = tape.add(x, y)
        elif name == "bias_add":
            bias = tape.cols(y, 0, 1)
            out = tape.add(x, bias)
        elif name == "multiply":
            out = tape.multiply(x, y)
        elif name == "scale":
            out = tape.scale(x, -2.5)
        elif name == "offset":
            out = tape.offset(x, 1.25)
        elif name == "sigmoid":
            out = tape.sigmoid(x)
        elif name == "tanh":
            out = tape.tanh(x)
        elif name == "power_frac":
            out = tape.power(x, 0.3)
        elif name == "power_int":
            out = tape.power(tape.offset(x, -1.0), 2)
        elif name == "sum":
            out = tape.sum(x)
        elif name == "mean":
            out = tape.mean(x)
        elif name == "log10":
            out = tape.log10(x)
        elif name == "cols":
            out = tape.cols(x, 0, max(1, shape[1] // 2))
        elif name == "hstack":
            out = tape.hstack([x, y, x])
        return tape.mean(tape.multiply(out, out)) if out.value.size > 1 \
            else tape.sum(out)

    coords = min(25, a.value.size + b.value.size)
    assert grad_check(loss, [a, b], max_coords=coords, seed=0) <= 1e-5


def test_shared_node_diamond_gradient():
    # One node feeding several consumers exercises gradient accumulation
    # and the buffer-donation path.
    p = Parameter(np.array([[0.7, 1.3], [0.2, 0.9]]))

    def loss(tape):
        x = tape.param(p)
        s = tape.sigmoid(x)
        left = tape.offset(s, 0.5)
        right = tape.multiply(s, s)
        both = tape.add(left, right)
        return tape.add(tape.sum(both), tape.sum(s))

    assert grad_check(loss, [p]) <= 1e-8


def test_backward_twice_raises():
    p = Parameter(np.ones((2, 2)))
    tape = Tape()
    out = tape.sum(tape.param(p))
    tape.backward(out)
    with pytest.raises(TapeReuseError):
        tape.backward(out)


def test_shape_mismatch_is_construction_error():
    tape = Tape()
    a = tape.constant(np.ones((2, 3)))
    b = tape.constant(np.ones((4, 2)))
    with pytest.raises(ShapeError):
        tape.matmul(a, b)
    with pytest.raises(ShapeError):
        tape.add(a, b)


def test_non_finite_forward_raises_numeric_error():
    tape = Tape()
    with pytest.raises(NumericError):
        tape.log10(tape.constant(np.array([[0.0]])))
    with pytest.raises(NumericError):
        tape.power(tape.constant(np.array([[-1.0]])), 0.5)


def test_scalar_loss_required():
    tape = Tape()
    node = tape.constant(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        tape.backward(node)


def test_adam_zero_gradient_leaves_parameters():
    p = Parameter(np.array([[1.0, -2.0]]))
    state = AdamState([p], lr=0.1)
    tape = Tape()
    x = tape.param(p)
    tape.backward(tape.sum(tape.scale(x, 0.0)))
    before = p.value.copy()
    adam_step(state, [p])
    np.testing.assert_array_equal(p.value, before)


def test_adam_first_step_magnitude_is_lr():
    # With constant gradient g, the bias-corrected first step is
    # lr * g / (|g| + eps), i.e. a signed step of almost exactly lr.
    p = Parameter(np.array([[3.0, -1.0]]))
    before = p.value.copy()
    state = AdamState([p], lr=0.05)
    tape = Tape()
    tape.backward(tape.sum(tape.multiply(tape.param(p),
                                         tape.constant(np.array([[2.0, -4.0]])))))
    adam_step(state, [p])
    np.testing.assert_allclose(before - p.value, [[0.05, -0.05]], rtol=1e-6)


def test_adam_never_touches_frozen_parameters():
    frozen = Parameter(np.array([[1.0, 2.0]]), trainable=False)
    live = Parameter(np.array([[1.0, 2.0]]))
    state = AdamState([frozen, live], lr=0.1)
    raw = frozen.value.tobytes()
    for _ in range(5):
        tape = Tape()
        out = tape.add(tape.param(frozen), tape.param(live))
        tape.backward(tape.sum(tape.multiply(out, out)))
        adam_step(state, [frozen, live])
    assert frozen.value.tobytes() == raw
    assert not np.array_equal(live.value, np.array([[1.0, 2.0]]))


def test_adam_before_backward_raises():
    p = Parameter(np.ones((2, 2)))
    state = AdamState([p], lr=0.1)
    with pytest.raises(EmptyGradientError):
        adam_step(state, [p])


def test_gradients_reset_after_step():
    p = Parameter(np.ones((2, 1)))
    state = AdamState([p], lr=0.1)
    tape = Tape()
    tape.backward(tape.sum(tape.param(p)))
    adam_step(state, [p])
    assert np.all(p.grad == 0.0)
    assert not p.grad_ready


def test_grad_check_rejects_bad_epsilon():
    p = Parameter(np.ones((1, 1)))
    with pytest.raises(ValueError):
        grad_check(lambda tape: tape.sum(tape.param(p)), [p], epsilon=1e-2)


def test_stable_sigmoid_extremes():
    x = np.array([-1e4, -50.0, 0.0, 50.0, 1e4])
    s = stable_sigmoid(x)
    assert np.all(np.isfinite(s))
    assert s[0] == 0.0 or s[0] < 1e-300
    assert s[2] == 0.5
    assert s[4] == 1.0
