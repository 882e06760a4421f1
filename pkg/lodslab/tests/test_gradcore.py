import sys
import os

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..")))

import numpy as np
import pytest

from lodslab import gradcore as gc
from lodslab.gradcore import Tape, Tensor, backward
from lodslab.oracle import finite_diff_check
from lodslab.schedule import add_noise, make_schedule
from lodslab.utils import ShapeError, keyed_rng


def test_elementwise_and_matmul_values():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0])
    np.testing.assert_array_equal(gc.add(a, b).data, [4.0, 6.0])
    np.testing.assert_array_equal((a * b).data, [3.0, 8.0])
    m = Tensor(np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(gc.matmul(Tensor(np.eye(2)), m).data, m.data)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as excinfo:
        gc.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    assert "(2,)" in str(excinfo.value)
    assert "(3,)" in str(excinfo.value)


def test_matmul_misaligned():
    with pytest.raises(ShapeError):
        gc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_square_sum_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(gc.reduce_sum(gc.square(x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    assert x.grad.dtype == np.float32


def test_gradients_accumulate_until_cleared():
    x = Tensor([1.0, -1.0], requires_grad=True)
    backward(gc.reduce_sum(gc.scale(x, 3.0)))
    backward(gc.reduce_sum(gc.scale(x, 3.0)))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    gc.zero_grad([x])
    assert x.grad is None


def test_non_scalar_root_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(gc.square(x))


def test_detached_input_gets_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tape = backward(gc.reduce_sum(gc.square(gc.detach(x))))
    assert len(tape) == 0
    assert x.grad is None


def test_detached_residual_routes_through_noised_input():
    """Residual held constant, gradient flows only through z_t = alpha x + sigma eps."""
    s = make_schedule()
    t = 300
    rng = keyed_rng(0, 1)
    with gc.precision("float64"):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        eps = rng.standard_normal(4)
        z = add_noise(s, x, t, eps)
        residual = gc.detach(gc.square(z) - Tensor(eps))
        backward(gc.reduce_sum(residual * z))
    expected = s.alphas[t] * (np.square(z.data) - eps)
    np.testing.assert_allclose(x.grad, expected, rtol=1e-12)


def test_backward_is_linear_in_the_root():
    rng = keyed_rng(0, 2)
    theta = rng.standard_normal((3, 2))
    with gc.precision("float64"):

        def grad_of(build):
            leaf = Tensor(theta, requires_grad=True)
            backward(build(leaf))
            return leaf.grad

        f = lambda p: gc.reduce_sum(gc.tanh(p))
        g = lambda p: gc.reduce_sum(gc.exp(p) * p)
        combined = grad_of(lambda p: gc.scale(f(p), 2.5) + gc.scale(g(p), -0.5))
        np.testing.assert_allclose(combined, 2.5 * grad_of(f) - 0.5 * grad_of(g), rtol=1e-12)


def test_repeated_backward_is_bit_identical():
    rng = keyed_rng(3, 0)
    theta = rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 2))

    def run():
        leaf = Tensor(theta, requires_grad=True)
        backward(gc.mse(gc.silu(leaf @ Tensor(w)), Tensor(np.zeros((4, 2)))))
        return leaf.grad

    assert np.array_equal(run(), run())


def test_tape_is_topological_and_visits_nodes_once():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    root = gc.reduce_sum(y + y * x)
    tape = Tape.from_root(root)
    nodes = list(tape)
    assert len({id(n) for n in nodes}) == len(nodes)
    position = {id(n): i for i, n in enumerate(nodes)}
    for node in nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert position[id(parent)] < position[id(node)]
    assert nodes[-1] is root


def test_edges_are_fixed_when_an_op_is_recorded():
    w = Tensor([2.0], requires_grad=True)
    x = Tensor([3.0], requires_grad=True)
    w.requires_grad = False
    y = gc.reduce_sum(w * x)
    w.requires_grad = True
    backward(y)
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, [2.0])


def test_precision_context_restores_default():
    assert gc.get_default_dtype() == np.float32
    with gc.precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
    with pytest.raises(ValueError):
        gc.set_default_dtype("float16")


_CONST = keyed_rng(7, 0).standard_normal((4, 2))

PRIMITIVES = {
    "exp": lambda t: gc.reduce_sum(gc.exp(t)),
    "tanh": lambda t: gc.reduce_sum(gc.tanh(t)),
    "sigmoid": lambda t: gc.reduce_sum(gc.sigmoid(t)),
    "silu": lambda t: gc.reduce_sum(gc.silu(t)),
    "cos_sin": lambda t: gc.reduce_sum(gc.cos(t) * gc.sin(t)),
    "div": lambda t: gc.reduce_sum(gc.div(t, gc.add(gc.square(t), 1.0))),
    "matmul": lambda t: gc.reduce_sum(gc.square(t @ Tensor(_CONST))),
    "getitem": lambda t: gc.reduce_sum(gc.square(t[:, 1])),
    "take_rows": lambda t: gc.reduce_sum(gc.square(gc.take_rows(t, [0, 2, 2]))),
    "broadcast": lambda t: gc.reduce_sum(gc.square(gc.broadcast_to(t.reshape(1, 3, 4), (2, 3, 4)))),
    "concat": lambda t: gc.reduce_sum(gc.square(gc.concat([t, gc.scale(t, 2.0)], axis=0))),
    "mean_axis": lambda t: gc.reduce_sum(gc.square(gc.reduce_mean(t, axis=1))),
    "mse": lambda t: gc.mse(t, Tensor(np.ones((3, 4)))),
    "bias_broadcast": lambda t: gc.reduce_sum(gc.square(t - t[0].reshape(1, 4) * 0.5)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_matches_central_differences(name):
    theta = keyed_rng(11, 0).standard_normal((3, 4))
    with gc.precision("float64"):
        err = finite_diff_check(PRIMITIVES[name], theta)
    assert err < 1e-4, f"{name}: relative error {err:.3e}"
