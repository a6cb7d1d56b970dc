import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ghostnet import autodiff as ad
from ghostnet.autodiff import Tensor

from conftest import central_diff, rel_err


def test_relu_values_and_zero_subgradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = ad.relu(x)
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    ad.backward(ad.total(y))
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_scale_by_one_is_bit_identical():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    assert np.array_equal(ad.scale(x, 1.0).data, x.data)


def test_conv2d_all_ones():
    # direct sum: interior pixel sees 9 ones, a corner sees 4
    x = Tensor(np.ones((1, 1, 4, 4)))
    w = Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w).data[0, 0]
    assert out[1, 1] == 9.0 and out[2, 2] == 9.0
    assert out[0, 0] == 4.0 and out[3, 3] == 4.0 and out[0, 3] == 4.0
    assert out[0, 1] == 6.0


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 5, 6))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 5, 6))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(6):
                    ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.allclose(got, ref, atol=1e-12)


def test_sum_of_squares_gradient():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ad.backward(ad.total(ad.mul(x, x)))
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_softmax_cross_entropy_gradient():
    z = Tensor([[0.0, 0.0]], requires_grad=True)
    ad.backward(ad.cross_entropy(z, [0]))
    assert np.allclose(z.grad, [[-0.5, 0.5]], atol=1e-15)
    fd = central_diff(lambda a: float(ad.cross_entropy(Tensor(a), [0]).data), z.data.copy(), [0, 1])
    assert rel_err(z.grad.reshape(-1), fd).max() < 1e-6


def test_cross_entropy_uniform_logits_is_log_class_count():
    z = Tensor(np.zeros((4, 7)))
    assert abs(float(ad.cross_entropy(z, [0, 1, 2, 6]).data) - np.log(7)) < 1e-15


def _prim_cases(rng):
    """(name, function of a list of input arrays, inputs) for each differentiable primitive."""
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 5))
    img = rng.normal(size=(2, 2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    kb = rng.normal(size=3)
    m = (rng.random(4) < 0.5) * 2.0
    return [
        ("matmul", lambda t: ad.matmul(t[0], t[1]), [a, b]),
        ("add-batch", lambda t: ad.add(t[0], t[1]), [a, rng.normal(size=4)]),
        ("multiply", lambda t: ad.mul(t[0], t[1]), [a, rng.normal(size=(3, 4))]),
        ("multiply-batch", lambda t: ad.mul(t[0], t[1]), [a, rng.normal(size=4)]),
        ("scale", lambda t: ad.scale(t[0], -1.7), [a]),
        ("relu", lambda t: ad.relu(t[0]), [a]),
        ("mask_mul", lambda t: ad.mask_mul(t[0], m), [a]),
        ("conv2d", lambda t: ad.conv2d(t[0], t[1], t[2]), [img, k, kb]),
        ("avgpool2d", lambda t: ad.avgpool2d(t[0]), [img]),
        ("flatten", lambda t: ad.flatten(t[0]), [img]),
        ("softmax", lambda t: ad.softmax(t[0]), [a]),
    ]


@pytest.mark.parametrize("case", range(11))
def test_primitive_gradients_match_finite_differences(case):
    rng = np.random.default_rng(case)
    name, fn, inputs = _prim_cases(rng)[case]
    # project each output onto a fixed random direction to get a scalar
    probe = None

    def scalar(arrays):
        nonlocal probe
        out = fn([Tensor(x) for x in arrays]).data
        if probe is None:
            probe = np.random.default_rng(99).normal(size=out.shape)
        return float((out * probe).sum())

    scalar(inputs)
    ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    ad.backward(ad.total(ad.mul(fn(ts), Tensor(probe))))
    for i, t in enumerate(ts):
        coords = rng.choice(t.data.size, size=min(20, t.data.size), replace=False)

        def f(x, i=i):
            arrs = list(inputs)
            arrs[i] = x
            return scalar(arrs)

        fd = central_diff(f, inputs[i].copy(), coords)
        an = t.grad.reshape(-1)[coords]
        assert rel_err(an, fd).max() < 1e-4, name


def test_fan_out_gradients_are_summed():
    x = Tensor([1.5, -2.0], requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))  # x reaches the loss three times
    ad.backward(ad.total(y))
    assert np.allclose(x.grad, 2 * x.data + 3.0)


def test_backward_accumulates_until_reset():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.backward(ad.total(ad.scale(x, 2.0)))
    ad.backward(ad.total(ad.scale(x, 2.0)))
    assert x.grad.tolist() == [4.0, 4.0]
    ad.zero_grad([x])
    assert x.grad is None


def test_no_grad_inputs_never_accumulate():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    ad.backward(ad.total(ad.mul(x, c)))
    assert c.grad is None
    assert x.grad.tolist() == [3.0, 4.0]


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.scale(x, 2.0))


def test_shape_errors_name_the_primitive():
    with pytest.raises(ad.ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    # broadcasting is limited to the leading batch axis
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_forward_primitive_dispatch():
    out = ad.forward_primitive("relu", [Tensor([-1.0, 0.0, 2.0])])
    assert out.data.tolist() == [0.0, 0.0, 2.0]
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.forward_primitive("tanh", [Tensor([0.0])])


def test_tape_visits_in_reverse_construction_order():
    x = Tensor([1.0], requires_grad=True)
    a = ad.scale(x, 2.0)
    b = ad.relu(a)
    c = ad.add(a, b)
    tape = ad.Tape(ad.total(c))
    seqs = [t._node.seq for t in tape.entries]
    assert seqs == sorted(seqs) and len(set(seqs)) == len(tape) == 4


def test_gradients_are_deterministic():
    rng = np.random.default_rng(5)
    xs, w = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))

    def run():
        x = Tensor(xs, requires_grad=True)
        ad.backward(ad.cross_entropy(ad.relu(ad.matmul(x, Tensor(w))), [0, 1, 2, 0]))
        return x.grad

    assert np.array_equal(run(), run())


@settings(max_examples=50, deadline=None)
@given(
    x=arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
    a=st.floats(-2, 2),
    b=st.floats(-2, 2),
)
def test_backward_is_linear(x, a, b):
    w = np.linspace(-1, 1, 12).reshape(4, 3)

    def f(t):
        return ad.total(ad.relu(ad.matmul(t, Tensor(w))))

    def g(t):
        return ad.total(ad.mul(t, t))

    t1 = Tensor(x, requires_grad=True)
    ad.backward(ad.add(ad.scale(f(t1), a), ad.scale(g(t1), b)))
    tf = Tensor(x, requires_grad=True)
    ad.backward(f(tf))
    tg = Tensor(x, requires_grad=True)
    ad.backward(g(tg))
    assert np.allclose(t1.grad, a * tf.grad + b * tg.grad, rtol=0, atol=1e-12)
