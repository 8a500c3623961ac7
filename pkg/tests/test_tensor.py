import numpy as np
import pytest

from conftest import numeric_grad, rel_err
from magn import tensor as T
from magn.tensor import GradTape, Tensor, backward


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def loop_conv(x, k, bias, pad, stride):
    H, W, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.zeros((H + 2 * pad, W + 2 * pad, cin))
    xp[pad : pad + H, pad : pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((Ho, Wo, cout))
    for i in range(Ho):
        for j in range(Wo):
            for o in range(cout):
                s = bias[o]
                for u in range(kh):
                    for v in range(kw):
                        for c in range(cin):
                            s += xp[i * stride + u, j * stride + v, c] * k[u, v, c, o]
                out[i, j, o] = s
    return out


def grad_of(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        loss = fn(*ts)
    g = backward(tape, loss)
    return [g[t] for t in ts]


# matmul -------------------------------------------------------------------------


def test_matmul_identity_and_hand_example(rng):
    b = rng.standard_normal((3, 3))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), Tensor(b)).data, b)
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    assert np.array_equal(out.data, [[2.0], [4.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    assert np.max(np.abs(T.matmul(Tensor(a), Tensor(b)).data - loop_matmul(a, b))) < 1e-12
    for _ in range(10):
        m, k, n = rng.integers(1, 9, size=3)
        a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
        assert np.max(np.abs((Tensor(a) @ Tensor(b)).data - loop_matmul(a, b))) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# conv2d -------------------------------------------------------------------------


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((5, 6, 1))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    assert np.array_equal(out.data, x)


def test_conv_table_shape():
    x = Tensor(np.zeros((13, 9, 3)))
    assert T.conv2d(x, Tensor(np.zeros((3, 3, 3, 64))), pad=1).shape == (13, 9, 64)


def test_conv_matches_nested_loops(rng):
    x, k, b = rng.standard_normal((5, 5, 2)), rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3)
    got = T.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    assert np.max(np.abs(got - loop_conv(x, k, b, 0, 1))) < 1e-12
    for _ in range(8):
        H, W = rng.integers(3, 9, size=2)
        cin, cout = rng.integers(1, 4, size=2)
        kk = int(rng.choice([1, 3]))
        pad, stride = int(rng.integers(0, 2)), int(rng.integers(1, 3))
        x, k, b = rng.standard_normal((H, W, cin)), rng.standard_normal((kk, kk, cin, cout)), rng.standard_normal(cout)
        got = T.conv2d(Tensor(x), Tensor(k), Tensor(b), pad=pad, stride=stride).data
        assert np.max(np.abs(got - loop_conv(x, k, b, pad, stride))) < 1e-12


def test_conv_batched_equals_per_image(rng):
    x, k = rng.standard_normal((3, 6, 6, 2)), rng.standard_normal((3, 3, 2, 4))
    batched = T.conv2d(Tensor(x), Tensor(k), pad=1).data
    for i in range(3):
        assert np.allclose(batched[i], T.conv2d(Tensor(x[i]), Tensor(k), pad=1).data, atol=1e-13)


def test_conv_rejects_bad_kernels():
    x = Tensor(np.zeros((5, 5, 2)))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.zeros((3, 3, 3, 1))))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.zeros((2, 2, 2, 1))))


# prelu / softmax / normalize ----------------------------------------------------


def test_prelu_examples(rng):
    assert np.array_equal(T.prelu(Tensor([2.0, -2.0]), Tensor([0.25])).data, [2.0, -0.5])
    x = rng.standard_normal((4, 4, 3))
    assert np.array_equal(T.prelu(Tensor(x), Tensor(np.ones(3))).data, x)
    assert np.array_equal(T.prelu(Tensor(x), Tensor(np.zeros(3))).data, np.maximum(0, x))


def test_softmax_examples(rng):
    assert np.allclose(T.softmax_rows(Tensor(np.zeros((1, 4)))).data, 0.25, atol=0, rtol=1e-15)
    s = T.softmax_rows(Tensor([[0.0, -1e6]])).data
    assert s[0, 0] == pytest.approx(1.0) and s[0, 1] < 1e-9
    m = rng.standard_normal((3, 3))
    e = np.exp(m)
    assert np.max(np.abs(T.softmax_rows(Tensor(m)).data - e / e.sum(1, keepdims=True))) < 1e-12


def test_softmax_rows_are_distributions(rng):
    for _ in range(20):
        m = rng.standard_normal((5, 7)) * rng.uniform(0.1, 50)
        s = T.softmax_rows(Tensor(m)).data
        assert np.all(np.abs(s.sum(1) - 1) < 1e-6) and s.min() >= 0 and s.max() <= 1


def test_feature_normalize_examples(rng):
    assert np.all(T.feature_normalize(Tensor(np.full((3, 3, 2), 7.0))).data == 0)
    # 0.1 is not exactly representable, so the centred values are round-off
    assert np.max(np.abs(T.feature_normalize(Tensor(np.full((3, 3, 2), 0.1))).data)) < 1e-9
    out = T.feature_normalize(Tensor(np.array([[[0.0], [2.0]]]))).data.ravel()
    # mean 1, variance 1: (x - 1) / sqrt(1 + eps)
    assert abs(out[0] + 1) < 1e-4 and abs(out[1] - 1) < 1e-4
    y = T.feature_normalize(Tensor(rng.standard_normal((9, 8, 4)) * 3 + 2)).data
    assert np.max(np.abs(y.mean(axis=(0, 1)))) < 1e-9
    assert np.max(np.abs(y.var(axis=(0, 1)) - 1)) < 1e-3


# backward -----------------------------------------------------------------------


def test_backward_linear_and_quadratic(rng):
    x = rng.standard_normal((2, 3, 4))
    (g,) = grad_of(T.tsum, x)
    assert np.array_equal(g, np.ones_like(x))
    (g,) = grad_of(lambda t: T.scale(T.tsum(T.square(t)), 0.5), x)
    assert np.allclose(g, x, atol=1e-15)


def test_every_tracked_input_gets_a_same_shaped_gradient(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ga, gb = grad_of(lambda x, y: T.tsum(T.matmul(x, y)), a, b)
    assert ga.shape == a.shape and gb.shape == b.shape


def test_untouched_input_has_zero_gradient(rng):
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    ga, gb = grad_of(lambda x, y: T.tsum(x), a, b)
    assert np.array_equal(gb, np.zeros(3))


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = T.tsum(x)
    with GradTape() as tape:
        pass
    assert len(tape) == 0 and y.item() == 3.0


def test_tensor_does_not_freeze_callers_array():
    a = np.zeros(3)
    t = Tensor(a)
    a[0] = 1.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 2.0


PRIMITIVES = {
    "add": (lambda a, b: T.tsum(T.mul(T.add(a, b), T.add(a, b))), [(3, 4), (4,)]),
    "sub": (lambda a, b: T.tsum(T.square(T.sub(a, b))), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: T.tsum(T.mul(T.mul(a, b), a)), [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: T.tsum(T.square(T.matmul(a, b))), [(2, 3, 4), (4, 5)]),
    "transpose": (lambda a: T.tsum(T.square(T.transpose(a, (1, 0, 2)))), [(2, 3, 2)]),
    "reshape": (lambda a: T.tsum(T.mul(T.reshape(a, (6, 2)), T.reshape(a, (6, 2)))), [(3, 4)]),
    "concat": (lambda a, b: T.tsum(T.square(T.concat([a, b], axis=-1))), [(3, 2), (3, 4)]),
    "mean": (lambda a: T.square(T.mean(T.mul(a, a))), [(3, 5)]),
    "conv2d": (lambda x, k, b: T.tsum(T.square(T.conv2d(x, k, b, pad=1))), [(5, 6, 2), (3, 3, 2, 3), (3,)]),
    "conv2d_stride": (lambda x, k: T.tsum(T.square(T.conv2d(x, k, stride=2))), [(2, 7, 7, 2), (3, 3, 2, 2)]),
    "prelu": (lambda x, s: T.tsum(T.square(T.prelu(x, s))), [(4, 4, 3), (3,)]),
    "softmax_rows": (lambda m, w: T.tsum(T.mul(T.softmax_rows(m), w)), [(4, 5), (4, 5)]),
    "feature_normalize": (lambda x, w: T.tsum(T.mul(T.feature_normalize(x), w)), [(2, 4, 5, 3), (2, 4, 5, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    arrays = [rng.standard_normal(s) for s in shapes]
    if name == "prelu":
        arrays[1] = rng.uniform(0.05, 0.5, shapes[1])
    analytic = grad_of(fn, *arrays)
    for i, a in enumerate(arrays):
        def f(v, i=i):
            args = [Tensor(v) if j == i else Tensor(arrays[j]) for j in range(len(arrays))]
            return fn(*args).item()
        assert rel_err(analytic[i], numeric_grad(f, a)) < 1e-4, f"{name} input {i}"


def test_determinism(rng):
    x, k = rng.standard_normal((2, 8, 8, 3)), rng.standard_normal((3, 3, 3, 4))
    a = T.feature_normalize(T.conv2d(Tensor(x), Tensor(k), pad=1)).data
    b = T.feature_normalize(T.conv2d(Tensor(x), Tensor(k), pad=1)).data
    assert np.array_equal(a, b)
