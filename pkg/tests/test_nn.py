import threading

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from forgeaug import nn
from conftest import fd_check


def conv_oracle(x, w, b, stride, padding):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
        xp = np.zeros((n, h + kh - 1, wd + kw - 1, cin))
        xp[:, ph:ph + h, pw:pw + wd] = x
        oh, ow = -(-h // stride), -(-wd // stride)
    else:
        xp = x
        oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    out = np.zeros((n, oh, ow, cout))
    for a in range(n):
        for i in range(oh):
            for j in range(ow):
                for o in range(cout):
                    acc = b[o]
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(cin):
                                acc += xp[a, i * stride + di, j * stride + dj, c] * w[di, dj, c, o]
                    out[a, i, j, o] = acc
    return out


# --------------------------------------------------------------------- conv

def test_conv_identity_kernel(rng):
    x = rng.normal(size=(2, 5, 5, 3))
    w = np.eye(3).reshape(1, 1, 3, 3)
    out = nn.conv2d(x, w, np.zeros(3))
    assert np.array_equal(out.data, x)


def test_conv_zero_weights_give_bias(rng):
    x = rng.normal(size=(1, 6, 6, 2))
    out = nn.conv2d(x, np.zeros((3, 3, 2, 4)), np.array([1.0, -2.0, 0.5, 3.0]))
    assert np.all(out.data == np.array([1.0, -2.0, 0.5, 3.0]))


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_matches_nested_loops(rng, stride, padding):
    x = rng.normal(size=(2, 6, 6, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    b = rng.normal(size=3)
    out = nn.conv2d(x, w, b, stride=stride, padding=padding)
    ref = conv_oracle(x, w, b, stride, padding)
    assert out.shape == ref.shape
    assert np.max(np.abs(out.data - ref)) < 1e-10


def test_conv_output_size_rule():
    assert nn.conv_output_size(64, 3, 2, "same") == 32
    assert nn.conv_output_size(6, 3, 1, "valid") == 4
    x = np.zeros((1, 64, 64, 3))
    assert nn.conv2d(x, np.zeros((3, 3, 3, 8)), stride=2).shape == (1, 32, 32, 8)


def test_conv_shape_error_names_both_shapes():
    with pytest.raises(nn.ShapeError) as exc:
        nn.conv2d(np.zeros((1, 4, 4, 3)), np.zeros((3, 3, 2, 5)))
    msg = str(exc.value)
    assert "(1, 4, 4, 3)" in msg and "(3, 3, 2, 5)" in msg


def test_matmul_shape_error():
    with pytest.raises(nn.ShapeError):
        nn.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


# ----------------------------------------------------------------- backward

def test_backward_sum_gives_ones():
    ps = nn.ParamStore()
    w = ps.add("w", np.arange(6.0).reshape(2, 3))
    nn.backward(nn.tsum(w), ps)
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_backward_zero_times_f_gives_zeros():
    ps = nn.ParamStore()
    w = ps.add("w", np.array([0.3, -1.2, 2.0]))
    nn.backward(nn.tsum(nn.sigmoid(w) * nn.exp(w)) * 0.0, ps)
    assert np.array_equal(w.grad, np.zeros(3))


def test_backward_unreachable_param_gets_zero():
    ps = nn.ParamStore()
    a = ps.add("a", np.ones(2))
    b = ps.add("b", np.ones(3))
    nn.backward(nn.tsum(nn.square(a)), ps)
    assert np.array_equal(a.grad, 2 * np.ones(2))
    assert np.array_equal(b.grad, np.zeros(3))


def test_backward_without_forward_raises():
    ps = nn.ParamStore()
    ps.add("w", np.ones(1))
    with pytest.raises(RuntimeError, match="forward"):
        nn.backward(nn.Tensor(np.array(1.0)), ps)


def test_backward_non_scalar_raises():
    ps = nn.ParamStore()
    w = ps.add("w", np.ones(3))
    with pytest.raises(nn.ShapeError):
        nn.backward(w * 2.0, ps)


def test_backward_overwrites_previous_gradient():
    ps = nn.ParamStore()
    w = ps.add("w", np.array([1.0, 2.0]))
    nn.backward(nn.tsum(w * 3.0), ps)
    nn.backward(nn.tsum(w), ps)
    assert np.array_equal(w.grad, np.ones(2))


def _op_loss(op, rng):
    """A scalar loss through ``op`` with random projection, plus its parameter store."""
    ps = nn.ParamStore()
    if op == "conv":
        x = ps.add("x", rng.normal(size=(2, 5, 5, 2)))
        w = ps.add("w", rng.normal(size=(3, 3, 2, 3)))
        b = ps.add("b", rng.normal(size=3))
        stride = int(rng.integers(1, 3))
        proj = rng.normal(size=nn.conv2d(x.data, w.data, b.data, stride=stride).shape)
        return ps, lambda: nn.tsum(nn.conv2d(x, w, b, stride=stride) * proj)
    if op == "linear":
        x = ps.add("x", rng.normal(size=(3, 4)))
        w = ps.add("w", rng.normal(size=(4, 5)))
        b = ps.add("b", rng.normal(size=5))
        proj = rng.normal(size=(3, 5))
        return ps, lambda: nn.tsum(nn.linear(x, w, b) * proj)
    x = ps.add("x", rng.normal(size=(3, 4)))
    proj = rng.normal(size=(3, 4))
    unary = {
        "sigmoid": nn.sigmoid, "silu": nn.silu, "softplus": nn.softplus, "erf": nn.erf, "exp": nn.exp,
        "square": nn.square, "log_softmax": nn.log_softmax,
        "l2_normalize": lambda t: nn.l2_normalize(t, axis=-1),
        "log": lambda t: nn.log(nn.square(t) + 0.5), "sqrt": lambda t: nn.sqrt(nn.square(t) + 0.5),
        "div": lambda t: t / (nn.square(t) + 1.0),
        "tabs": nn.tabs,
    }
    if op == "gap":
        x4 = ps.add("x4", rng.normal(size=(2, 3, 3, 4)))
        del ps["x"]
        p2 = rng.normal(size=(2, 4))
        return ps, lambda: nn.tsum(nn.global_avg_pool(x4) * p2)
    if op == "tabs":
        x.data = np.sign(x.data) * (np.abs(x.data) + 0.1)  # keep away from the kink
    return ps, lambda: nn.tsum(unary[op](x) * proj)


OPS = ["conv", "linear", "sigmoid", "silu", "softplus", "erf", "exp", "square", "log_softmax",
       "l2_normalize", "log", "sqrt", "div", "tabs", "gap"]


@pytest.mark.parametrize("op", OPS)
def test_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(sum(map(ord, op)))
    for _ in range(20):
        ps, loss = _op_loss(op, rng)
        nn.backward(loss(), ps)
        err = fd_check(lambda: float(loss().data), [p.data for p in ps.values()], [p.grad for p in ps.values()])
        assert err < 1e-4, op


def test_broadcast_and_getitem_gradients(rng):
    ps = nn.ParamStore()
    a = ps.add("a", rng.normal(size=(3, 1)))
    b = ps.add("b", rng.normal(size=(4,)))
    idx = np.array([0, 2, 2])

    def loss():
        return nn.tsum(nn.concat([(a * b - b)[idx], nn.reshape(a, (3, 1))[idx]], axis=-1) * 1.3)

    nn.backward(loss(), ps)
    assert fd_check(lambda: float(loss().data), [a.data, b.data], [a.grad, b.grad]) < 1e-4


def test_forward_is_deterministic(rng):
    bb = nn.ConvBackbone(3, (4, 8))
    ps = nn.ParamStore()
    bb.init(ps, "t", rng)
    x = rng.uniform(size=(2, 16, 16, 3))
    assert np.array_equal(bb(ps, "t", x).data, bb(ps, "t", x).data)


def test_threads_on_disjoint_stores(rng):
    x = rng.uniform(size=(2, 8, 8, 3))
    stores = []
    for seed in range(4):
        ps = nn.ParamStore()
        nn.ConvBackbone(3, (4, 4)).init(ps, "t", np.random.default_rng(seed))
        stores.append(ps)
    bb = nn.ConvBackbone(3, (4, 4))

    def grad_of(ps):
        nn.backward(nn.mean(bb(ps, "t", x)), ps)
        return ps.flat_grad()

    serial = [grad_of(ps) for ps in stores]
    results = [None] * 4

    def work(i):
        for _ in range(5):
            results[i] = grad_of(stores[i])

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for s, r in zip(serial, results):
        assert np.array_equal(s, r)


# --------------------------------------------------------------------- adam

def test_adam_zero_gradient_leaves_params():
    ps = nn.ParamStore()
    w = ps.add("w", np.array([1.0, -2.0]))
    w.grad = np.zeros(2)
    st_ = nn.OptimizerState(lr=0.1)
    nn.adam_step(ps, st_)
    assert np.array_equal(w.data, [1.0, -2.0])
    assert st_.step == 1


@pytest.mark.parametrize("sign", [-1, 1])
def test_adam_constant_gradient_direction(sign):
    ps = nn.ParamStore()
    w = ps.add("w", np.array(0.0))
    st_ = nn.OptimizerState(lr=0.01)
    prev = 0.0
    for _ in range(50):
        w.grad = np.array(2.5)
        nn.adam_step(ps, st_, sign=sign)
        assert (w.data - prev) * sign > 0
        prev = float(w.data)


def test_adam_matches_hand_formula():
    theta = np.array([0.5, -1.0, 2.0])
    grads = [np.array([0.1, -0.3, 0.02]), np.array([-0.2, 0.4, 0.0])]
    lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
    ps = nn.ParamStore()
    w = ps.add("w", theta)
    st_ = nn.OptimizerState(lr=lr)
    m = v = np.zeros(3)
    expect = theta.copy()
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        expect = expect - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        w.grad = g
        nn.adam_step(ps, st_, sign=-1)
        assert np.max(np.abs(w.data - expect)) < 1e-12


def test_adam_missing_gradient_raises():
    ps = nn.ParamStore()
    ps.add("w", np.ones(2))
    with pytest.raises(RuntimeError, match="no gradient"):
        nn.adam_step(ps, nn.OptimizerState(lr=0.1))


def test_adam_rejects_bad_sign():
    ps = nn.ParamStore()
    ps.add("w", np.ones(1)).grad = np.ones(1)
    with pytest.raises(ValueError):
        nn.adam_step(ps, nn.OptimizerState(lr=0.1), sign=0)


# ------------------------------------------------------------------ softmax

def test_softmax_uniform():
    assert np.allclose(nn.softmax(np.full(7, 3.3)), np.full(7, 1 / 7), atol=1e-15)


def test_softmax_closed_form():
    p = nn.softmax(np.array([0.0, np.log(3.0)]))
    assert np.allclose(p, [0.25, 0.75], atol=1e-15)


def test_softmax_matches_high_precision(rng):
    mpmath.mp.dps = 50
    for _ in range(20):
        z = rng.normal(scale=5.0, size=10)
        p = nn.softmax(z)
        ez = [mpmath.exp(mpmath.mpf(float(v))) for v in z]
        s = mpmath.fsum(ez)
        ref = np.array([float(e / s) for e in ez])
        assert np.max(np.abs(p - ref)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)),
              elements=st.floats(-1e4, 1e4, allow_nan=False)))
def test_softmax_rows_are_simplexes(z):
    p = nn.softmax(z)
    assert np.all(np.isfinite(p)) and np.all(p >= 0)
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) < 1e-9)
    assert np.all(np.isfinite(nn.log_softmax(z).data))


def test_l2_normalize_zero_norm_raises():
    with pytest.raises(ValueError):
        nn.l2_normalize(np.zeros((1, 3)))


# -------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, rng):
    ps = nn.ParamStore()
    ps.add("a", rng.normal(size=(2, 3)))
    ps.add("b", rng.normal(size=()))
    nn.save_params(tmp_path / "p.json", ps, {"kind": "x"})
    back, meta = nn.load_params(tmp_path / "p.json")
    assert meta == {"kind": "x"}
    assert list(back) == ["a", "b"]
    for name in ps:
        assert np.array_equal(back[name].data, ps[name].data)


def test_checkpoint_rejects_missing_magic(tmp_path):
    (tmp_path / "p.json").write_text('{"params": {}}')
    with pytest.raises(ValueError, match="magic"):
        nn.load_params(tmp_path / "p.json")


def test_param_store_rejects_duplicates():
    ps = nn.ParamStore()
    ps.add("w", np.ones(1))
    with pytest.raises(KeyError):
        ps.add("w", np.ones(1))


def test_set_flat_round_trip(rng):
    ps = nn.ParamStore()
    ps.add("a", rng.normal(size=(2, 2)))
    ps.add("b", rng.normal(size=3))
    v = rng.normal(size=7)
    ps.set_flat(v)
    assert np.array_equal(ps.flat(), v)
    with pytest.raises(nn.ShapeError):
        ps.set_flat(np.zeros(3))
