import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pcql.nn import (
    Adam,
    AdamState,
    ChecksumError,
    Mlp,
    NonFiniteError,
    ShapeError,
    Tensor,
    adam_step,
    check_gradients,
    concat,
    load_arrays,
    load_mlp,
    log_softmax,
    logsumexp,
    minimum,
    parameter,
    save_arrays,
    save_mlp,
    soft_update,
    softmax,
    softmax_np,
    softmax_xent,
)


def test_forward_examples():
    net = Mlp([1, 1])
    net.load_values([np.array([[2.0]]), np.array([1.0])])
    assert net.predict(np.array([[3.0]]))[0, 0] == 7.0
    assert net(np.array([[3.0]])).item() == 7.0
    z = Mlp([4, 3, 2])
    z.load_values([np.zeros_like(p.data) for p in z.params])
    np.testing.assert_array_equal(z.predict(np.ones((5, 4))), np.zeros((5, 2)))
    with pytest.raises(ShapeError):
        z.predict(np.ones((5, 3)))


def test_init_bounds_and_determinism():
    a, b = Mlp([10, 6, 1], rng=np.random.default_rng(1)), Mlp([10, 6, 1], rng=np.random.default_rng(1))
    w = a.params[0].data
    assert np.all(np.abs(w) <= math.sqrt(6 / 16)) and np.all(a.params[1].data == 0)
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p.data, q.data)


def test_backward_examples():
    x = parameter(np.random.default_rng(0).normal(size=(3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    y = parameter(3.0)
    (y * y).backward()
    assert y.grad == 6.0
    z = parameter(np.zeros(2))
    logsumexp(z).backward()
    np.testing.assert_allclose(z.grad, [0.5, 0.5], atol=1e-15)


def test_backward_contract_errors():
    x = parameter(np.ones(3))
    with pytest.raises(ShapeError):
        (x * 2).backward()
    with pytest.raises(Exception):
        Tensor(1.0).backward()
    with pytest.raises(NonFiniteError):
        parameter(np.array([-1.0])).log()


def test_logsumexp_examples():
    assert logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-15)
    assert logsumexp(Tensor([1000.0, 1000.0])).item() == pytest.approx(1000 + math.log(2), abs=1e-12)
    assert logsumexp(Tensor([0.0, math.log(3)])).item() == pytest.approx(math.log(4), abs=1e-15)


@given(st.floats(-50, 50), st.integers(1, 20))
def test_logsumexp_constant(c, n):
    assert logsumexp(Tensor(np.full(n, c))).item() == pytest.approx(c + math.log(n), abs=1e-12)


def test_softmax_xent_examples():
    assert softmax_xent(Tensor([[0.0, 0.0]]), Tensor([[0.0, 0.0]]), 1.0).item() == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        softmax_xent(Tensor([[0.0]]), Tensor([[0.0]]), 0.0)


@given(arrays(np.float64, (3, 5), elements=st.floats(-5, 5)), arrays(np.float64, (3, 5), elements=st.floats(-5, 5)), st.floats(0.1, 4))
def test_softmax_xent_properties(p, q, tau):
    h_pq = softmax_xent(Tensor(p), Tensor(q), tau).item()
    h_pp = softmax_xent(Tensor(p), Tensor(p), tau).item()
    probs = softmax_np(p / tau)
    entropy = float(np.mean(-(probs * np.log(probs)).sum(axis=1)))
    assert h_pp == pytest.approx(entropy, abs=1e-10)
    assert h_pq >= h_pp - 1e-10
    assert softmax_xent(Tensor(p + 3.0), Tensor(q - 2.0), tau).item() == pytest.approx(h_pq, abs=1e-10)


@given(arrays(np.float64, (4, 6), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(softmax(Tensor(x)).data.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(Tensor(x)).data).sum(axis=1), 1.0, atol=1e-12)


PRIMITIVES = {
    "add_mul": lambda a, b: ((a + b) * a).sum(),
    "sub_div": lambda a, b: ((a - b) / (b * b + 1.0)).sum(),
    "pow": lambda a, b: (a**3).mean() + (b**2).sum(),
    "matmul": lambda a, b: (a @ b.reshape(4, 3)).sum(),
    "getitem": lambda a, b: a[1:, ::2].sum() * b[0, 0],
    "relu_sigmoid": lambda a, b: (a.relu() + b.sigmoid()).sum(),
    "exp_log": lambda a, b: (a.exp() + (b.square() + 1.0).log()).sum(),
    "norm": lambda a, b: (a - b).norm(axis=1).mean(),
    "concat": lambda a, b: (concat([a, b], axis=1) ** 2).sum(),
    "minimum": lambda a, b: minimum(a, b).sum(),
    "logsumexp": lambda a, b: logsumexp(a * b, axis=1).sum(),
    "softmax": lambda a, b: (softmax(a) * b).sum(),
    "log_softmax": lambda a, b: (log_softmax(a) * b).sum(),
    "xent": lambda a, b: softmax_xent(a, b, 0.7),
    "mean_axis": lambda a, b: (a.mean(axis=0, keepdims=True) * b).sum(),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(3, 4)))
    fn = PRIMITIVES[name]
    assert check_gradients(lambda: fn(a, b), [a, b]) < 1e-6


def test_mlp_gradient():
    rng = np.random.default_rng(5)
    net = Mlp([5, 7, 6, 2], output="sigmoid", rng=rng)
    x = rng.normal(size=(8, 5))
    y = rng.normal(size=(8, 2))
    assert check_gradients(lambda: ((net(x) - y).square()).mean(), net.params) < 1e-6


def test_adam_examples():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.zeros_like(p, learning_rate=0.1)
    new, _ = adam_step(p, [np.zeros(2)], st_)
    np.testing.assert_array_equal(new[0], p[0])
    st_ = AdamState.zeros_like(p, learning_rate=0.01)
    cur = p
    for _ in range(200):
        prev = cur
        cur, _ = adam_step(cur, [np.array([3.0, -0.5])], st_)
    np.testing.assert_allclose(np.abs(cur[0] - prev[0]), 0.01, rtol=1e-6)
    with pytest.raises(NonFiniteError):
        adam_step(p, [np.array([np.nan, 0.0])], AdamState.zeros_like(p))


def test_adam_groups_are_independent():
    a, b = parameter(np.zeros(1)), parameter(np.zeros(1))
    opt = Adam([{"params": [a], "lr": 0.1}, {"params": [b], "lr": 0.001}])
    a.grad, b.grad = np.ones(1), np.ones(1)
    opt.step()
    assert a.data[0] == pytest.approx(-0.1) and b.data[0] == pytest.approx(-0.001)
    assert [s.step for s in opt.states] == [1, 1]


def test_soft_update_exact():
    src, tgt = Mlp([3, 2], rng=np.random.default_rng(0)), Mlp([3, 2], rng=np.random.default_rng(1))
    old = [p.data.copy() for p in tgt.params]
    soft_update(tgt, src, 0.25)
    for t, o, s in zip(tgt.params, old, src.params):
        np.testing.assert_array_equal(t.data, 0.75 * o + 0.25 * s.data)


def test_checkpoint_roundtrip_and_checksum(tmp_path):
    net = Mlp([4, 8, 1], output="sigmoid", rng=np.random.default_rng(2))
    path = tmp_path / "net.ckpt"
    save_mlp(path, net)
    back = load_mlp(path)
    assert back.widths == net.widths and back.output == net.output
    for p, q in zip(net.params, back.params):
        assert p.data.tobytes() == q.data.tobytes()
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_mlp(path)


def test_save_arrays_is_deterministic(tmp_path):
    arrs = {"x": np.arange(6.0).reshape(2, 3), "y": np.array([np.pi])}
    save_arrays(tmp_path / "a", {"k": 1}, arrs)
    save_arrays(tmp_path / "b", {"k": 1}, arrs)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    header, back = load_arrays(tmp_path / "a")
    assert header["k"] == 1
    np.testing.assert_array_equal(back["x"], arrs["x"])


def test_flags_frozen_at_graph_construction_hold_during_backward():
    w = parameter(np.array([2.0]))
    x = parameter(np.array([3.0]))
    w.requires_grad = False
    y = (w * x).sum()
    w.requires_grad = True
    y.backward()
    assert w.grad is None and x.grad[0] == 2.0
