import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqbattnet.diffcore import nn
from seqbattnet.diffcore import tensor as T
from seqbattnet.diffcore.gradcheck import check_gradients
from seqbattnet.diffcore.tensor import Tape, Tensor, backward



def param(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# -- forward values ----------------------------------------------------------


def test_affine_values():
    assert np.allclose(T.affine([1.0, 2.0], [[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0]).data, [1, 2])
    assert T.affine([1.0, 1.0], [[2.0, 3.0]], [-1.0]).data.tolist() == [4.0]
    W = np.random.default_rng(0).normal(size=(2, 2))
    assert T.affine([0.0, 0.0], W, [0.5, 0.5]).data.tolist() == [0.5, 0.5]


def test_affine_shape_error():
    with pytest.raises(T.ShapeError):
        T.affine([1.0, 2.0, 3.0], np.eye(2), np.zeros(2))
    with pytest.raises(T.ShapeError):
        T.affine([1.0, 2.0], np.eye(2), np.zeros(3))


def test_activation_values():
    assert nn.activation("sigmoid", Tensor(0.0)).item() == 0.5
    assert nn.activation("tanh", Tensor(0.0)).item() == 0.0
    assert nn.activation("silu", Tensor(1.0)).item() == pytest.approx(1.0 / (1.0 + math.exp(-1.0)), abs=1e-15)
    assert nn.activation("exp", Tensor(0.0)).item() == 1.0
    with pytest.raises(nn.ConfigError):
        nn.activation("relu", Tensor(0.0))


def test_softmax_values():
    assert np.allclose(T.softmax(Tensor([3.3, 3.3])).data, [0.5, 0.5], atol=1e-15)
    assert np.allclose(T.softmax(Tensor([math.log(1), math.log(3)])).data, [0.25, 0.75], atol=1e-15)
    assert T.softmax(Tensor([7.0])).data.tolist() == [1.0]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)), st.floats(-50, 50))
def test_softmax_sums_to_one_and_shift_invariant(x, c):
    s = T.softmax(Tensor(x)).data
    assert np.all(s >= 0)
    assert abs(s.sum() - 1.0) <= 1e-12
    assert np.max(np.abs(T.softmax(Tensor(x + c)).data - s)) <= 1e-12


def test_layer_norm_values():
    one, zero = np.ones(4), np.zeros(4)
    assert np.all(nn.layer_norm(Tensor(np.full(4, 2.5)), one, zero).data == 0.0)
    assert np.allclose(nn.layer_norm(Tensor([-1.0, 1.0]), np.ones(2), np.zeros(2), eps=0.0).data, [-1, 1])
    beta = np.array([0.1, -0.2, 0.3, 0.4])
    out = nn.layer_norm(Tensor([1.0, 5.0, -2.0, 0.3]), zero, beta).data
    assert np.array_equal(out, beta)


def test_dropout_modes():
    x = Tensor(np.arange(6.0))
    rng = nn.make_rng(0)
    assert nn.dropout(x, 0.0, True, rng) is x
    assert nn.dropout(x, 0.5, False, rng) is x
    with pytest.raises(nn.ConfigError):
        nn.dropout(x, 1.0, True, rng)


def test_dropout_inverted_scaling_monte_carlo():
    out = nn.dropout(Tensor(np.ones(100_000)), 0.5, True, nn.make_rng(123)).data
    assert abs(out.mean() - 1.0) < 0.02
    assert set(np.unique(out)) <= {0.0, 2.0}


def _gru_params(d, m, value=0.0):
    p = nn.GruParams.init(d, m, nn.make_rng(0))
    for t in vars(p).values():
        t.data = np.full_like(t.data, value)
    return p


def test_gru_zero_params():
    p = _gru_params(3, 2)
    h = nn.gru_cell(Tensor(np.ones(3)), Tensor([1.0, 1.0]), p)
    assert np.allclose(h.data, [0.5, 0.5], atol=1e-15)


def test_gru_saturated_update_gate():
    p = _gru_params(3, 2)
    p.bz.data[:] = 50.0
    h = nn.gru_cell(Tensor([0.3, -0.2, 0.9]), Tensor([0.7, -0.4]), p)
    assert np.allclose(h.data, 0.0, atol=1e-15)
    p.bz.data[:] = -50.0
    p.Wh.data[:] = 1.0
    h_prev = np.array([0.7, -0.4])
    h = nn.gru_cell(Tensor([0.3, -0.2, 0.9]), Tensor(h_prev), p)
    assert np.allclose(h.data, h_prev, atol=1e-15)


def test_gru_shape_error():
    p = _gru_params(3, 2)
    with pytest.raises(T.ShapeError):
        nn.gru_cell(Tensor(np.ones(4)), Tensor(np.ones(2)), p)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_gru_output_stays_in_unit_box(seed):
    rng = np.random.default_rng(seed)
    p = nn.GruParams.init(4, 5, nn.make_rng(seed))
    for t in vars(p).values():
        t.data = rng.normal(size=t.shape)
    h = nn.gru_cell(Tensor(rng.normal(size=4)), Tensor(rng.uniform(-1, 1, 5)), p).data
    assert np.all(np.abs(h) < 1.0)


def test_fnn_shapes_and_range():
    rng = nn.make_rng(0)
    g = nn.ocv_network(rng)
    f = nn.resistance_network(rng)
    for W, b, _ in g.layers:
        W.data[:] = 0.0
        b.data[:] = 0.0
    assert nn.fnn_forward(g, Tensor([[0.37]])).data.tolist() == [[0.5]]
    out = nn.fnn_forward(f, Tensor(np.random.default_rng(1).uniform(size=(10, 2)))).data
    assert out.shape == (10, 2)
    assert np.all((out > 0) & (out < 1))
    assert [W.shape for W, _, _ in g.layers] == [(32, 1), (32, 32), (1, 32)]
    assert [a for _, _, a in g.layers] == ["silu", "silu", "sigmoid"]
    assert [W.shape for W, _, _ in f.layers] == [(32, 2), (2, 32)]
    with pytest.raises(T.ShapeError):
        nn.fnn_forward(f, Tensor(np.ones((1, 3))))


# -- gradients ---------------------------------------------------------------


def test_backward_square():
    x = param(3.0)
    with Tape() as tape:
        y = x * x
    assert backward(tape, y)[x] == pytest.approx(6.0)


def test_backward_requires_scalar():
    x = param([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        backward(tape, y)


def test_softmax_sum_has_zero_gradient():
    x = param([0.3, -1.2, 2.0])
    with Tape() as tape:
        y = T.tsum(T.softmax(x))
    assert np.allclose(backward(tape, y)[x], 0.0, atol=1e-15)


def test_clip_gradient_convention():
    x = param([-0.5, 0.0, 0.5, 1.0, 1.5])
    with Tape() as tape:
        y = T.tsum(T.clip(x, 0.0, 1.0))
    assert backward(tape, y)[x].tolist() == [0.0, 1.0, 1.0, 1.0, 0.0]


def test_no_grad_records_nothing():
    x = param([1.0])
    with Tape() as tape:
        with T.no_grad():
            x * 3.0
    assert len(tape) == 0


def test_gru_gradients_against_finite_differences():
    rng = np.random.default_rng(5)
    p = nn.GruParams.init(3, 4, nn.make_rng(5))
    x = param(rng.normal(size=(2, 3)))
    h = param(rng.uniform(-1, 1, size=(2, 4)))
    tensors = [x, h] + list(vars(p).values())
    worst, _ = check_gradients(lambda: T.tsum(nn.gru_cell(x, h, p)), tensors)
    assert worst < 1e-4


def _ops(rng):
    """(name, builder) pairs: builder returns (fn, tensors)."""
    def affine():
        x, W, b = param(rng.normal(size=(3, 4))), param(rng.normal(size=(2, 4))), param(rng.normal(size=2))
        return lambda: T.tsum(T.affine(x, W, b) ** 2), [x, W, b]

    def act(kind):
        def build():
            x = param(rng.normal(size=5))
            c = rng.normal(size=5)
            return lambda: T.tsum(nn.activation(kind, x) * c), [x]
        return build

    def softmax():
        x = param(rng.normal(size=(2, 4)))
        c = rng.normal(size=(2, 4))
        return lambda: T.tsum(T.softmax(x) * c), [x]

    def layer_norm():
        x, gm, bt = param(rng.normal(size=(3, 5))), param(rng.normal(size=5)), param(rng.normal(size=5))
        c = rng.normal(size=(3, 5))
        return lambda: T.tsum(nn.layer_norm(x, gm, bt) * c), [x, gm, bt]

    def dropout():
        x = param(rng.normal(size=6))
        c = rng.normal(size=6)
        seed = int(rng.integers(1 << 30))
        return lambda: T.tsum(nn.dropout(x, 0.3, True, nn.make_rng(seed)) * c), [x]

    def fnn():
        p = nn.resistance_network(nn.make_rng(int(rng.integers(1 << 30))))
        x = param(rng.uniform(size=(3, 2)))
        c = rng.normal(size=(3, 2))
        return lambda: T.tsum(nn.fnn_forward(p, x) * c), [x] + list(p.named("f").values())

    def division():
        a, b = param(rng.normal(size=3)), param(rng.uniform(1, 2, size=3))
        return lambda: T.tsum(a / b), [a, b]

    return [("affine", affine), ("sigmoid", act("sigmoid")), ("tanh", act("tanh")),
            ("silu", act("silu")), ("exp", act("exp")), ("softmax", softmax),
            ("layer_norm", layer_norm), ("dropout", dropout), ("fnn", fnn), ("div", division)]


@pytest.mark.parametrize("seed", range(100))
def test_op_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, build in _ops(rng):
        fn, tensors = build()
        worst, _ = check_gradients(fn, tensors)
        assert worst < 1e-4, name


def test_broadcast_gradient_reduces_to_parameter_shape():
    b = param([1.0, 2.0])
    x = param(np.ones((3, 2)))
    with Tape() as tape:
        y = T.tsum((x + b) * (x * b))
    g = backward(tape, y)
    assert g[b].shape == (2,)
    assert g[x].shape == (3, 2)


def test_tapes_are_thread_local():
    import threading

    x = param(2.0)
    results = []

    def work():
        with Tape() as tape:
            y = x * x * x
        results.append(backward(tape, y)[x])

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == [12.0] * 4
