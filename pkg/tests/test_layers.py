import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lowdata import layers as L
from lowdata import tensor as T
from lowdata.layers import InitSpec
from lowdata.tensor import ShapeError, Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def test_linear_parameter_count():
    assert L.count_parameters(L.Linear(512, 64, rng())) == 32832


def test_linear_identity_and_sum():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    y = L.linear(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x.data)
    out = L.linear(Tensor([[1.0, 1.0]]), Tensor([[1.0], [1.0]]), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, [[2.0]])


def test_linear_shape_error():
    with pytest.raises(ShapeError, match="linear"):
        L.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


@pytest.mark.parametrize(
    "layer, expected",
    [
        (lambda: L.Linear(7, 3, rng()), 7 * 3 + 3),
        (lambda: L.Conv2d(3, 8, 3, rng()), 8 * 3 * 9 + 8),
        (lambda: L.Conv2d(3, 8, 3, rng(), bias=False), 8 * 3 * 9),
        (lambda: L.LayerNorm(10), 20),
        (lambda: L.BatchNorm2d(6), 12),
        (lambda: L.MaxPool2d(2), 0),
    ],
)
def test_closed_form_counts(layer, expected):
    assert L.count_parameters(layer()) == expected


def test_init_is_reproducible_and_seed_dependent():
    a = L.Linear(5, 4, InitSpec(seed=3).rng())
    b = L.Linear(5, 4, InitSpec(seed=3).rng())
    c = L.Linear(5, 4, InitSpec(seed=4).rng())
    assert a.weight.data.tobytes() == b.weight.data.tobytes()
    assert a.weight.data.tobytes() != c.weight.data.tobytes()
    assert np.all(a.bias.data == 0)


def test_kaiming_uniform_bound():
    w = L.Linear(50, 400, rng()).weight.data
    assert np.abs(w).max() <= np.sqrt(6 / 50)


def test_unknown_init_scheme():
    with pytest.raises(ValueError, match="init scheme"):
        InitSpec("xavier")


# -- layer norm ------------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    ln = L.LayerNorm(4)
    np.testing.assert_array_equal(ln(Tensor([[5.0, 5.0, 5.0, 5.0]])).data, [[0, 0, 0, 0]])


def test_layer_norm_two_point_row():
    with T.precision(np.float64):
        out = L.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-15)
    out = L.LayerNorm(2)(Tensor([[1.0, -1.0]]))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-5)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 12)), elements=st.floats(-100, 100)))
def test_layer_norm_row_statistics(x):
    # rows whose spread is not tiny relative to eps
    x = x[x.std(axis=1) > 0.1]
    if len(x) == 0:
        return
    with T.precision(np.float64):
        out = L.layer_norm(Tensor(x), Tensor(np.ones(x.shape[1])), Tensor(np.zeros(x.shape[1]))).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-6)
    assert np.all(np.abs(out.var(axis=1) - 1) < 1e-3 * (1 + 1e-5 / x.var(axis=1)))


def test_layer_norm_variance_within_tolerance_on_typical_rows():
    x = rng(2).normal(size=(50, 16))
    with T.precision(np.float64):
        out = L.layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.abs(out.mean(axis=1)).max() < 1e-6
    assert np.abs(out.var(axis=1) - 1).max() < 1e-4


def test_layer_norm_fd():
    r = rng(4)
    with T.precision(np.float64):
        g, b = r.normal(size=6), r.normal(size=6)
        err = T.finite_difference_check(lambda v: (L.layer_norm(v, Tensor(g), Tensor(b)) ** 3).sum(), r.normal(size=(3, 6)))
    assert err < 1e-4


# -- cross entropy ----------------------------------------------------------------


def test_cross_entropy_uniform_logits():
    with T.precision(np.float64):
        loss = L.softmax_cross_entropy(Tensor(np.zeros((4, 10))), [0, 3, 5, 9])
    assert loss.data.item() == pytest.approx(np.log(10), abs=1e-12)


def test_cross_entropy_saturates_to_zero():
    logits = np.zeros((2, 5))
    logits[0, 1] = logits[1, 4] = 1e6
    assert L.softmax_cross_entropy(Tensor(logits), [1, 4]).data.item() == 0.0


def test_cross_entropy_gradient_formula():
    r = rng(5)
    with T.precision(np.float64):
        z0 = r.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 2])
        z = Tensor(z0, requires_grad=True)
        T.backward(L.softmax_cross_entropy(z, labels))
        expected = (L.softmax(z0) - np.eye(3)[labels]) / 4
        err = T.finite_difference_check(lambda v: L.softmax_cross_entropy(v, labels), z0)
    np.testing.assert_allclose(z.grad, expected, atol=1e-14)
    assert err < 1e-6


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="labels"):
        L.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ValueError, match="labels"):
        L.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [-1, 0])


# -- pooling / batch norm ---------------------------------------------------------------


def test_max_pool_and_global_pool():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
    np.testing.assert_array_equal(L.MaxPool2d(2)(x).data, [[[[4.0]]]])
    np.testing.assert_array_equal(L.GlobalAvgPool()(Tensor(np.full((1, 2, 3, 3), 2.5))).data, [[2.5, 2.5]])


def test_batch_norm_eval_default_stats_is_identity():
    x = rng(6).normal(size=(2, 3, 4, 4))
    with T.precision(np.float64):
        out = L.BatchNorm2d(3).eval()(Tensor(x)).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + L.BATCH_NORM_EPS), rtol=1e-15)


def test_batch_norm_train_updates_running_stats():
    bn = L.BatchNorm2d(2)
    x = rng(7).normal(loc=3.0, size=(4, 2, 3, 3)).astype(np.float32)
    out = bn(Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-5)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1), rtol=1e-5)


def test_mode_switch_only_affects_batch_norm():
    r = rng(8)
    x = Tensor(r.normal(size=(3, 2, 4, 4)).astype(np.float32))
    plain = L.Sequential(L.Conv2d(2, 3, 3, r, padding=1), L.ReLU(), L.MaxPool2d(2), L.GlobalAvgPool(), L.LayerNorm(3), L.Linear(3, 2, r))
    a = plain(x).data
    plain.eval()
    assert plain(x).data.tobytes() == a.tobytes()

    bn = L.Sequential(L.Conv2d(2, 3, 3, r, padding=1), L.BatchNorm2d(3))
    train_out = bn(x).data
    bn.eval()
    assert not np.array_equal(bn(x).data, train_out)


def test_state_dict_round_trip_includes_buffers():
    r = rng(9)
    net = L.Sequential(L.Conv2d(1, 2, 3, r), L.BatchNorm2d(2))
    net(Tensor(r.normal(size=(2, 1, 5, 5)).astype(np.float32)))
    state = net.state_dict()
    assert "layers.1.running_mean" in state
    other = L.Sequential(L.Conv2d(1, 2, 3, rng(10)), L.BatchNorm2d(2))
    other.load_state_dict(state)
    for k, v in other.state_dict().items():
        assert v.tobytes() == state[k].tobytes()
    with pytest.raises(KeyError, match="missing"):
        other.load_state_dict({})
