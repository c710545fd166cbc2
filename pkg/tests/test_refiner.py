import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lowdata import tensor as T
from lowdata.layers import InitSpec, LayerNorm, Linear, ReLU, count_parameters, softmax_cross_entropy
from lowdata.refiner import FeatureRefinerConfig, build_feature_refiner, expected_parameter_count
from lowdata.tensor import ShapeError, Tensor


@pytest.mark.parametrize(
    "d_bbf, d_frf, classes, count",
    [(512, 64, 10, 42058), (1024, 64, 10, 74826), (512, 256, 101, 289893)],
)
def test_published_extra_parameter_counts(d_bbf, d_frf, classes, count):
    cfg = FeatureRefinerConfig(d_bbf, d_frf, classes)
    assert expected_parameter_count(cfg) == count
    assert count_parameters(build_feature_refiner(cfg)) == count


@pytest.mark.parametrize("variant", ["full", "no_layernorm", "reduce_only", "square_linear_only", "k_nonlinear_layers(3)"])
def test_built_count_matches_closed_form(variant):
    cfg = FeatureRefinerConfig(24, 8, 5, variant)
    assert count_parameters(build_feature_refiner(cfg)) == expected_parameter_count(cfg)


def test_variant_closed_forms():
    b, f, c = 24, 8, 5
    assert expected_parameter_count(FeatureRefinerConfig(b, f, c, "reduce_only")) == b * f + f + f * c + c
    assert expected_parameter_count(FeatureRefinerConfig(b, f, c, "square_linear_only")) == b * b + b + b * c + c
    full = expected_parameter_count(FeatureRefinerConfig(b, f, c))
    assert expected_parameter_count(FeatureRefinerConfig(b, f, c, "no_layernorm")) == full - 4 * f


def test_full_layer_order():
    head = build_feature_refiner(FeatureRefinerConfig(16, 4, 3))
    kinds = [type(m) for m in head.body.layers]
    assert kinds == [Linear, LayerNorm, Linear, ReLU, Linear, LayerNorm]
    assert (head.body[0].d_in, head.body[0].d_out) == (16, 4)
    assert (head.classifier.d_in, head.classifier.d_out) == (4, 3)


def test_second_relu_flag():
    head = build_feature_refiner(FeatureRefinerConfig(16, 4, 3, second_relu=True))
    assert [type(m) for m in head.body.layers] == [Linear, LayerNorm, Linear, ReLU, Linear, ReLU, LayerNorm]


@given(st.integers(1, 6), st.integers(1, 32), st.integers(2, 12))
def test_k_variant_strictly_monotone(k, f, c):
    a = FeatureRefinerConfig(64, f, c, "k_nonlinear_layers", k=k)
    b = FeatureRefinerConfig(64, f, c, "k_nonlinear_layers", k=k + 1)
    assert expected_parameter_count(b) > expected_parameter_count(a)


def test_k1_variant_equals_full():
    assert expected_parameter_count(FeatureRefinerConfig(32, 8, 4, "k_nonlinear_layers(1)")) == expected_parameter_count(
        FeatureRefinerConfig(32, 8, 4)
    )


def test_invalid_configs():
    with pytest.raises(ValueError, match="d_frf"):
        FeatureRefinerConfig(32, 64, 4)
    with pytest.raises(ValueError, match="k >= 1"):
        FeatureRefinerConfig(32, 8, 4, "k_nonlinear_layers", k=0)
    with pytest.raises(ValueError, match="variant"):
        FeatureRefinerConfig(32, 8, 4, "wide")


def test_zero_gamma_and_bias_give_zero_logits():
    head = build_feature_refiner(FeatureRefinerConfig(10, 4, 3), InitSpec(seed=1))
    head.body[-1].gamma.data[:] = 0
    head.classifier.bias.data[:] = 0
    out = head(Tensor(np.random.default_rng(0).normal(size=(5, 10))))
    assert np.all(out.data == 0)


def test_duplicated_rows_give_duplicated_logits():
    head = build_feature_refiner(FeatureRefinerConfig(10, 4, 3), InitSpec(seed=2))
    row = np.random.default_rng(1).normal(size=(1, 10))
    out = head(Tensor(np.repeat(row, 4, axis=0))).data
    assert all(np.array_equal(out[0], out[i]) for i in range(4))


def test_shape_mismatch():
    head = build_feature_refiner(FeatureRefinerConfig(10, 4, 3))
    with pytest.raises(ShapeError, match="feature_refiner"):
        head(Tensor(np.ones((2, 9))))


def test_fd_through_full_head():
    rng = np.random.default_rng(3)
    with T.precision(np.float64):
        head = build_feature_refiner(FeatureRefinerConfig(8, 4, 3), InitSpec(seed=3))
        labels = np.array([0, 2, 1])
        err = T.finite_difference_check(lambda v: softmax_cross_entropy(head(v), labels), rng.normal(size=(3, 8)))
    assert err < 1e-4


def test_gradient_reaches_features():
    head = build_feature_refiner(FeatureRefinerConfig(8, 4, 3), InitSpec(seed=4))
    x = Tensor(np.random.default_rng(4).normal(size=(2, 8)), requires_grad=True)
    T.backward(head(x).sum() * head(x).sum())
    assert np.any(x.grad != 0)


def test_identity_mlp_makes_full_match_reduce_only():
    b, f, c, shift = 8, 4, 3, 100.0
    with T.precision(np.float64):
        full = build_feature_refiner(FeatureRefinerConfig(b, f, c), InitSpec(seed=5))
        reduce = build_feature_refiner(FeatureRefinerConfig(b, f, c, "reduce_only"), InitSpec(seed=6))
        red = np.zeros((b, f))
        red[:f] = np.eye(f)
        for head in (full, reduce):
            head.body[0].weight.data[:] = red
            head.body[0].bias.data[:] = 0
            head.classifier.weight.data[:] = full.classifier.weight.data
            head.classifier.bias.data[:] = full.classifier.bias.data
        # relu sandwich becomes the identity on inputs above -shift
        full.body[2].weight.data[:] = np.eye(f)
        full.body[2].bias.data[:] = shift
        full.body[4].weight.data[:] = np.eye(f)
        full.body[4].bias.data[:] = -shift
        for norm in (full.body[1], full.body[5]):
            norm.eps = 0.0
        # rows already standardised, so the normalisations pass them through
        z = np.random.default_rng(7).normal(size=(6, f))
        z = (z - z.mean(axis=1, keepdims=True)) / z.std(axis=1, keepdims=True)
        x = np.concatenate([z, np.random.default_rng(8).normal(size=(6, b - f))], axis=1)
        np.testing.assert_allclose(full(Tensor(x)).data, reduce(Tensor(x)).data, rtol=0, atol=1e-12)
