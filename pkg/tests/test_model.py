import numpy as np
import pytest

from patchswap import tensor as tn
from patchswap.distill import cross_entropy
from patchswap.model import ConfigError, ModelSpec, build_model, forward_logits
from patchswap.tensor import DimensionError, GradTape, verification_mode


def test_default_param_count_matches_layer_arithmetic():
    spec = ModelSpec(in_channels=3, num_classes=10)
    expected = (32 * 3 * 9 + 32) + (64 * 32 * 9 + 64) + (128 * 64 * 9 + 128) + (128 * 10 + 10)
    assert expected == 94_538
    model = build_model(spec, 0)
    assert spec.param_count() == expected
    assert sum(p.data.size for p in model.parameters()) == expected


def test_same_seed_same_parameters():
    a = build_model(ModelSpec(), 5)
    b = build_model(ModelSpec(), 5)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    c = build_model(ModelSpec(), 6)
    assert not np.array_equal(a.params["conv1.weight"].data, c.params["conv1.weight"].data)


def test_parameter_order_and_flags():
    model = build_model(ModelSpec(widths=(4, 8), pool_after=(2,)), 0)
    assert list(model.params) == ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc.weight", "fc.bias"]
    assert all(p.requires_grad for p in model.parameters())
    assert not model.params["conv2.bias"].data.any()


def test_two_class_shape_case():
    spec = ModelSpec(in_channels=3, num_classes=2, widths=(4, 4, 4))
    out = forward_logits(build_model(spec, 0), np.random.default_rng(0).random((1, 3, 8, 8)))
    assert out.shape == (1, 2)


def test_zero_input_gives_equal_logits():
    model = build_model(ModelSpec(in_channels=1, widths=(4, 4, 4)), 1)
    out = forward_logits(model, np.zeros((3, 1, 8, 8))).data
    assert np.array_equal(out, np.zeros_like(out))


def test_batch_permutation_permutes_logits():
    with verification_mode():
        model = build_model(ModelSpec(in_channels=1, widths=(4, 6, 8)), 2)
        x = np.random.default_rng(0).random((7, 1, 16, 16))
        perm = np.random.default_rng(1).permutation(7)
        full = forward_logits(model, x).data
        np.testing.assert_allclose(forward_logits(model, x[perm]).data, full[perm], rtol=0, atol=1e-12)


def test_output_rows_match_batch_size():
    model = build_model(ModelSpec(in_channels=1, widths=(2, 2, 2)), 0)
    assert forward_logits(model, np.zeros((5, 1, 8, 8))).shape == (5, 10)


def test_too_small_or_wrong_channels_is_a_dimension_error():
    model = build_model(ModelSpec(in_channels=1, widths=(2, 2, 2)), 0)
    with pytest.raises(DimensionError):
        forward_logits(model, np.zeros((1, 1, 2, 2)))
    with pytest.raises(DimensionError):
        forward_logits(model, np.zeros((1, 1, 6, 6)))
    with pytest.raises(DimensionError):
        forward_logits(model, np.zeros((1, 3, 8, 8)))


@pytest.mark.parametrize(
    "kwargs",
    [dict(num_classes=1), dict(widths=()), dict(kernel=2), dict(widths=(4,), pool_after=(2,)), dict(in_channels=0)],
)
def test_invalid_specs(kwargs):
    with pytest.raises(ConfigError):
        ModelSpec(**kwargs)


def test_every_parameter_participates():
    model = build_model(ModelSpec(in_channels=1, num_classes=4, widths=(4, 6, 8)), 3)
    x = np.random.default_rng(0).random((8, 1, 16, 16)).astype(np.float32)
    y = np.arange(8) % 4
    with GradTape() as tape:
        tape.backward(cross_entropy(forward_logits(model, x), y))
    for name, p in model.params.items():
        assert p.grad is not None and p.grad.shape == p.shape and np.abs(p.grad).sum() > 0, name


def test_float64_model_under_verification_mode():
    with verification_mode():
        model = build_model(ModelSpec(widths=(2,), pool_after=()), 0)
    assert model.params["fc.weight"].dtype == np.float64
    assert tn.default_dtype() == np.float32
