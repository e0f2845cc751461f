import math

import numpy as np
import pytest
import torch
from ensemble_tracking.data import FeatureMap
from ensemble_tracking.exceptions import ShapeError
from ensemble_tracking.layers import (
    AttentionConfig,
    DeformableCrossAttention,
    EncoderLayer,
    MultiHeadAttention,
    bilinear_sample,
    focal_loss,
    softmax_normalize,
)

f64 = torch.float64


def _identity_projections(layer: DeformableCrossAttention):
    with torch.no_grad():
        for linear in (layer.value_proj, layer.output_proj):
            linear.weight.copy_(torch.eye(linear.weight.shape[0], dtype=linear.weight.dtype))
            linear.bias.zero_()


def _pixel_center(row: int, col: int, height: int, width: int) -> torch.Tensor:
    return torch.tensor([(col + 0.5) / width, (row + 0.5) / height], dtype=f64)


@pytest.mark.parametrize(
    "values, expected",
    [
        pytest.param([1.0, 1.0, 1.0, 1.0], [0.25, 0.25, 0.25, 0.25], id="uniform"),
        pytest.param([0.0, 0.0], [0.5, 0.5], id="pair"),
        pytest.param([10.0, 0.0], [0.9999546021312976, 4.5397868702434395e-05], id="peaked"),
    ],
)
def test_softmax_examples(values, expected):
    result = softmax_normalize(torch.tensor(values, dtype=f64), 0)
    assert result.tolist() == pytest.approx(expected, abs=1e-12)


def test_softmax_properties():
    x = torch.randn(4, 7, dtype=f64)
    result = softmax_normalize(x, -1)
    assert (result >= 0).all()
    assert torch.allclose(result.sum(-1), torch.ones(4, dtype=f64), atol=1e-12)
    assert torch.allclose(softmax_normalize(x + 3.5, -1), result, atol=1e-12)


def test_softmax_empty_axis():
    with pytest.raises(ShapeError):
        softmax_normalize(torch.zeros(3, 0), -1)


def test_attention_config_validation():
    with pytest.raises(ShapeError):
        AttentionConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ShapeError):
        AttentionConfig(embed_dim=8, num_heads=2, num_points=0)


def test_attention_single_key():
    attention = MultiHeadAttention(AttentionConfig(8, 2)).double()
    query = torch.randn(3, 8, dtype=f64)
    key_value = torch.randn(1, 8, dtype=f64)

    expected = attention.out_proj(attention.v_proj(key_value)).expand(3, 8)
    assert torch.allclose(attention(query, key_value), expected, atol=1e-12)


def test_attention_identical_keys():
    attention = MultiHeadAttention(AttentionConfig(8, 2)).double()
    key_value = torch.randn(1, 8, dtype=f64).expand(5, 8)
    _, weights = attention.attend(torch.randn(3, 8, dtype=f64), key_value)
    assert torch.allclose(weights, torch.full_like(weights, 0.2), atol=1e-12)


def test_attention_dense_formula():
    torch.manual_seed(0)
    attention = MultiHeadAttention(AttentionConfig(8, 2)).double()
    query = torch.randn(3, 8, dtype=f64)
    key_value = torch.randn(4, 8, dtype=f64)

    q = attention.q_proj(query)
    k = attention.k_proj(key_value)
    v = attention.v_proj(key_value)
    heads = []
    for head in range(2):
        part = slice(4 * head, 4 * head + 4)
        scores = q[:, part] @ k[:, part].T / math.sqrt(4)
        weights = torch.exp(scores) / torch.exp(scores).sum(-1, keepdim=True)
        heads.append(weights @ v[:, part])
    expected = attention.out_proj(torch.cat(heads, dim=-1))

    assert torch.allclose(attention(query, key_value), expected, atol=1e-12)


def test_attention_weights_are_convex():
    attention = MultiHeadAttention(AttentionConfig(8, 4)).double()
    _, weights = attention.attend(torch.randn(2, 3, 8, dtype=f64), torch.randn(2, 6, 8, dtype=f64))
    assert weights.shape == (2, 4, 3, 6)
    assert (weights >= 0).all()
    assert torch.allclose(weights.sum(-1), torch.ones(2, 4, 3, dtype=f64), atol=1e-12)


def test_attention_dimension_mismatch():
    attention = MultiHeadAttention(AttentionConfig(8, 2))
    with pytest.raises(ShapeError):
        attention(torch.randn(3, 6), torch.randn(4, 8))


def test_bilinear_sample_on_pixel():
    values = torch.randn(5, 6, 3, dtype=f64)
    feature_map = FeatureMap(values, 16)
    for row, col in [(0, 0), (2, 3), (4, 5)]:
        sampled = bilinear_sample(feature_map, _pixel_center(row, col, 5, 6))
        assert torch.allclose(sampled, values[row, col], atol=1e-12)


def test_bilinear_sample_midpoint():
    values = torch.randn(5, 6, 3, dtype=f64)
    point = (_pixel_center(2, 1, 5, 6) + _pixel_center(2, 2, 5, 6)) / 2
    sampled = bilinear_sample(FeatureMap(values, 16), point)
    assert torch.allclose(sampled, (values[2, 1] + values[2, 2]) / 2, atol=1e-12)


def _four_neighbor_oracle(values: np.ndarray, x: float, y: float) -> np.ndarray:
    height, width, channels = values.shape
    gx, gy = x * width - 0.5, y * height - 0.5
    x0, y0 = math.floor(gx), math.floor(gy)
    fx, fy = gx - x0, gy - y0

    result = np.zeros(channels)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            row, col = y0 + dy, x0 + dx
            if 0 <= row < height and 0 <= col < width:
                result += wy * wx * values[row, col]
    return result


def test_bilinear_sample_oracle():
    rng = np.random.default_rng(3)
    values = rng.normal(size=(7, 9, 4))
    points = rng.uniform(-0.05, 1.05, size=(200, 2))

    sampled = bilinear_sample(FeatureMap(torch.from_numpy(values), 16), torch.from_numpy(points))
    for point, result in zip(points, sampled.numpy()):
        assert result == pytest.approx(_four_neighbor_oracle(values, *point), abs=1e-12)


def test_bilinear_sample_is_linear():
    first, second = torch.randn(6, 6, 2, dtype=f64), torch.randn(6, 6, 2, dtype=f64)
    points = torch.rand(10, 2, dtype=f64)
    combined = bilinear_sample(FeatureMap(2.0 * first - 0.5 * second, 16), points)
    expected = 2.0 * bilinear_sample(FeatureMap(first, 16), points) - 0.5 * bilinear_sample(
        FeatureMap(second, 16), points
    )
    assert torch.allclose(combined, expected, atol=1e-12)


def test_deformable_degenerate_sampling():
    layer = DeformableCrossAttention(AttentionConfig(4, num_heads=1, num_points=1)).double()
    _identity_projections(layer)
    with torch.no_grad():
        layer.sampling_offsets.bias.zero_()

    values = torch.randn(5, 6, 4, dtype=f64)
    feature_map = FeatureMap(values, 16)
    refs = torch.tensor([[0.3, 0.4], [0.75, 0.1]], dtype=f64)
    output = layer(torch.randn(2, 4, dtype=f64), refs, feature_map)
    assert torch.allclose(output, bilinear_sample(feature_map, refs), atol=1e-12)


def test_deformable_uniform_weights_average_samples():
    layer = DeformableCrossAttention(AttentionConfig(4, num_heads=2, num_points=2)).double()
    _identity_projections(layer)
    torch.nn.init.normal_(layer.sampling_offsets.weight, std=0.3)

    values = torch.randn(6, 6, 4, dtype=f64)
    feature_map = FeatureMap(values, 16)
    queries = torch.randn(3, 4, dtype=f64)
    refs = torch.rand(3, 2, dtype=f64)

    locations = layer.sampling_locations(queries, refs, 6, 6)
    expected = bilinear_sample(feature_map, locations).mean(-2)
    assert torch.allclose(layer(queries, refs, feature_map), expected, atol=1e-12)


def test_deformable_integer_offsets_match_dense_gather():
    torch.manual_seed(4)
    height, width = 8, 8
    layer = DeformableCrossAttention(AttentionConfig(6, num_heads=2, num_points=2)).double()
    torch.nn.init.normal_(layer.attention_weights.weight, std=0.5)
    cell_offsets = torch.tensor([[1, 0], [0, -2], [-1, 1], [2, 2]], dtype=f64)
    with torch.no_grad():
        layer.sampling_offsets.weight.zero_()
        layer.sampling_offsets.bias.copy_(cell_offsets.reshape(-1))

    values = torch.randn(height, width, 6, dtype=f64)
    queries = torch.randn(3, 6, dtype=f64)
    cells = [(3, 3), (4, 2), (5, 5)]
    refs = torch.stack([_pixel_center(r, c, height, width) for r, c in cells])

    projected = layer.value_proj(values)
    weights = layer.sampling_weights(queries)
    expected = []
    for i, (row, col) in enumerate(cells):
        gathered = torch.stack(
            [projected[row + int(dy), col + int(dx)] for dx, dy in cell_offsets.tolist()]
        )
        expected.append((weights[i, :, None] * gathered).sum(0))
    expected = layer.output_proj(torch.stack(expected))

    output = layer(queries, refs, FeatureMap(values, 16))
    assert torch.allclose(output, expected, atol=1e-10)


def test_deformable_weights_and_convex_hull():
    layer = DeformableCrossAttention(AttentionConfig(4, num_heads=2, num_points=3)).double()
    _identity_projections(layer)
    torch.nn.init.normal_(layer.attention_weights.weight, std=1.0)

    queries = torch.randn(5, 4, dtype=f64)
    refs = torch.rand(5, 2, dtype=f64)
    values = torch.randn(6, 7, 4, dtype=f64)

    weights = layer.sampling_weights(queries)
    assert weights.shape == (5, 6)
    assert torch.allclose(weights.sum(-1), torch.ones(5, dtype=f64), atol=1e-12)

    samples = bilinear_sample(FeatureMap(values, 16), layer.sampling_locations(queries, refs, 6, 7))
    output = layer(queries, refs, FeatureMap(values, 16))
    assert (output <= samples.max(-2).values + 1e-12).all()
    assert (output >= samples.min(-2).values - 1e-12).all()


def test_deformable_batched_matches_unbatched():
    layer = DeformableCrossAttention(AttentionConfig(8, 2, 2)).double()
    queries = torch.randn(2, 3, 8, dtype=f64)
    refs = torch.rand(2, 3, 2, dtype=f64)
    values = torch.randn(2, 4, 5, 8, dtype=f64)

    batched = layer(queries, refs, FeatureMap(values, 16))
    for b in range(2):
        single = layer(queries[b], refs[b], FeatureMap(values[b], 16))
        assert torch.allclose(batched[b], single, atol=1e-12)


def test_deformable_shape_errors():
    layer = DeformableCrossAttention(AttentionConfig(8, 2, 2))
    with pytest.raises(ShapeError):
        layer(torch.randn(3, 8), torch.rand(2, 2), FeatureMap(torch.randn(4, 4, 8), 16))
    with pytest.raises(ShapeError):
        layer(torch.randn(3, 8), torch.rand(3, 2), FeatureMap(torch.randn(4, 4, 6), 16))


def test_focal_reduces_to_cross_entropy():
    scores = torch.tensor([0.1, 0.4, 0.8], dtype=f64)
    labels = torch.tensor([1.0, 0.0, 1.0], dtype=f64)
    expected = torch.nn.functional.binary_cross_entropy(scores, labels, reduction="none")
    assert torch.allclose(focal_loss(scores, labels, gamma=0.0, alpha=None), expected, atol=1e-12)


def test_focal_formula():
    loss = focal_loss(torch.tensor(0.5, dtype=f64), 1.0, gamma=2.0, alpha=0.25)
    assert float(loss) == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-12)
    assert float(loss) == pytest.approx(0.04332, abs=1e-5)


def test_focal_limits_and_monotonicity():
    scores = torch.linspace(0.01, 1.0, 100, dtype=f64)
    losses = focal_loss(scores, torch.ones(100, dtype=f64))
    assert (losses >= 0).all()
    assert (losses[1:] <= losses[:-1]).all()
    assert float(losses[-1]) < 1e-12

    # clamped scores keep the loss finite
    assert torch.isfinite(focal_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0]))).all()


def test_encoder_layer_shape():
    layer = EncoderLayer(AttentionConfig(8, 2), ffn_dim=16)
    tokens = torch.randn(2, 10, 8)
    assert layer(tokens).shape == (2, 10, 8)
