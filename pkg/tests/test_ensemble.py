import dataclasses

import numpy as np
import pytest
import torch
from ensemble_tracking.data import BBox, FeatureMap, Point2, TemplateBundle
from ensemble_tracking.ensemble import EnsembleDecoder, PredictionHead
from ensemble_tracking.exceptions import ShapeError, ValidationError
from ensemble_tracking.features import crop_template
from ensemble_tracking.layers import AttentionConfig
from ensemble_tracking.model import EnsembleTracker
from ensemble_tracking.temporal import QueryMemory, memory_push

from tests.tools import TOY_MODEL

f64 = torch.float64


def _decoder(num_trackers: int = 4, depth: int = 2) -> EnsembleDecoder:
    torch.manual_seed(0)
    return EnsembleDecoder(AttentionConfig(8, 2, 2), num_trackers, depth, ffn_dim=16).double()


def test_default_references_count_and_range():
    decoder = EnsembleDecoder(AttentionConfig(64), num_trackers=10, depth=2, ffn_dim=128)
    references = decoder.default_references()
    assert references.shape == (10, 2)
    assert ((references > 0) & (references < 1)).all()
    assert torch.equal(references, decoder.default_references())


def test_default_references_zero_layer():
    decoder = _decoder()
    with torch.no_grad():
        decoder.reference_head.weight.zero_()
        decoder.reference_head.bias.zero_()
    assert torch.equal(decoder.default_references(), torch.full((4, 2), 0.5, dtype=f64))


def test_default_references_need_a_query():
    decoder = _decoder()
    with pytest.raises(ShapeError):
        decoder.default_references(torch.zeros(0, 8, dtype=f64))


def test_decode_keeps_tracker_order():
    decoder = _decoder()
    queries = torch.randn(4, 8, dtype=f64)
    references = torch.rand(4, 2, dtype=f64)
    feature_map = FeatureMap(torch.randn(5, 6, 8, dtype=f64), 16)

    embeddings = decoder.decode_ensemble(queries, references, feature_map)
    assert embeddings.shape == (4, 8)

    permutation = torch.tensor([2, 0, 3, 1])
    permuted = decoder.decode_ensemble(queries[permutation], references[permutation], feature_map)
    assert torch.allclose(permuted, embeddings[permutation], atol=1e-10)


def test_decode_single_tracker():
    decoder = _decoder(num_trackers=1, depth=1)
    feature_map = FeatureMap(torch.randn(5, 6, 8, dtype=f64), 16)
    queries = torch.randn(1, 8, dtype=f64)
    references = torch.rand(1, 2, dtype=f64)

    # a single token attends only to itself: self-attention returns its value projection
    layer = decoder.layers[0]
    normed = layer.norm1(queries)
    attended = layer.self_attn.out_proj(layer.self_attn.v_proj(normed))
    hidden = queries + attended
    hidden = hidden + layer.cross_attn(layer.norm2(hidden), references, feature_map)
    expected = decoder.norm(hidden + layer.ffn(layer.norm3(hidden)))

    result = decoder.decode_ensemble(queries, references, feature_map)
    assert torch.allclose(result, expected, atol=1e-12)


def test_decode_empty_ensemble():
    decoder = _decoder()
    feature_map = FeatureMap(torch.randn(5, 6, 8, dtype=f64), 16)
    with pytest.raises(ShapeError):
        decoder.decode_ensemble(
            torch.zeros(0, 8, dtype=f64), torch.zeros(0, 2, dtype=f64), feature_map
        )


def test_sample_positions_stay_near_reference():
    decoder = _decoder()
    cross_attn = decoder.layers[0].cross_attn
    queries = torch.randn(4, 8, dtype=f64)
    references = torch.rand(4, 2, dtype=f64)

    locations = cross_attn.sampling_locations(queries, references, 5, 6)
    offsets = cross_attn.sampling_offsets(queries).unflatten(-1, (4, 2))
    radius = (offsets / torch.tensor([6.0, 5.0], dtype=f64)).norm(dim=-1).max()
    distances = (locations - references[:, None]).norm(dim=-1)
    assert (distances <= radius + 1e-12).all()


def test_initial_trackers():
    decoder = _decoder()
    trackers = decoder.initial_trackers(memory_length=5)
    assert [t.tracker_id for t in trackers] == [0, 1, 2, 3]
    for tracker, reference in zip(trackers, decoder.default_references()):
        assert not tracker.activated
        assert tracker.online_query is None
        assert tracker.memory.is_empty
        assert torch.equal(tracker.reference, reference.detach())
        assert torch.equal(tracker.effective_query, tracker.offline_query)


def test_tracker_activate_and_reset():
    tracker = _decoder().initial_trackers(memory_length=5)[1]
    online = torch.randn(8, dtype=f64)
    memory = memory_push(QueryMemory(5), online)

    tracker.activate(Point2(0.25, 0.75), online, memory)
    assert tracker.activated
    assert tracker.reference_point == Point2(0.25, 0.75)
    assert tracker.effective_query is online
    assert len(tracker.memory) == 1

    tracker.reset()
    assert not tracker.activated
    assert tracker.online_query is None
    assert tracker.memory.is_empty
    assert tracker.reference_point == tracker.default_point


def _head_and_template(embed_dim: int = 8):
    torch.manual_seed(1)
    head = PredictionHead(embed_dim).double()
    vector = torch.nn.functional.normalize(torch.randn(embed_dim, dtype=f64), dim=0)
    template = TemplateBundle(
        image=np.zeros((32, 32, 3), dtype=np.uint8),
        target_box=BBox(0.5, 0.5, 0.5, 0.5),
        vector=vector,
    )
    return head, template


def test_confidence_formula():
    head, template = _head_and_template()
    embeddings = torch.randn(6, 8, dtype=f64)
    output = head(embeddings, template.vector)

    scores = torch.sigmoid(head.class_head(embeddings)).squeeze(-1)
    vectors = head.candidate_proj(embeddings)
    cosine = torch.nn.functional.cosine_similarity(vectors, template.vector[None], dim=-1)
    assert torch.allclose(output.confidences, scores * cosine.clamp(min=0), atol=1e-12)
    assert torch.allclose(output.vectors.norm(dim=-1), torch.ones(6, dtype=f64), atol=1e-12)


def test_confidence_equals_score_for_aligned_template():
    head, template = _head_and_template()
    embeddings = torch.randn(3, 8, dtype=f64)
    vectors = head(embeddings, template.vector).vectors

    aligned = dataclasses.replace(template, vector=vectors[0])
    output = head(embeddings[:1], aligned.vector)
    assert float(output.confidences[0]) == pytest.approx(float(output.scores[0]), abs=1e-12)


def test_zero_score_gives_zero_confidence():
    head, template = _head_and_template()
    with torch.no_grad():
        head.class_head.weight.zero_()
        head.class_head.bias.fill_(-1000.0)

    candidates = head.predict_candidates(torch.randn(4, 8, dtype=f64), template)
    assert all(c.confidence == 0.0 for c in candidates)


def test_predict_candidates():
    head, template = _head_and_template()
    embeddings = torch.randn(5, 8, dtype=f64)
    candidates = head.predict_candidates(embeddings, template)
    output = head(embeddings, template.vector)

    assert [c.tracker_id for c in candidates] == list(range(5))
    for candidate, score, box, confidence in zip(
        candidates, output.scores, output.boxes, output.confidences
    ):
        assert candidate.score == pytest.approx(float(score))
        assert candidate.confidence == pytest.approx(float(confidence))
        assert candidate.box.as_tuple() == pytest.approx(box.tolist())


def test_predict_needs_encoded_template():
    head, template = _head_and_template()
    with pytest.raises(ValidationError):
        head.predict_candidates(
            torch.randn(2, 8, dtype=f64), dataclasses.replace(template, vector=None)
        )


def test_model_encodes_template_and_frame():
    torch.manual_seed(0)
    model = EnsembleTracker(TOY_MODEL)
    image = np.random.default_rng(0).integers(0, 256, size=(48, 64, 3), dtype=np.uint8)

    template = model.embed_template(crop_template(image, BBox(0.5, 0.5, 0.25, 0.25), 32))
    assert template.features.values.shape == (2, 2, 16)
    assert float(template.vector.norm()) == pytest.approx(1.0, abs=1e-5)

    feature_map = model.encode_frame(image, template)
    assert feature_map.values.shape == (3, 4, 16)

    trackers = model.initial_trackers()
    queries = torch.stack([t.effective_query for t in trackers])
    references = torch.stack([t.reference for t in trackers])
    embeddings, output = model.predict(feature_map, queries, references, template.vector)
    assert embeddings.shape == (3, 16)
    assert output.boxes.shape == (3, 4)


def test_model_rejects_wrong_template_size():
    model = EnsembleTracker(TOY_MODEL)
    image = np.zeros((48, 64, 3), dtype=np.uint8)
    with pytest.raises(ShapeError):
        model.embed_template(crop_template(image, BBox(0.5, 0.5, 0.25, 0.25), 64))

    unencoded = crop_template(image, BBox(0.5, 0.5, 0.25, 0.25), 32)
    with pytest.raises(ValidationError):
        model.encode_frame(image, unencoded)
