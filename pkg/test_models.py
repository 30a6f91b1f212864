import numpy as np
import pytest
from pydantic import ValidationError

import engine
from errors import ArgumentError, DimensionError, ParseError, ReportError
from models import (
    Architecture,
    build_bundle,
    forward_bundle,
    init_projection,
    load_checkpoint,
    ova_labels,
    save_checkpoint,
    smoothed_cross_entropy,
)

SMALL = Architecture(encoder_widths=[6, 5], discriminator_widths=[4], projection_size=7)


def test_forward_bundle_shapes():
    bundle = build_bundle(3, 4, 2, SMALL, seed=0)
    logits, domain_logits, z = forward_bundle(bundle, np.ones((9, 3)))
    assert logits.shape == (9, 4)
    assert [d.shape for d in domain_logits] == [(9, 1), (9, 1)]
    assert z.shape == (9, 5)


def test_forward_bundle_rejects_wrong_input_width():
    bundle = build_bundle(3, 2, 2, SMALL)
    with pytest.raises(DimensionError):
        forward_bundle(bundle, np.ones((4, 2)))
    with pytest.raises(DimensionError):
        bundle.predict(np.ones(3))


def test_projection_columns_have_unit_norm():
    projection = init_projection(32, 16, seed=5)
    np.testing.assert_allclose(np.linalg.norm(projection.matrix.values, axis=0), 1.0, atol=1e-12)
    assert projection.matrix.frozen
    assert init_projection(4, 3, seed=5, trainable=True).matrix.frozen is False
    with pytest.raises(ArgumentError):
        init_projection(0, 3, seed=1)


def test_projection_is_frozen_during_backprop():
    bundle = build_bundle(2, 2, 2, SMALL, seed=1)
    before = bundle.discriminators[0].projection.matrix.values.copy()
    _, domain_logits, _ = forward_bundle(bundle, np.random.default_rng(0).normal(size=(8, 2)))
    loss = engine.binary_cross_entropy(domain_logits[0], np.array([1.0, 0.0] * 4))
    grads = engine.gradients(loss, bundle.discriminator_parameters(0))
    assert "discriminator0.projection.matrix" not in grads
    assert "discriminator0.0.weight" in grads
    engine.sgd_momentum_step(bundle.discriminator_parameters(0), grads, engine.OptimState(lr=0.1), lr=0.1, momentum=0.0)
    np.testing.assert_array_equal(bundle.discriminators[0].projection.matrix.values, before)


def test_projection_size_zero_feeds_encoding_directly():
    arch = SMALL.model_copy(update={"projection_size": 0})
    bundle = build_bundle(2, 2, 3, arch)
    assert all(d.projection is None for d in bundle.discriminators)
    assert bundle.discriminators[0].layers[0].weight.shape[0] == 5


def test_adding_discriminators_keeps_encoder_and_classifier():
    two = build_bundle(2, 3, 2, SMALL, seed=7)
    four = build_bundle(2, 3, 4, SMALL, seed=7)
    for name, p in {**two.encoder_parameters(), **two.classifier_parameters()}.items():
        np.testing.assert_array_equal(p.values, four.parameters()[name].values)
    assert not np.array_equal(
        two.discriminators[0].projection.matrix.values, two.discriminators[1].projection.matrix.values
    )


def test_architecture_validation():
    with pytest.raises(ValidationError):
        Architecture(activation="gelu")
    with pytest.raises(ValidationError):
        Architecture(encoder_widths=[])
    with pytest.raises(ValidationError):
        Architecture(discriminator_widths=[0])
    with pytest.raises(ArgumentError):
        build_bundle(2, 1, 2)


def test_copy_and_with_classifier():
    bundle = build_bundle(2, 2, 2, SMALL, seed=3)
    clone = bundle.copy()
    clone.encoder.layers[0].weight.values += 1.0
    assert not np.array_equal(clone.encoder.layers[0].weight.values, bundle.encoder.layers[0].weight.values)

    swapped = bundle.with_classifier(bundle.classifier.copy())
    assert swapped.encoder is bundle.encoder
    swapped.classifier.layers[0].bias.values += 1.0
    assert not np.array_equal(swapped.classifier.layers[0].bias.values, bundle.classifier.layers[0].bias.values)


def test_smoothed_cross_entropy_matches_closed_form():
    logits = engine.Tensor(np.array([[2.0, 0.0], [0.0, 0.0]]))
    loss = smoothed_cross_entropy(logits, np.array([0, 1]), 0.2).item()
    log_p = logits.values - np.log(np.exp(logits.values).sum(axis=1, keepdims=True))
    targets = np.array([[0.9, 0.1], [0.1, 0.9]])
    assert loss == pytest.approx(-(targets * log_p).sum(axis=1).mean())


def test_ova_labels():
    np.testing.assert_array_equal(ova_labels([0, 1, 2, 1], 1), [0.0, 1.0, 0.0, 1.0])
    with pytest.raises(ArgumentError):
        ova_labels([0, 1], 2)
    with pytest.raises(ArgumentError):
        ova_labels([0, 1], 2, n_domains=2)


def test_checkpoint_round_trip_preserves_predictions(tmp_path):
    bundle = build_bundle(2, 3, 3, SMALL, seed=11)
    for p in bundle.parameters().values():
        if not p.frozen:
            p.values += 0.05
    path = save_checkpoint(bundle, tmp_path / "model.json")
    restored = load_checkpoint(path)
    x = np.random.default_rng(2).normal(size=(20, 2))
    np.testing.assert_array_equal(restored.predict(x), bundle.predict(x))
    for k in range(3):
        np.testing.assert_array_equal(
            restored.discriminators[k].projection.matrix.values, bundle.discriminators[k].projection.matrix.values
        )


def test_load_checkpoint_errors(tmp_path):
    with pytest.raises(ReportError):
        load_checkpoint(tmp_path / "missing.json")
    garbled = tmp_path / "garbled.json"
    garbled.write_text("{not json", encoding="utf-8")
    with pytest.raises(ParseError):
        load_checkpoint(garbled)
    foreign = tmp_path / "foreign.json"
    foreign.write_text('{"format": "other", "version": 1}', encoding="utf-8")
    with pytest.raises(ParseError, match="unsupported"):
        load_checkpoint(foreign)
