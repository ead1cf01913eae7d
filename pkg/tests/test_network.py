import json
from collections import Counter

import numpy as np
import pytest

from onepass.layers import Conv2DLayer, DenseLayer, Flatten, ReLU
from onepass.network import (
    ModelError,
    ModelSpec,
    RngStream,
    forward_deterministic,
    forward_mc_dropout,
    forward_moments,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
    validate_model,
)
from onepass.tensor import ShapeError


def test_moment_mean_without_relu_equals_deterministic():
    gen = np.random.default_rng(2)
    conv = Conv2DLayer(gen.normal(size=(3, 3, 1, 2)), gen.normal(size=2), 0.5)
    dense = DenseLayer(gen.normal(size=(18, 2)), gen.normal(size=2), 0.7)
    m = ModelSpec((5, 5, 1), [conv, Flatten(), dense], 2)
    x = gen.normal(size=(5, 5, 1))
    np.testing.assert_allclose(forward_moments(m, x, 0.3).mean, forward_deterministic(m, x),
                               atol=1e-12)


def test_trace_counts_every_layer_once(small_model):
    trace = Counter()
    forward_moments(small_model, np.zeros((6, 6, 2)), 0.1, trace=trace)
    assert trace == Counter({"Conv2DLayer": 1, "ReLU": 1, "Flatten": 1, "DenseLayer": 1})


def test_flat_input_is_reshaped(small_model):
    x = np.random.default_rng(0).normal(size=(6, 6, 2))
    a = forward_moments(small_model, x.reshape(-1), 0.1)
    b = forward_moments(small_model, x, 0.1)
    np.testing.assert_array_equal(a.mean, b.mean)
    with pytest.raises(ShapeError):
        forward_moments(small_model, np.zeros((5, 5, 2)))


def test_mc_dropout_reproducible_and_shaped(small_model):
    x = np.ones((6, 6, 2))
    a = forward_mc_dropout(small_model, x, 50, RngStream(4), 0.2)
    b = forward_mc_dropout(small_model, x, 50, RngStream(4), 0.2)
    assert a.shape == (50, 3)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, forward_mc_dropout(small_model, x, 50, RngStream(5), 0.2))
    with pytest.raises(ValueError):
        forward_mc_dropout(small_model, x, 0)


def test_mc_single_pass_without_dropout_equals_deterministic():
    gen = np.random.default_rng(9)
    conv = Conv2DLayer(gen.normal(size=(2, 2, 1, 2)), gen.normal(size=2), 1.0)
    dense = DenseLayer(gen.normal(size=(8, 3)), gen.normal(size=3), 1.0)
    m = ModelSpec((3, 3, 1), [conv, ReLU(), Flatten(), dense], 3)
    x = gen.normal(size=(3, 3, 1))
    np.testing.assert_allclose(forward_mc_dropout(m, x, 1)[0], forward_deterministic(m, x),
                               atol=1e-12)


def test_substreams_are_distinct_and_stable():
    root = RngStream(1, 3)
    a = root.substream(0).gen.random(4)
    assert np.array_equal(a, RngStream(1, 3).substream(0).gen.random(4))
    assert not np.array_equal(a, root.substream(1).gen.random(4))


@pytest.mark.parametrize(
    "build,message",
    [
        (lambda c, d: ([], 3), "no layers"),
        (lambda c, d: ([d], 3), "before any conv2d"),
        (lambda c, d: ([c, Flatten()], 3), "final layer must be dense"),
        (lambda c, d: ([c, Flatten(), d], 4), "class_count"),
        (lambda c, d: ([c, d], 3), "layer 1"),
    ],
)
def test_invalid_chains(build, message):
    conv = Conv2DLayer(np.ones((3, 3, 1, 1)), np.zeros(1))
    dense = DenseLayer(np.ones((9, 3)), np.zeros(3))
    layers, k = build(conv, dense)
    with pytest.raises(ModelError, match=message):
        ModelSpec((5, 5, 1), layers, k)


def test_json_round_trip(tmp_path, small_model):
    path = tmp_path / "m.json"
    save_model(small_model, path, prior_sigma=[0.3, 0.4])
    loaded, prior = load_model(path, with_prior=True)
    np.testing.assert_array_equal(prior, [0.3, 0.4])
    x = np.random.default_rng(1).normal(size=(6, 6, 2))
    np.testing.assert_array_equal(forward_moments(loaded, x, prior).var,
                                  forward_moments(small_model, x, prior).var)
    assert load_model(path).layer_shapes == small_model.layer_shapes
    assert validate_model(json.loads(path.read_text())).class_count == 3


def test_inverted_dropout_import(small_model):
    doc = model_to_dict(small_model)
    for layer in doc["layers"]:
        if "weights" in layer:
            layer["weights"] = [w * layer["keep_prob"] for w in layer["weights"]]
    doc["weights_scaled_inverted"] = True
    restored = model_from_dict(doc)
    x = np.ones((6, 6, 2))
    np.testing.assert_allclose(forward_deterministic(restored, x),
                               forward_deterministic(small_model, x), atol=1e-12)


def test_malformed_documents(tmp_path, small_model):
    doc = model_to_dict(small_model)
    doc["layers"][0]["weights"] = doc["layers"][0]["weights"][:-1]
    with pytest.raises(ModelError, match="layer 0"):
        model_from_dict(doc)
    with pytest.raises(ModelError, match="unknown kind"):
        model_from_dict({"input_shape": [2, 2, 1], "class_count": 1, "layers": [{"kind": "pool"}]})
    with pytest.raises(ModelError, match="missing"):
        model_from_dict({"layers": []})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ModelError):
        load_model(bad)
