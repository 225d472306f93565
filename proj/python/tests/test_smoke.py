import numpy as np
import pytest

import segcam


@pytest.fixture(scope="module")
def data():
    return segcam.generate(seed=3, count=6, size=16)


@pytest.fixture(scope="module")
def model(data):
    images, masks = data
    m = segcam.Model(base_channels=4, depth=2, seed=5)
    m.train(images, masks, epochs=2, lr=3e-3, batch_size=2, seed=5)
    return m


def test_generate_is_seeded(data):
    images, masks = data
    assert images.shape == (6, 3, 16, 16) and images.dtype == np.float32
    assert masks.shape == (6, 16, 16)
    assert set(np.unique(masks)) <= {0, 1, 2, 3}
    again, _ = segcam.generate(seed=3, count=6, size=16)
    assert np.array_equal(images, again)
    assert segcam.class_names()[0] == "background"


def test_netpbm_round_trip(data):
    images, masks = data
    assert np.array_equal(segcam.read_pgm(segcam.write_pgm(masks[0])), masks[0])
    assert np.max(np.abs(segcam.read_ppm(segcam.write_ppm(images[0])) - images[0])) <= 1 / 255


def test_predict_matches_logits(model, data):
    images, _ = data
    logits = model.logits(images[0])
    assert logits.shape == (4, 16, 16)
    assert np.array_equal(model.predict(images[0]), np.argmax(logits, axis=0))
    metrics = model.evaluate(*data)
    assert 0.0 <= metrics["pixel_accuracy"] <= 1.0


def test_explain_additivity_and_scale(model, data):
    image = data[0][1]
    m1 = np.zeros((16, 16), np.int32)
    m1[:8] = 1
    m2 = 1 - m1
    a = model.explain(image, 1, "enc1.conv2", mask=m1)
    b = model.explain(image, 1, "enc1.conv2", mask=m2)
    ab = model.explain(image, 1, "enc1.conv2")
    assert np.allclose(ab["pre_relu"], a["pre_relu"] + b["pre_relu"], atol=1e-5)
    assert ab["raw"].shape == (8, 8) and ab["upsampled"].shape == (16, 16)
    tripled = model.explain(image, 1, "enc1.conv2", scale=3.0)
    assert np.allclose(tripled["normalized"], ab["normalized"], atol=1e-6)
    assert len(ab["alpha"]) == 8


def test_explain_errors(model, data):
    image = data[0][0]
    with pytest.raises(KeyError):
        model.explain(image, 0, "nope")
    with pytest.raises(ValueError):
        model.explain(image, 0, "logits", point=(99, 0))
    with pytest.raises(TypeError):
        model.explain(image, 0, "logits", bogus=1)


def test_sweep_and_overlay(model, data):
    image = data[0][2]
    rows = model.sweep(image, 2, rect=(0, 0, 7, 7))
    assert [r["tap"] for r in rows] == model.tap_names
    for r in rows:
        assert -1.0 <= r["logit_similarity"] <= 1.0
        assert -1.0 <= r["edge_similarity"] <= 1.0
    overlay = segcam.colorize_overlay(image, rows[0]["upsampled"])
    assert overlay.shape == (3, 16, 16)
    sal = model.saliency(image, 2, point=(3, 4))
    assert sal.shape == (16, 16) and sal.min() >= 0.0 and sal.max() <= 1.0


def test_checkpoint_round_trip(model, tmp_path):
    path = tmp_path / "m.sgcm"
    model.save(path)
    back = segcam.Model.load(path)
    assert back.to_bytes() == model.to_bytes() == path.read_bytes()
    assert back.hash() == model.hash()


def test_training_is_deterministic(data):
    hashes = []
    for _ in range(2):
        m = segcam.Model(base_channels=4, depth=2, seed=9)
        m.train(*data, epochs=1, lr=1e-3, batch_size=3, seed=9)
        hashes.append(m.hash())
    assert hashes[0] == hashes[1]


def test_gradcheck_small():
    report = segcam.gradcheck(seed=1, seeds=1)
    assert report["passed"] and report["max_relative_error"] < 1e-4
