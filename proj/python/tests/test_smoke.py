import json

import numpy as np
import pytest

import sklab as sk


def tiny_data(seed=0):
    return sk.synth_dataset(num_classes=2, per_class=16, shape=[1, 8, 8], seed=seed, noise_sigma=0.2)


def test_dataset_roundtrip(tmp_path):
    d = tiny_data()
    assert len(d) == 32
    px = d.pixels
    assert px.shape == (32, 1, 8, 8)
    assert px.min() >= 0.0 and px.max() <= 1.0
    assert np.allclose(np.round(px * 255), px * 255)
    d.save(tmp_path / "d")
    back = sk.load_dataset(tmp_path / "d")
    assert back.labels == d.labels
    assert np.array_equal(back.pixels, px)


def test_dataset_from_numpy_validates():
    px = np.full((2, 1, 4, 4), 0.5)
    d = sk.Dataset(px, [0, 1], 2)
    assert d.indices_of_class(1) == [1]
    with pytest.raises(sk.SkError):
        sk.Dataset(px * 3, [0, 1], 2)


def test_alignment_bounds():
    rng = np.random.default_rng(0)
    for _ in range(100):
        g, c = rng.normal(size=20), rng.normal(size=20)
        a = sk.cosine_alignment(g, c)
        assert 0.0 <= a <= 2.0
    g = rng.normal(size=20)
    assert sk.cosine_alignment(g, g) < 1e-9
    assert sk.cosine_alignment(g, -g) > 2 - 1e-9


def test_model_train_predict_save(tmp_path):
    d = tiny_data()
    m = sk.train("cnn-s", d, json.dumps({"epochs": 2, "batch_size": 8}))
    logits = m.logits(d.pixels[:4])
    assert logits.shape == (4, 2)
    assert m.predict(d.pixels[:4]) == list(np.argmax(logits, axis=1))
    m.save(tmp_path / "m.skmd")
    again = sk.load_model(tmp_path / "m.skmd")
    assert np.array_equal(again.logits(d.pixels), m.logits(d.pixels))


def test_trigger_craft_and_evaluate(tmp_path):
    d = tiny_data()
    m = sk.Model("mlp-s", [1, 8, 8], 2, seed=1)
    src = d.subset(d.indices_of_class(0))
    trig, trace = sk.craft_trigger(m, src, 0, 1, sk.additive_trigger([1, 8, 8]), steps=3, max_samples=8)
    assert len(trace) == 4
    assert np.abs(trig.delta).max() <= trig.epsilon + 1e-12
    trig.save(tmp_path / "t.skt")
    assert np.array_equal(sk.load_trigger(tmp_path / "t.skt").delta, trig.delta)
    report = sk.evaluate(m, tiny_data(5), trig, 0, 1)
    assert report["n_success"] + report["n_other_class"] + report["n_still_source"] == report["n_total"]


def test_config_errors():
    with pytest.raises(sk.SkError):
        sk.normalize_config('{"bogus": 1}')
    text = sk.normalize_config("{}")
    assert sk.normalize_config(text) == text


def test_report_helpers():
    report = {"runs": [{"run_id": "a", "variant": "attack", "victim": "cnn-s", "defense": None,
                        "budget": 20, "epsilon": 16 / 255, "status": "ok",
                        "eval": {"asr": a, "clean_accuracy": 1.0}, "timing": {"s": 1}}
                       for a in (1.0, 0.5, 0.0)]}
    md = sk.report_render(json.dumps(report))
    assert "50.00 ± 40.82" in md
    assert "timing" not in sk.strip_timing(json.dumps(report))
    with pytest.raises(sk.SkError):
        sk.report_render(json.dumps({"runs": []}))
    assert sk.sha256_hex(b"abc").startswith("ba7816bf")
