import numpy as np
import pytest

import microbia


def test_split_counts_fixture():
    assert microbia.split_counts(14285) == (8571, 2857, 2857)
    assert microbia.split_counts(953) == (571, 191, 191)


def test_stratified_split_is_seeded():
    labels = [i % 7 for i in range(140)]
    a = microbia.stratified_split(labels, 3)
    assert a == microbia.stratified_split(labels, 3)
    assert a.count("train") == 84 and a.count("valid") == 28 and a.count("test") == 28


def test_weighted_f1_matches_per_class_oracle():
    rng = np.random.default_rng(0)
    m = rng.integers(0, 30, size=(7, 7)).astype(np.uint64)
    r = microbia.metrics(m, "seven")
    support = m.sum(axis=1)
    f1 = np.array([c["f1"] for c in r["per_class"]])
    assert r["f1"] == pytest.approx(float((f1 * support).sum() / support.sum()), abs=1e-12)
    assert r["accuracy"] == pytest.approx(100.0 * np.trace(m) / m.sum())


def test_conversion_keeps_totals():
    m = np.arange(49, dtype=np.uint64).reshape(7, 7)
    r7 = microbia.metrics(m, "seven")
    r4 = microbia.convert_7_to_4(m)
    assert r4["confusion"].shape == (4, 4)
    assert int(r4["confusion"].sum()) == int(m.sum())
    assert r4["accuracy"] >= r7["accuracy"]


def test_pca_and_tsne():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 5))
    p = microbia.pca(x)
    assert p["embedding"].shape == (40, 2)
    assert np.allclose(p["components"] @ p["components"].T, np.eye(2), atol=1e-10)
    _, perp = microbia.conditional_probabilities(x, 5.0)
    assert np.allclose(perp, 5.0, atol=1e-3)
    y, kl = microbia.tsne(x, perplexity=5.0, iterations=100, seed=2)
    assert y.shape == (40, 2) and len(kl) >= 2
    assert microbia.tsne_learning_rate(17050) == pytest.approx(355.2083333, rel=1e-6)


def test_gradcam_equals_hirescam_for_constant_gradient():
    rng = np.random.default_rng(2)
    a = rng.random((3, 4, 4))
    g = np.broadcast_to(rng.normal(size=(3, 1, 1)), (3, 4, 4)).copy()
    assert np.allclose(microbia.cam_from_maps(a, g, "gradcam"),
                       microbia.cam_from_maps(a, g, "hirescam"), atol=1e-12)
    assert len(microbia.cam_methods()) == 6


def test_model_forward_shapes(tmp_path):
    model = microbia.Model(outputs=7, seed=0)
    x = np.random.default_rng(3).normal(size=(2, 3, 128, 128)).astype(np.float32)
    assert model.forward(x).shape == (2, 7)
    assert model.forward(x, "conv4_out").shape == (2, 200, 10, 10)
    assert model.forward(x, "flatten_out").shape == (2, 5000)
    heat = model.cam(x[0], 1, "eigencam")
    assert heat.shape == (128, 128) and heat.min() >= 0 and heat.max() <= 1
    model.save(tmp_path / "m.ckpt")
    again = microbia.Model.load(tmp_path / "m.ckpt")
    assert np.array_equal(again.forward(x), model.forward(x))


def test_generated_dataset_is_reproducible(tmp_path):
    assert microbia.generate_dataset(tmp_path / "a", per_class=2, seed=4) == 14
    microbia.generate_dataset(tmp_path / "b", per_class=2, seed=4)
    assert microbia.directory_hash(tmp_path / "a") == microbia.directory_hash(tmp_path / "b")


def test_errors_are_raised_as_exceptions():
    with pytest.raises(microbia.MicrobiaError):
        microbia.conditional_probabilities(np.zeros((5, 2)), 30.0)
    with pytest.raises(ValueError):
        microbia.metrics(np.zeros((2, 3), dtype=np.uint64))
