import math

import pytest

import mdenet

TINY = dict(
    known_families=3, height=4, width=4, max_length=8, batch_size=8, epochs=2, seed=3, disc_margin=1.0,
    numeric=dict(key_channels=4, value_channels=3, local_channels=3, stack_widths=[4, 4, 8, 8], branch_dim=8),
    textual=dict(model_dim=8, ffn_dim=16, blocks=1, output_dim=16),
    fusion_hidden=16, embedding_dim=16, sub_dim=8,
)


@pytest.fixture(scope="module")
def split():
    ds = mdenet.gen_synthetic(
        seed=5, known_families=3, unknown_families=1, samples_per_family=20, features=16,
        max_length=8, vocab_size=32, signature_length=4, tokens_per_sample=6,
    )
    assert len(ds) == 80
    return mdenet.split_known_unknown(ds, 3, 0.8, 5)


@pytest.fixture(scope="module")
def trained(split):
    cfg = mdenet.default_config(**TINY)
    model, history = mdenet.train(cfg, split)
    return cfg, model, history


def test_config_defaults_and_hash(split):
    cfg = mdenet.default_config()
    assert cfg["learning_rate"] == 1e-4
    assert cfg["batch_size"] == 32
    assert len(mdenet.config_hash(cfg)) == 16
    assert mdenet.config_hash(cfg) != mdenet.config_hash(mdenet.default_config(seed=1))
    with pytest.raises(mdenet.ConfigError):
        mdenet.train(mdenet.default_config(**dict(TINY, batch_size=1)), split)


def test_train_and_evaluate(trained, split):
    cfg, model, history = trained
    assert len(history["epochs"]) == 2
    assert all(math.isfinite(s["total"]) for s in history["steps"])
    metrics, confusion = mdenet.evaluate(model, split)
    assert metrics["det_acc"] == (metrics["tpr"] + metrics["tnr"]) / 2
    assert confusion.startswith("predicted\\truth,")
    again, _ = mdenet.evaluate(model, split)
    assert again == metrics


def test_same_seed_same_history(trained, split):
    cfg, _, history = trained
    _, second = mdenet.train(cfg, split)
    assert second == history


def test_checkpoint_round_trip(trained, split, tmp_path):
    _, model, _ = trained
    metrics, _ = mdenet.evaluate(model, split)
    path = str(tmp_path / "model.ckpt")
    mdenet.save_checkpoint(model, path)
    loaded = mdenet.load_checkpoint(path)
    assert loaded.has_tables
    assert mdenet.evaluate(loaded, split)[0] == metrics
    with pytest.raises(mdenet.IoError):
        mdenet.load_checkpoint(str(tmp_path / "missing.ckpt"))


def test_detect(trained, split, tmp_path):
    _, model, _ = trained
    mdenet.evaluate(model, split)
    ds = mdenet.gen_synthetic(seed=6, known_families=3, unknown_families=1, samples_per_family=5, features=16,
                              max_length=8, vocab_size=32, signature_length=4, tokens_per_sample=6)
    verdicts = mdenet.detect(model, ds)
    assert len(verdicts) == len(ds)
    for v in verdicts:
        assert (v["family"] == -1) != v["known"]
        assert v["distance"] >= 0


def test_image_only_has_no_textual_encoder(split):
    model, _ = mdenet.train(mdenet.default_config(**dict(TINY, modalities="image", epochs=1)), split)
    assert not model.has_textual_encoder


def test_metric_helpers():
    assert len(mdenet.admissible_weight_pairs()) == 36
    assert mdenet.det_accuracy([True] * 4 + [False], [False, False]) == {"tpr": 0.8, "tnr": 1.0, "det_acc": 0.9}
    assert mdenet.cls_accuracy([0, 1, 1], [0, 1, 0]) == pytest.approx(2 / 3)
    assert mdenet.gaussian_similarity([1.0, 1.0], [1.0, 1.0]) == pytest.approx(math.e ** 2)
    with pytest.raises(mdenet.InputError):
        mdenet.det_accuracy([], [True])
