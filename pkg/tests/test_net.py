import numpy as np
import pytest

from codats import autodiff as ad
from codats.net import (
    NetConfig, count_params, domain_classifier, feature_extractor, init_params,
    param_shapes, predict_logits, task_classifier,
)


def small(**kw):
    kw.setdefault("filters", (4, 8, 4))
    kw.setdefault("domain_widths", (8, 8, 8))
    return NetConfig(kw.pop("in_channels", 3), kw.pop("n_labels", 3), **kw)


def test_full_count_by_hand():
    # conv(8,1->128) + bn, conv(5,128->256) + bn, conv(3,256->128) + bn,
    # dense 128->2, dense 128->500->500->500->2
    by_hand = (8 * 1 * 128 + 2 * 128) + (5 * 128 * 256 + 2 * 256) + (3 * 256 * 128 + 2 * 128)
    by_hand += 128 * 2 + 2
    by_hand += (128 * 500 + 500) + 2 * (500 * 500 + 500) + (500 * 2 + 2)
    cfg = NetConfig(1, 2, 1)
    assert by_hand == 830_952
    assert count_params(cfg) == by_hand
    store = init_params(cfg, np.random.default_rng(0))
    assert store.n_trainable() == by_hand


def test_full_shapes():
    s = {k: v[0] for k, v in param_shapes(NetConfig(9, 6, 3)).items()}
    assert s["feature.conv0.w"] == (8, 9, 128)
    assert s["feature.conv1.w"] == (5, 128, 256)
    assert s["feature.conv2.w"] == (3, 256, 128)
    assert s["task.dense.w"] == (128, 6)
    assert [s[f"domain.dense{i}.w"] for i in range(4)] == [(128, 500), (500, 500), (500, 500), (500, 4)]
    assert not any(k.startswith("feature.conv") and k.endswith(".b") for k in s)


@pytest.mark.parametrize("n", [1, 2, 5])
def test_domain_head_has_n_plus_one_outputs(n):
    cfg = small(n_sources=n)
    store = init_params(cfg, np.random.default_rng(0))
    f = feature_extractor(np.zeros((2, 10, 3)), store)
    assert domain_classifier(f, store, 1.0, np.random.default_rng(0)).shape == (2, n + 1)


def test_glorot_bounds_and_init_values():
    cfg = small()
    store = init_params(cfg, np.random.default_rng(1))
    w = store["feature.conv0.w"]
    k, cin, f = w.shape
    assert np.abs(w).max() <= np.sqrt(6 / (k * cin + k * f))
    d = store["domain.dense0.w"]
    assert np.abs(d).max() <= np.sqrt(6 / sum(d.shape))
    assert not store["task.dense.b"].any()
    assert (store["feature.bn1.gamma"] == 1).all() and not store["feature.bn1.beta"].any()


def test_groups_partition_params():
    store = init_params(small(), np.random.default_rng(0))
    names = store.group("feature") + store.group("task") + store.group("domain")
    assert sorted(names) == sorted(store.keys())
    assert all(n.startswith("feature.") for n in store.group("feature"))


@pytest.mark.parametrize("H", [16, 64, 315])
def test_features_are_length_independent(H):
    store = init_params(small(), np.random.default_rng(0))
    assert feature_extractor(np.ones((2, H, 3)), store, "inference").shape == (2, 4)


def test_channel_mismatch():
    store = init_params(small(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        feature_extractor(np.ones((2, 10, 4)), store)


def test_inference_deterministic_and_chunk_independent():
    store = init_params(small(), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(9, 12, 3)).astype(np.float32)
    a = predict_logits(x, store, batch_size=4)
    b = predict_logits(x, store, batch_size=100)
    np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-6)
    np.testing.assert_array_equal(a, predict_logits(x, store, batch_size=4))


def test_train_mode_updates_running_stats_only_in_train():
    store = init_params(small(), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(3, 2, size=(4, 12, 3))
    before = store.bn["feature.bn0"].mean.copy()
    feature_extractor(x, store, "inference")
    np.testing.assert_array_equal(store.bn["feature.bn0"].mean, before)
    feature_extractor(x, store, "train")
    assert not np.array_equal(store.bn["feature.bn0"].mean, before)


def test_reversal_does_not_change_forward():
    store = init_params(small(), np.random.default_rng(0))
    f = feature_extractor(np.random.default_rng(2).normal(size=(3, 10, 3)), store, "inference")
    a = domain_classifier(f, store, 0.7, np.random.default_rng(5), "train", reverse=True)
    b = domain_classifier(f, store, 0.7, np.random.default_rng(5), "train", reverse=False)
    assert a.values.tobytes() == b.values.tobytes()


def test_copy_is_deep():
    store = init_params(small(), np.random.default_rng(0))
    c = store.copy()
    c["task.dense.b"][0] = 5.0
    c.bn["feature.bn0"].mean[0] = 5.0
    assert store["task.dense.b"][0] == 0.0 and store.bn["feature.bn0"].mean[0] == 0.0


def test_precision_follows_context():
    with ad.precision("float64"):
        store = init_params(small(), np.random.default_rng(0))
    assert store["feature.conv0.w"].dtype == np.float64
    assert store.astype(np.float32)["feature.conv0.w"].dtype == np.float32


def test_config_round_trip_and_validation():
    cfg = small(n_sources=3)
    assert NetConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        NetConfig(3, 1)
    with pytest.raises(ValueError):
        NetConfig(3, 2, filters=(4, 4), kernels=(3,))


def test_task_head_width_check():
    store = init_params(small(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        task_classifier(np.zeros((2, 5)), store)
