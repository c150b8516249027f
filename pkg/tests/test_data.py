import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codats import data as D


def labelled(counts, H=4, K=2, seed=0):
    y = np.repeat(np.arange(len(counts)), counts)
    X = np.random.default_rng(seed).normal(size=(y.size, H, K)).astype(np.float32)
    return D.DomainDataset(X, y, 1, len(counts))


# --------------------------------------------------------------- windows


def test_window_offsets():
    s = np.arange(300 * 2).reshape(300, 2)
    w = D.window_stream(s, np.zeros(300), 128, 128)
    assert len(w) == 2
    np.testing.assert_array_equal(w[1][0][0], s[128])


def test_window_short_stream_is_empty():
    assert D.window_stream(np.zeros((127, 3)), np.zeros(127)) == []


def test_window_labels():
    assert {lab for _, lab in D.window_stream(np.zeros((400, 1)), np.full(400, 2))} == {2}
    lab = np.array([1] * 64 + [0] * 64)
    assert D.window_stream(np.zeros((128, 1)), lab)[0][1] == 0
    lab = np.array([3] * 70 + [1] * 58)
    assert D.window_stream(np.zeros((128, 1)), lab)[0][1] == 3


def test_window_overlap_and_errors():
    assert len(D.window_stream(np.zeros((10, 1)), np.zeros(10), 4, 2)) == 4
    with pytest.raises(ValueError):
        D.window_stream(np.zeros((10, 1)), np.zeros(10), 0)


def test_pad_right():
    x = np.ones((300, 3))
    out = D.pad_right(x, 315)
    assert out.shape == (315, 3) and not out[300:].any() and (out[:300] == 1).all()
    np.testing.assert_array_equal(D.pad_right(x, 300), x)
    assert not D.pad_right(np.zeros((5, 2)), 9).any()
    with pytest.raises(ValueError):
        D.pad_right(x, 299)


# ---------------------------------------------------------------- splits


def test_split_ten_examples():
    tr, ho = D.stratified_split(labelled([5, 5]), 0.8, seed=3)
    assert len(tr) == 8 and len(ho) == 2
    assert np.bincount(tr.y).tolist() == [4, 4]
    assert np.bincount(ho.y).tolist() == [1, 1]


def test_split_deterministic():
    ds = labelled([7, 9, 12])
    a, _ = D.stratified_split(ds, seed=5)
    b, _ = D.stratified_split(ds, seed=5)
    np.testing.assert_array_equal(a.X, b.X)


def test_split_needs_two_per_label():
    with pytest.raises(ValueError, match="fewer than 2"):
        D.stratified_split(labelled([5, 1]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 40), min_size=1, max_size=5), st.integers(0, 1000))
def test_split_is_partition_within_one(counts, seed):
    ds = labelled(counts, H=1, K=1, seed=seed)
    # tag every window with its index so the partition can be checked
    ds.X[:, 0, 0] = np.arange(len(ds))
    tr, ho = D.stratified_split(ds, 0.8, seed)
    a, b = tr.X[:, 0, 0], ho.X[:, 0, 0]
    assert set(a) | set(b) == set(range(len(ds))) and not set(a) & set(b)
    for c, n in enumerate(counts):
        assert abs(np.sum(ho.y == c) - 0.2 * n) <= 1


def test_train_val_test_hierarchy():
    ds = labelled([100, 100, 100, 100])
    tr, va, te = D.train_val_test(ds, seed=0)
    assert (len(tr), len(va), len(te)) == (256, 64, 80)
    assert (tr.split, va.split, te.split) == ("train", "val", "test")


# --------------------------------------------------------- normalization


def test_normalized_train_is_standard():
    rng = np.random.default_rng(0)
    ds = D.DomainDataset(rng.normal(5, 3, size=(50, 20, 3)), np.zeros(50), 0, 2)
    stats, (out,) = D.fit_apply_normalizer(ds)
    flat = out.X.reshape(-1, 3)
    assert np.abs(flat.mean(0)).max() < 1e-6
    assert np.abs(flat.std(0) - 1).max() < 1e-6


def test_constant_channel_goes_to_zero():
    X = np.ones((4, 5, 2))
    X[..., 1] = np.arange(5.0)
    stats, (out,) = D.fit_apply_normalizer(D.DomainDataset(X, np.zeros(4), 0, 2))
    assert stats.std[0] == D.STD_FLOOR
    assert not out.X[..., 0].any()


def test_test_split_does_not_leak():
    rng = np.random.default_rng(1)
    tr = D.DomainDataset(rng.normal(size=(20, 8, 2)), np.zeros(20), 0, 2)
    te = D.DomainDataset(rng.normal(2, 1, size=(10, 8, 2)), np.zeros(10), 0, 2)
    stats, (_, te_n) = D.fit_apply_normalizer(tr, [te])
    te.X[0, 0, 0] = 1e6
    again = D.fit_normalizer(tr)
    np.testing.assert_array_equal(stats.mean, again.mean)
    assert np.abs(te_n.X.reshape(-1, 2).mean(0)).max() > 0.5


# ------------------------------------------------------------ proportions


def test_estimate_proportions():
    np.testing.assert_allclose(D.estimate_label_proportions([0, 0, 0, 1], 2).p, [0.75, 0.25])
    np.testing.assert_array_equal(D.estimate_label_proportions([2, 2], 3).p, [0, 0, 1])
    with pytest.raises(ValueError):
        D.estimate_label_proportions([], 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=60))
def test_estimate_is_distribution(labels):
    p = D.estimate_label_proportions(labels, 5).p
    assert (p >= 0).all() and abs(p.sum() - 1) < 1e-9


def test_label_distribution_invariants():
    with pytest.raises(ValueError):
        D.LabelDistribution([0.5, 0.6])
    with pytest.raises(ValueError):
        D.LabelDistribution([1.2, -0.2])


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 1000), st.lists(st.floats(0.01, 1), min_size=1, max_size=8))
def test_largest_remainder(total, raw):
    p = np.asarray(raw) / sum(raw)
    c = D.largest_remainder(total, p)
    assert c.sum() == total
    assert np.all(np.abs(c - total * p) < 1)


# -------------------------------------------------------------- synthetic


def test_synth_deterministic():
    spec = D.SynthSpec(domains={0: {"amplitude": 1.6, "phase": 0.8}})
    a, b = D.synth_generate(spec, 0, 4), D.synth_generate(spec, 0, 4)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert D.synth_generate(spec, 1, 4).X.tobytes() != a.X.tobytes()


def test_synth_even_split():
    spec = D.SynthSpec(n_labels=2, frequencies=(1, 2), n_examples=100, proportions=(0.5, 0.5))
    assert np.bincount(D.synth_generate(spec, 0, 0).y).tolist() == [50, 50]


def test_synth_noiseless_is_exact_sinusoid():
    spec = D.SynthSpec(n_labels=2, channels=2, length=32, frequencies=(2, 5), noise=0.0, n_examples=6)
    ds = D.synth_generate(spec, 0, 0)
    t = np.arange(32)
    for x, y in zip(ds.X, ds.y):
        expect = np.sin(2 * math.pi * (2, 5)[y] * t / 32)
        np.testing.assert_allclose(x[:, 0], expect, atol=1e-6)
        np.testing.assert_allclose(x[:, 1], expect, atol=1e-6)


def test_synth_shift_applied():
    spec = D.SynthSpec(n_labels=2, channels=3, length=16, frequencies=(1, 3), noise=0.0, n_examples=4,
                       domains={2: {"amplitude": 2.0, "phase": 0.5, "channel_scale": (1.0, -1.0, 0.0)}})
    ds = D.synth_generate(spec, 2, 0)
    t = np.arange(16)
    base = 2.0 * np.sin(2 * math.pi * np.array([1, 3])[ds.y][:, None] * t / 16 + 0.5)
    np.testing.assert_allclose(ds.X[..., 0], base, atol=1e-6)
    np.testing.assert_allclose(ds.X[..., 1], -base, atol=1e-6)
    assert not ds.X[..., 2].any()


def test_synth_proportions_round_trip():
    props = (0.55, 0.25, 0.15, 0.05)
    spec = D.SynthSpec(n_examples=333, domains={0: {"proportions": props}})
    est = D.estimate_label_proportions(D.synth_generate(spec, 0, 0).y, 4).p
    np.testing.assert_array_equal(np.rint(est * 333), D.largest_remainder(333, props))
    assert np.abs(est - props).max() < 1 / 333


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        D.SynthSpec(frequencies=(2, 2, 3, 4))
    with pytest.raises(ValueError):
        D.SynthSpec(n_labels=3)


# ---------------------------------------------------------------- batches


def test_plan_examples():
    assert D.batch_plan(1, 128, D.SINGLE_SOURCE) == {0: 64, 1: 64}
    assert D.batch_plan(3, 128, D.MULTI_SOURCE_EVEN) == {0: 32, 1: 32, 2: 32, 3: 32}
    assert D.batch_plan(3, 128, D.DAWS_HALF_TARGET) == {0: 64, 1: 22, 2: 21, 3: 21}


@pytest.mark.parametrize("n", range(1, 26))
def test_plans_sum_to_batch(n):
    for policy in (D.MULTI_SOURCE_EVEN, D.DAWS_HALF_TARGET, D.SOURCE_ONLY):
        plan = D.batch_plan(n, 128, policy)
        assert sum(plan.values()) == 128
        assert max(plan.values()) - min(plan.values()) <= (1 if policy != D.DAWS_HALF_TARGET else 64)


def test_plan_errors():
    with pytest.raises(ValueError):
        D.batch_plan(2, 128, D.SINGLE_SOURCE)
    with pytest.raises(ValueError):
        D.batch_plan(1, 128, "random")


def test_compose_batch_labels_and_domains():
    src = [labelled([10, 10], seed=i) for i in range(3)]
    tgt = labelled([10, 10], seed=9)
    b = D.compose_batch(src, tgt, 128, D.DAWS_HALF_TARGET, np.random.default_rng(0))
    assert b.x.shape == (128, 4, 2)
    assert (np.bincount(b.domain) == [64, 22, 21, 21]).all()
    assert (b.task[b.domain == 0] == -1).all() and (b.task[b.domain > 0] >= 0).all()
    # every row comes from its own domain's pool
    for d, pool in enumerate([tgt] + src):
        rows = b.x[b.domain == d].reshape(-1, 8)
        pool_rows = {r.tobytes() for r in pool.X.reshape(-1, 8)}
        assert all(r.tobytes() in pool_rows for r in rows)


def test_compose_target_only_labels_target():
    tgt = labelled([10, 10])
    b = D.compose_batch([], tgt, 32, D.TARGET_ONLY, np.random.default_rng(0))
    assert (b.domain == 0).all() and (b.task >= 0).all()


def test_compose_empty_split():
    empty = D.DomainDataset(np.zeros((0, 4, 2)), np.zeros(0), 1, 2)
    with pytest.raises(ValueError, match="no training examples"):
        D.compose_batch([empty], labelled([3, 3]), 16, D.SINGLE_SOURCE, np.random.default_rng(0))


def test_dataset_validation():
    with pytest.raises(ValueError):
        D.DomainDataset(np.zeros((2, 3)), np.zeros(2), 0, 2)
    with pytest.raises(ValueError):
        D.DomainDataset(np.zeros((2, 3, 1)), np.array([0, 2]), 0, 2)
    with pytest.raises(ValueError):
        D.DomainDataset(np.zeros((2, 3, 1)), np.zeros(2), -1, 2)
