import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qfl.data import (
    Dataset,
    SyntheticConfig,
    dumps_dataset,
    generate_dataset,
    load_dataset,
    loads_dataset,
    partition_iid,
    partition_label_skew,
    save_dataset,
    templates,
    train_test_split,
)
from qfl.errors import ConfigError, FormatError, LengthError, VersionError
from qfl.model import default_arch, evaluate, init_model
from qfl.federation import ClientState, client_local_train


def _assert_exact_partition(shards, dataset):
    ids = np.concatenate([s.ids for s in shards])
    assert len(ids) == len(set(ids.tolist()))
    assert sorted(ids.tolist()) == sorted(dataset.ids.tolist())
    for s in shards:
        assert np.array_equal(s.inputs, dataset.inputs[s.ids])
        assert np.array_equal(s.labels, dataset.labels[s.ids])


def test_noise_free_templates_repeat():
    ds = generate_dataset(SyntheticConfig(samples_per_class=3, noise_sigma=0.0, seed=1))
    disc, ring = templates((16, 16))
    assert not np.array_equal(disc, ring)
    for img, label in zip(ds.inputs[:, 0], ds.labels):
        assert np.array_equal(img, disc if label == 0 else ring)


def test_template_geometry():
    disc, ring = templates((16, 16))
    yy, xx = np.mgrid[0:16, 0:16]
    dist = np.hypot(yy - 7.5, xx - 7.5)
    assert disc[dist < 4].all() and not disc[dist >= 4].any()
    assert ring[(dist >= 4) & (dist < 16 / 3)].all()
    assert not ring[dist < 4].any()
    assert set(np.unique(disc)) | set(np.unique(ring)) == {0.0, 1.0}


def test_generate_is_deterministic_and_clamped():
    cfg = SyntheticConfig(samples_per_class=20, noise_sigma=0.3, seed=5)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert a.bitwise_equal(b)
    assert a.inputs.min() >= 0.0 and a.inputs.max() <= 1.0
    assert a.inputs.shape == (40, 1, 16, 16)
    assert np.bincount(a.labels).tolist() == [20, 20]


@pytest.mark.parametrize("kwargs", [{"image_size": (7, 16)}, {"samples_per_class": 0}, {"noise_sigma": -1.0}])
def test_synthetic_config_validation(kwargs):
    with pytest.raises(ConfigError):
        SyntheticConfig(**kwargs)


def _logistic_accuracy(train, test, steps=300, lr=0.5):
    """Plain logistic regression on flattened pixels (independent of the CNN code)."""
    x = train.inputs.reshape(len(train), -1)
    y = train.labels.astype(float)
    w, b = np.zeros(x.shape[1]), 0.0
    for _ in range(steps):
        p = 1 / (1 + np.exp(-(x @ w + b)))
        w -= lr * x.T @ (p - y) / len(y)
        b -= lr * float(np.mean(p - y))
    xt = test.inputs.reshape(len(test), -1)
    return float(np.mean(((xt @ w + b) > 0).astype(int) == test.labels))


def test_separable_by_logistic_model():
    ds = generate_dataset(SyntheticConfig(samples_per_class=200, noise_sigma=0.1, seed=3))
    train, test = train_test_split(ds, 0.2, 3)
    assert _logistic_accuracy(train, test) >= 0.95


def test_default_cnn_trained_centrally_five_epochs():
    ds = generate_dataset(SyntheticConfig(samples_per_class=200, noise_sigma=0.1, seed=8))
    train, test = train_test_split(ds, 0.2, 8)
    arch = default_arch((16, 16))
    state = ClientState(0, train, init_model(arch, 8), master_seed=8)
    w, _ = client_local_train(state, state.weights, arch, epochs=5, batch_size=8, lr=0.05, round_index=0)
    acc, _ = evaluate(w, arch, test)
    assert acc >= 0.95


# ---------------------------------------------------------------- partitions

def _ds(n_per_class, seed=0):
    return generate_dataset(SyntheticConfig(samples_per_class=n_per_class, noise_sigma=0.1, seed=seed))


def test_iid_equal_shards():
    part = partition_iid(_ds(50), 4, seed=1)
    assert part.sizes == [25, 25, 25, 25]


def test_iid_remainder_rule():
    part = partition_iid(_ds(5), 3, seed=1)
    assert sorted(part.sizes) == [3, 3, 4]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 60), k=st.integers(1, 12), seed=st.integers(0, 1000))
def test_iid_is_exact_partition(n, k, seed):
    ds = _ds(n)
    if k > len(ds):
        with pytest.raises(ConfigError):
            partition_iid(ds, k, seed)
        return
    part = partition_iid(ds, k, seed)
    _assert_exact_partition(part.client_shards, ds)
    assert max(part.sizes) - min(part.sizes) <= 1
    assert min(part.sizes) >= 1


def test_iid_label_balance_for_large_shards():
    ds = _ds(400)
    part = partition_iid(ds, 4, seed=2)
    for shard in part.client_shards:
        assert len(shard) >= 50
        assert abs(shard.labels.mean() - 0.5) <= 0.10


def test_iid_too_many_clients():
    with pytest.raises(ConfigError):
        partition_iid(_ds(2), 5, seed=0)


def test_skew_zero_matches_iid():
    ds = _ds(30)
    a = partition_label_skew(ds, 3, 0.0, seed=4)
    b = partition_iid(ds, 3, seed=4)
    assert all(x.bitwise_equal(y) for x, y in zip(a.client_shards, b.client_shards))


def test_skew_one_single_class_clients():
    ds = _ds(100)
    part = partition_label_skew(ds, 2, 1.0, seed=0)
    assert [set(s.labels.tolist()) for s in part.client_shards] == [{0}, {1}]


def test_skew_half_dominant_fraction():
    ds = _ds(100)
    part = partition_label_skew(ds, 2, 0.5, seed=0)
    for dominant, shard in enumerate(part.client_shards):
        frac = float(np.mean(shard.labels == dominant))
        assert abs(frac - 0.75) <= 0.1
    _assert_exact_partition(part.client_shards, ds)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 60), k=st.integers(1, 8), skew=st.floats(0, 1), seed=st.integers(0, 1000))
def test_skew_is_exact_partition(n, k, skew, seed):
    ds = _ds(n)
    if k > len(ds):
        return
    part = partition_label_skew(ds, k, skew, seed)
    _assert_exact_partition(part.client_shards, ds)
    assert min(part.sizes) >= 1
    assert max(part.sizes) - min(part.sizes) <= 1


# ---------------------------------------------------------------- split

def test_stratified_split_counts():
    ds = _ds(50)
    train, test = train_test_split(ds, 0.2, seed=0)
    assert (len(train), len(test)) == (80, 20)
    assert np.bincount(test.labels).tolist() == [10, 10]
    _assert_exact_partition([train, test], ds)


def test_split_deterministic():
    ds = _ds(20)
    a = train_test_split(ds, 0.3, seed=9)
    b = train_test_split(ds, 0.3, seed=9)
    assert a[0].bitwise_equal(b[0]) and a[1].bitwise_equal(b[1])


@pytest.mark.parametrize("fraction", [0.01, 0.99, 0.0, 1.0])
def test_split_rejects_empty_side(fraction):
    with pytest.raises(ConfigError):
        train_test_split(_ds(5), fraction, seed=0)


# ---------------------------------------------------------------- QFLD files

def test_dataset_file_roundtrip(tmp_path):
    ds = _ds(4)
    path = tmp_path / "d.qfld"
    save_dataset(ds, path)
    again = load_dataset(path)
    assert again.inputs.tobytes() == ds.inputs.tobytes()
    assert np.array_equal(again.labels, ds.labels)


def test_dataset_file_layout():
    ds = Dataset(np.array([[[[0.5] * 8] * 8]]), np.array([1]), np.array([0]))
    blob = dumps_dataset(ds)
    assert blob[:4] == b"QFLD"
    assert len(blob) == 4 + 2 + 4 + 3 * 2 + 64 * 8 + 1
    assert blob[16:24] == bytes.fromhex("000000000000e03f")  # 0.5, little-endian binary64
    assert blob[-1] == 1
    buf = io.BytesIO()
    save_dataset(ds, buf)
    assert buf.getvalue() == blob


def test_dataset_file_errors():
    blob = dumps_dataset(_ds(1))
    with pytest.raises(FormatError):
        loads_dataset(b"XXXX" + blob[4:])
    with pytest.raises(LengthError):
        loads_dataset(blob[:-1])
    with pytest.raises(VersionError):
        loads_dataset(blob[:4] + b"\x02\x00" + blob[6:])
