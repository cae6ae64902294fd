import pytest
import torch

from utils.data import (
    batch_loader,
    load_dataset,
    load_synthetic_cache,
    make_synthetic,
    save_synthetic_cache,
    subsample,
)
from utils.errors import ConfigError, DatasetChecksumError, DatasetMissingError


def test_synthetic_is_deterministic():
    a = make_synthetic(64, (8, 8, 3), seed=7)
    b = make_synthetic(64, (8, 8, 3), seed=7)
    assert a.train.numpy().tobytes() == b.train.numpy().tobytes()
    assert a.test.numpy().tobytes() == b.test.numpy().tobytes()


def test_synthetic_values_and_shapes():
    handle = make_synthetic(64, (8, 8, 3), seed=0)
    assert handle.train.shape == (64, 3, 8, 8)
    assert handle.test.shape == (8, 3, 8, 8)
    for images in (handle.train, handle.test):
        assert images.min() >= 0.0 and images.max() <= 1.0
    assert handle.describe()["train"] == 64


def test_synthetic_single_image():
    handle = make_synthetic(1, (8, 8, 3), seed=0)
    assert len(handle.train) == 1
    assert len(handle.test) == 0


def test_synthetic_seeds_differ():
    a = make_synthetic(1, (8, 8, 3), seed=0)
    b = make_synthetic(1, (8, 8, 3), seed=1)
    assert not torch.equal(a.train[0], b.train[0])


def test_synthetic_mean_is_calibrated():
    handle = make_synthetic(1000, (8, 8, 3), seed=3, n_test=0)
    assert 0.4 < handle.train.mean().item() < 0.6


def test_synthetic_needs_at_least_one_image():
    with pytest.raises(ConfigError):
        make_synthetic(0)


def test_subsample_is_a_duplicate_free_subset():
    handle = make_synthetic(64, (8, 8, 3), seed=2)
    sub = subsample(handle, 20, seed=5)
    assert len(sub.train) == 20
    flat_full = handle.train.flatten(1)
    flat_sub = sub.train.flatten(1)
    assert len(torch.unique(flat_sub, dim=0)) == 20
    for row in flat_sub:
        assert (flat_full == row).all(dim=1).any()
    assert torch.equal(subsample(handle, 20, seed=5).train, sub.train)
    with pytest.raises(ConfigError):
        subsample(handle, 65, seed=0)


def test_synthetic_cache_roundtrip(tmp_path):
    handle = make_synthetic(16, (8, 8, 3), seed=4, n_test=4)
    path = save_synthetic_cache(handle, tmp_path / "s.bin")
    loaded = load_synthetic_cache(path)
    assert torch.equal(loaded.train, handle.train)
    assert torch.equal(loaded.test, handle.test)
    assert loaded.seed == 4


def test_synthetic_cache_rejects_garbage(tmp_path):
    path = tmp_path / "s.bin"
    path.write_bytes(b"SYNIMG01" + b"\x00" * 4)
    with pytest.raises(DatasetChecksumError):
        load_synthetic_cache(path)
    handle = make_synthetic(4, (8, 8, 3), seed=0, n_test=0)
    save_synthetic_cache(handle, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(DatasetChecksumError):
        load_synthetic_cache(path)


def test_load_dataset_synthetic_uses_cache(tmp_path):
    first = load_dataset("synthetic", root=tmp_path, seed=1, n_train=8, n_test=2)
    assert len(list(tmp_path.glob("synthetic_*.bin"))) == 1
    second = load_dataset("synthetic", root=tmp_path, seed=1, n_train=8, n_test=2)
    assert torch.equal(first.train, second.train)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset("mnist")
    with pytest.raises(DatasetMissingError):
        load_dataset("cifar10", root=tmp_path / "absent")
    with pytest.raises(DatasetMissingError):
        load_dataset("cifar10", root=tmp_path)
    with pytest.raises(DatasetMissingError):
        load_dataset("imagenet32", root=tmp_path)


def test_batch_order_is_fixed_by_seed_and_epoch():
    images = torch.arange(32, dtype=torch.float32).reshape(32, 1, 1, 1)

    def order(seed, epoch):
        return torch.cat([b.flatten() for b in batch_loader(images, 8, seed=seed, epoch=epoch)])

    assert torch.equal(order(0, 1), order(0, 1))
    assert not torch.equal(order(0, 1), order(0, 2))
    assert sorted(order(3, 1).tolist()) == list(range(32))
