"""
Dataset ingest: named public image sets, the synthetic desk-scale set,
deterministic subsampling and batch order.

All images are returned as float32 tensors (N, C, H, W) scaled to [0, 1].
"""

import logging
import pickle
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset

from utils.errors import ConfigError, DatasetChecksumError, DatasetMissingError

logger = logging.getLogger(__name__)

DATASETS = ("synthetic", "cifar10", "cifar100", "svhn", "imagenet32")
STANDARD_SHAPE = (32, 32, 3)

SYNTHETIC_MAGIC = b"SYNIMG01"
SYNTHETIC_VERSION = 1
# magic | version | H | W | C | count | n_train | seed
_SYNTHETIC_HEADER = struct.Struct("<8sHIIIIIQ")


@dataclass
class DatasetHandle:
    name: str
    train: torch.Tensor
    test: torch.Tensor
    image_shape: tuple
    seed: int = 0

    def __post_init__(self):
        H, W, C = self.image_shape
        for split, images in (("train", self.train), ("test", self.test)):
            if images.dim() != 4 or tuple(images.shape[1:]) != (C, H, W):
                raise ConfigError(
                    f"{self.name}/{split}: expected (N, {C}, {H}, {W}), got {tuple(images.shape)}"
                )

    @property
    def split_sizes(self):
        return {"train": len(self.train), "test": len(self.test)}

    def describe(self):
        return {
            "name": self.name,
            "image_shape": list(self.image_shape),
            "seed": self.seed,
            **self.split_sizes,
        }


def _to_unit(array_nhwc_uint8):
    return torch.from_numpy(np.ascontiguousarray(array_nhwc_uint8)).permute(0, 3, 1, 2).float() / 255.0


# =============================================================================
# СИНТЕТИЧЕСКИЙ НАБОР
# =============================================================================


def _synthetic_image(rng, H, W, C):
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    image = np.empty((H, W, C))

    # smooth low-frequency background
    for c in range(C):
        field = np.full((H, W), 0.5)
        for _ in range(3):
            fx, fy = rng.uniform(0.0, 1.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            field += rng.uniform(0.03, 0.12) * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
        image[..., c] = field

    # a few flat-colored rectangles and discs
    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(0.0, 1.0, size=C)
        if rng.random() < 0.5:
            y0, y1 = np.sort(rng.uniform(0, 1, size=2))
            x0, x1 = np.sort(rng.uniform(0, 1, size=2))
            mask = (yy >= y0) & (yy <= y1) & (xx >= x0) & (xx <= x1)
        else:
            cy, cx = rng.uniform(0, 1, size=2)
            radius = rng.uniform(0.1, 0.4)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        image[mask] = color

    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def make_synthetic(n, shape=(8, 8, 3), seed=0, n_test=None):
    """
    Structured synthetic images (smooth gradients plus shapes), quantized to
    8 bits. n training images; n_test defaults to n // 8.
    """
    if n < 1:
        raise ConfigError(f"synthetic dataset needs n >= 1, got {n}")
    H, W, C = shape
    n_test = n // 8 if n_test is None else n_test

    rng = np.random.default_rng(seed)
    pixels = np.stack([_synthetic_image(rng, H, W, C) for _ in range(n + n_test)])
    return _synthetic_handle(pixels, n, tuple(shape), seed)


def _synthetic_handle(pixels, n_train, shape, seed):
    images = _to_unit(pixels)
    return DatasetHandle(
        name="synthetic",
        train=images[:n_train],
        test=images[n_train:],
        image_shape=shape,
        seed=seed,
    )


def save_synthetic_cache(handle, path):
    H, W, C = handle.image_shape
    images = torch.cat([handle.train, handle.test])
    payload = (images * 255.0).round().to(torch.uint8).permute(0, 2, 3, 1).contiguous()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(
            _SYNTHETIC_HEADER.pack(
                SYNTHETIC_MAGIC, SYNTHETIC_VERSION, H, W, C,
                len(images), len(handle.train), handle.seed,
            )
        )
        f.write(payload.numpy().tobytes())
    return path


def load_synthetic_cache(path):
    raw = Path(path).read_bytes()
    if len(raw) < _SYNTHETIC_HEADER.size:
        raise DatasetChecksumError(f"synthetic cache truncated: {path}")
    magic, version, H, W, C, count, n_train, seed = _SYNTHETIC_HEADER.unpack_from(raw)
    if magic != SYNTHETIC_MAGIC or version != SYNTHETIC_VERSION:
        raise DatasetChecksumError(f"not a synthetic cache (v{SYNTHETIC_VERSION}): {path}")
    body = raw[_SYNTHETIC_HEADER.size :]
    if len(body) != count * H * W * C:
        raise DatasetChecksumError(f"synthetic cache has wrong size: {path}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(count, H, W, C)
    return _synthetic_handle(pixels, n_train, (H, W, C), seed)


# =============================================================================
# ПУБЛИЧНЫЕ НАБОРЫ
# =============================================================================


def _verify_files(folder, entries, dataset_name):
    """entries: [(filename, md5)]; missing -> DatasetMissingError, bad md5 -> DatasetChecksumError"""
    from torchvision.datasets.utils import check_integrity

    missing = [name for name, _ in entries if not (folder / name).is_file()]
    if missing:
        raise DatasetMissingError(
            f"{dataset_name}: files not found under {folder}",
            details={"missing": missing},
        )
    corrupted = [name for name, md5 in entries if not check_integrity(str(folder / name), md5)]
    if corrupted:
        raise DatasetChecksumError(
            f"{dataset_name}: checksum mismatch", details={"files": corrupted}
        )


def _load_cifar(name, root, download):
    from torchvision import datasets

    cls = datasets.CIFAR10 if name == "cifar10" else datasets.CIFAR100
    if download:
        cls(root=str(root), train=True, download=True)
        cls(root=str(root), train=False, download=True)
    _verify_files(Path(root) / cls.base_folder, cls.train_list + cls.test_list, name)

    train = cls(root=str(root), train=True, download=False)
    test = cls(root=str(root), train=False, download=False)
    return _to_unit(train.data), _to_unit(test.data)


def _load_svhn(root, download):
    from torchvision import datasets

    if download:
        for split in ("train", "test"):
            datasets.SVHN(root=str(root), split=split, download=True)
    entries = [
        (datasets.SVHN.split_list[split][1], datasets.SVHN.split_list[split][2])
        for split in ("train", "test")
    ]
    _verify_files(Path(root), entries, "svhn")

    splits = []
    for split in ("train", "test"):
        data = datasets.SVHN(root=str(root), split=split, download=False).data
        splits.append(torch.from_numpy(data).float() / 255.0)
    return splits[0], splits[1]


def _load_imagenet32(root):
    folder = Path(root) / "imagenet32"
    train_files = sorted(folder.glob("train_data_batch_*"))
    val_file = folder / "val_data"
    if not train_files or not val_file.is_file():
        raise DatasetMissingError(
            f"imagenet32: expected train_data_batch_* and val_data under {folder}"
        )

    def read(path):
        try:
            with open(path, "rb") as f:
                batch = pickle.load(f)
            data = np.asarray(batch["data"], dtype=np.uint8)
        except (pickle.UnpicklingError, EOFError, KeyError, ValueError) as e:
            raise DatasetChecksumError(f"imagenet32: unreadable batch {path.name}: {e}")
        return torch.from_numpy(data.reshape(-1, 3, 32, 32)).float() / 255.0

    train = torch.cat([read(p) for p in train_files])
    return train, read(val_file)


def load_dataset(
    name,
    root=None,
    seed=0,
    subsample_size=None,
    download=False,
    n_train=512,
    n_test=64,
    image_shape=(8, 8, 3),
):
    """
    Загрузка именованного набора данных

    Args:
        name: synthetic, cifar10, cifar100, svhn или imagenet32
        root: Каталог данных; для synthetic - каталог кэша
        seed: Зерно генерации и подвыборки
        subsample_size: Размер случайного подмножества train
        download: Разрешить загрузку через torchvision
        n_train, n_test, image_shape: Параметры синтетического набора

    Returns:
        DatasetHandle с изображениями в [0, 1]
    """
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}, expected one of {DATASETS}")

    if name == "synthetic":
        handle = None
        cache = None
        if root is not None:
            H, W, C = image_shape
            cache = Path(root) / f"synthetic_s{seed}_n{n_train}_t{n_test}_{H}x{W}x{C}.bin"
            if cache.is_file():
                handle = load_synthetic_cache(cache)
                logger.info(f"📦 Synthetic set loaded from cache: {cache}")
        if handle is None:
            handle = make_synthetic(n_train, image_shape, seed, n_test=n_test)
            if cache is not None:
                save_synthetic_cache(handle, cache)
    else:
        if root is None:
            raise ConfigError(f"{name}: dataset root is required")
        if not Path(root).is_dir() and not download:
            raise DatasetMissingError(f"{name}: dataset root does not exist: {root}")
        if name in ("cifar10", "cifar100"):
            train, test = _load_cifar(name, root, download)
        elif name == "svhn":
            train, test = _load_svhn(root, download)
        else:
            train, test = _load_imagenet32(root)
        handle = DatasetHandle(name, train, test, STANDARD_SHAPE, seed)

    if subsample_size is not None:
        handle = subsample(handle, subsample_size, seed)

    logger.info(f"✅ Dataset {handle.name}: {handle.split_sizes}, shape={handle.image_shape}")
    return handle


def subsample(handle, size, seed):
    """Seeded subset of the training split without duplicates"""
    if size > len(handle.train):
        raise ConfigError(
            f"cannot subsample {size} images from a training split of {len(handle.train)}"
        )
    generator = torch.Generator().manual_seed(seed)
    index = torch.randperm(len(handle.train), generator=generator)[:size]
    return DatasetHandle(
        name=handle.name,
        train=handle.train[index],
        test=handle.test,
        image_shape=handle.image_shape,
        seed=seed,
    )


# =============================================================================
# ПОРЯДОК БАТЧЕЙ
# =============================================================================


def batch_loader(images, batch_size, seed=0, epoch=0, shuffle=True):
    """Yield image batches in an order fixed by (seed, epoch)"""
    generator = torch.Generator().manual_seed(int(seed) * 1_000_003 + int(epoch))
    loader = DataLoader(
        TensorDataset(images),
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
    )
    for (batch,) in loader:
        yield batch


def load_for_experiment(experiment, name=None):
    """Dataset named by the experiment (or `name`, for cross-dataset evaluation)"""
    ds = experiment.dataset
    return load_dataset(
        name or ds.name,
        root=ds.root,
        seed=experiment.seed,
        subsample_size=ds.subsample if (name or ds.name) == ds.name else None,
        download=ds.download,
        n_train=ds.n_train,
        n_test=ds.n_test,
        image_shape=tuple(ds.image_shape),
    )
