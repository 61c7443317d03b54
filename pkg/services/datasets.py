"""
Dataset Ingestion
Loads CIFAR-10 binary batches, image folders and a synthetic pattern corpus
into [0, 1] tensors with deterministic subsetting and splitting.

Split rule: the split fractions partition the training pool (train / val / test);
sources that ship their own test partition (CIFAR-10 test_batch.bin, an image
folder with a test/ subdirectory, the synthetic held-out draw) add it to the
test split.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset

from config import Config
from config.dependencies import require_inputs
from config.exceptions import ConfigurationError, CorruptRecordError, ValidationError
from config.schema import DatasetSpec

logger = logging.getLogger(__name__)

CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck")
CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILE = "test_batch.bin"
CIFAR10_RECORD_BYTES = 1 + 3 * 32 * 32
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ImageBatch:
    """
    Images in [0, 1] with integer class labels.

    Used both for minibatches and for whole splits.
    """
    pixels: torch.Tensor
    labels: torch.Tensor
    num_classes: Optional[int] = None
    ids: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.pixels.dim() != 4:
            raise ValidationError(f"pixels must be rank 4 (B, C, H, W), got shape {tuple(self.pixels.shape)}")
        if self.labels.dim() != 1 or self.labels.shape[0] != self.pixels.shape[0]:
            raise ValidationError(
                f"labels must be a vector of length {self.pixels.shape[0]}, got shape {tuple(self.labels.shape)}")
        if self.pixels.numel() > 0:
            if not torch.isfinite(self.pixels).all():
                raise ValidationError("pixels contain non-finite values")
            lo, hi = float(self.pixels.min()), float(self.pixels.max())
            if lo < 0.0 or hi > 1.0:
                raise ValidationError(f"pixels must lie in [0, 1], got range [{lo}, {hi}]")
        if self.labels.numel() > 0:
            if int(self.labels.min()) < 0:
                raise ValidationError(f"labels must be >= 0, got {int(self.labels.min())}")
            if self.num_classes is not None and int(self.labels.max()) >= self.num_classes:
                raise ValidationError(
                    f"label {int(self.labels.max())} out of range for {self.num_classes} classes")
        if self.ids is None:
            self.ids = torch.arange(self.pixels.shape[0])

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.pixels.shape[1:])

    def with_pixels(self, pixels: torch.Tensor) -> "ImageBatch":
        """Same labels and ids, new pixels (e.g. after an attack)."""
        return ImageBatch(pixels, self.labels, self.num_classes, self.ids)

    def to(self, device) -> "ImageBatch":
        return ImageBatch(self.pixels.to(device), self.labels.to(device), self.num_classes, self.ids)

    def subset(self, indices) -> "ImageBatch":
        indices = torch.as_tensor(indices, dtype=torch.long)
        return ImageBatch(self.pixels[indices], self.labels[indices], self.num_classes, self.ids[indices])

    def head(self, n: Optional[int]) -> "ImageBatch":
        if n is None or n >= len(self):
            return self
        return self.subset(torch.arange(n))

    def batches(self, batch_size: int, shuffle: bool = False, seed: int = 0,
                drop_last: bool = False) -> Iterator["ImageBatch"]:
        """
        Iterate minibatches. Shuffling is driven by a generator seeded with ``seed``.
        """
        generator = torch.Generator().manual_seed(seed) if shuffle else None
        loader = DataLoader(TensorDataset(self.pixels, self.labels, self.ids), batch_size=batch_size,
                            shuffle=shuffle, generator=generator, drop_last=drop_last)
        for pixels, labels, ids in loader:
            yield ImageBatch(pixels, labels, self.num_classes, ids)


@dataclass
class SplitDataset:
    train: ImageBatch
    val: ImageBatch
    test: ImageBatch
    class_names: List[str]
    channel_mean: Optional[Tuple[float, ...]] = None
    channel_std: Optional[Tuple[float, ...]] = None
    spec: Optional[DatasetSpec] = field(default=None, repr=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def summary(self) -> dict:
        return {
            "train": len(self.train),
            "val": len(self.val),
            "test": len(self.test),
            "classes": list(self.class_names),
            "image_shape": list(self.train.image_shape),
        }


# ============================================================
# PUBLIC API
# ============================================================

def load_dataset(spec: DatasetSpec) -> SplitDataset:
    """
    Load a labeled image collection according to ``spec``.

    Args:
        spec: Dataset specification

    Returns:
        SplitDataset with pixels in [0, 1] and labels remapped to a dense range

    Raises:
        DependencyError: If the source files do not exist
        CorruptRecordError: If a record cannot be parsed (names file and offset)
        ConfigurationError: If class_filter names a class absent from the data
    """
    if spec.source == "synthetic":
        pool, native_test, class_names = _load_synthetic(spec)
    elif spec.source == "cifar10_binary":
        pool, native_test, class_names = _load_cifar10(spec)
    else:
        pool, native_test, class_names = _load_image_folder(spec)

    pool, native_test, class_names = _apply_class_filter(pool, native_test, class_names, spec.class_filter)
    num_classes = len(class_names)

    rng = np.random.default_rng(spec.seed)
    pool = _limit_per_class(pool, spec.per_class_limit, rng)
    if native_test is not None:
        native_test = _limit_per_class(native_test, spec.test_per_class_limit, rng)

    train_idx, val_idx, test_idx = _split_indices(len(pool[1]), spec, rng)
    pixels, labels = pool
    train = _to_batch(pixels[train_idx], labels[train_idx], num_classes)
    val = _to_batch(pixels[val_idx], labels[val_idx], num_classes)
    test_pixels, test_labels = pixels[test_idx], labels[test_idx]
    if native_test is not None:
        test_pixels = np.concatenate([test_pixels, native_test[0]])
        test_labels = np.concatenate([test_labels, native_test[1]])
    test = _to_batch(test_pixels, test_labels, num_classes)

    mean = std = None
    if spec.normalization == "per_channel_mean_std":
        mean, std = channel_statistics(train.pixels)

    dataset = SplitDataset(train, val, test, list(class_names), mean, std, spec)
    logger.info(f"Loaded {spec.source} dataset: {dataset.summary()}")
    return dataset


def make_synthetic(num_classes: int, samples_per_class: int, image_shape: Sequence[int],
                   seed: int, noise_std: float = 0.1) -> ImageBatch:
    """
    Class-conditional pattern corpus: one distinct mean image per class plus
    Gaussian noise, clipped to [0, 1]. Fully determined by ``seed``.

    With ``noise_std = 0`` every image equals its class mean, so a nearest-mean
    classifier is exact.
    """
    pixels, labels = _synthetic_arrays(num_classes, samples_per_class, tuple(image_shape), seed, noise_std)
    return _to_batch(pixels, labels, num_classes)


def channel_statistics(pixels: torch.Tensor) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Per-channel mean and std of a (B, C, H, W) tensor."""
    flat = pixels.transpose(0, 1).reshape(pixels.shape[1], -1).double()
    mean = tuple(float(v) for v in flat.mean(dim=1))
    std = tuple(max(float(v), 1e-6) for v in flat.std(dim=1))
    return mean, std


def load_image_directory(directory: Union[str, Path],
                         image_size: Optional[Tuple[int, int]] = None) -> Tuple[torch.Tensor, List[Path]]:
    """
    Load every image under ``directory`` (recursively) as an RGB tensor in [0, 1].

    Returns:
        (pixels of shape (N, 3, H, W), list of source paths in sorted order)
    """
    from torchvision.io import ImageReadMode, read_image
    from torchvision.transforms.functional import resize

    directory = Path(directory)
    require_inputs("load_image_directory", directories=[directory])
    paths = sorted(p for p in directory.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ValidationError(f"No images found under {directory}")

    images = []
    for p in paths:
        try:
            img = read_image(str(p), mode=ImageReadMode.RGB)
        except RuntimeError as e:
            raise CorruptRecordError(p, 0, f"cannot decode image ({e})") from e
        if image_size is not None:
            img = resize(img, list(image_size), antialias=True)
        images.append(img)
    shapes = {tuple(img.shape) for img in images}
    if len(shapes) != 1:
        raise ValidationError(f"Images under {directory} have different sizes {sorted(shapes)}; set image_size")
    return torch.stack(images).float() / 255.0, paths


# ============================================================
# SOURCES
# ============================================================

def _load_synthetic(spec: DatasetSpec):
    syn = spec.synthetic
    per_class_total = syn.samples_per_class + syn.test_samples_per_class
    pixels, labels = _synthetic_arrays(syn.num_classes, per_class_total, syn.image_shape, spec.seed, syn.noise_std)

    # Held-out draw: the last test_samples_per_class items of every class
    is_test = np.zeros(len(labels), dtype=bool)
    for c in range(syn.num_classes):
        members = np.flatnonzero(labels == c)
        if syn.test_samples_per_class:
            is_test[members[-syn.test_samples_per_class:]] = True
    pool = (pixels[~is_test], labels[~is_test])
    native_test = (pixels[is_test], labels[is_test]) if syn.test_samples_per_class else None
    class_names = [f"pattern_{c}" for c in range(syn.num_classes)]
    return pool, native_test, class_names


def _synthetic_arrays(num_classes: int, samples_per_class: int, image_shape: Tuple[int, int, int],
                      seed: int, noise_std: float):
    rng = np.random.default_rng(seed)
    means = rng.uniform(0.2, 0.8, size=(num_classes,) + tuple(image_shape))
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.normal(0.0, noise_std, size=(len(labels),) + tuple(image_shape)) if noise_std > 0 else 0.0
    pixels = np.clip(means[labels] + noise, 0.0, 1.0).astype(np.float32)
    return pixels, labels.astype(np.int64)


def _load_cifar10(spec: DatasetSpec):
    root = Path(spec.root) if spec.root else Config.CIFAR10_DIR
    files = [root / name for name in CIFAR10_TRAIN_FILES + (CIFAR10_TEST_FILE,)]
    require_inputs("load_dataset[cifar10_binary]", files=files)

    train_parts = [_read_cifar10_file(root / name) for name in CIFAR10_TRAIN_FILES]
    pool = (np.concatenate([p for p, _ in train_parts]), np.concatenate([l for _, l in train_parts]))
    native_test = _read_cifar10_file(root / CIFAR10_TEST_FILE)
    return pool, native_test, list(CIFAR10_CLASSES)


def _read_cifar10_file(path: Path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR10_RECORD_BYTES != 0:
        offset = (raw.size // CIFAR10_RECORD_BYTES) * CIFAR10_RECORD_BYTES
        raise CorruptRecordError(path, offset, f"truncated record ({raw.size - offset} trailing bytes)")
    records = raw.reshape(-1, CIFAR10_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= len(CIFAR10_CLASSES))
    if bad.size:
        index = int(bad[0])
        raise CorruptRecordError(path, index * CIFAR10_RECORD_BYTES,
                                 f"label byte {int(labels[index])} out of range")
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return pixels, labels


def _load_image_folder(spec: DatasetSpec):
    from torchvision import datasets, transforms

    if not spec.root:
        raise ConfigurationError("dataset.root is required for source image_folder")
    root = Path(spec.root)
    require_inputs("load_dataset[image_folder]", directories=[root])

    steps = [transforms.Resize(list(spec.image_size))] if spec.image_size else []
    transform = transforms.Compose(steps + [transforms.ToTensor()])

    train_root = root / "train" if (root / "train").is_dir() else root
    pool_folder = datasets.ImageFolder(str(train_root), transform=transform)
    pool = _materialize(pool_folder)
    native_test = None
    if (root / "test").is_dir():
        test_folder = datasets.ImageFolder(str(root / "test"), transform=transform)
        if test_folder.classes != pool_folder.classes:
            raise ValidationError(f"test/ classes {test_folder.classes} differ from train classes {pool_folder.classes}")
        native_test = _materialize(test_folder)
    return pool, native_test, list(pool_folder.classes)


def _materialize(folder):
    pixels, labels = [], []
    for index in range(len(folder)):
        try:
            img, label = folder[index]
        except Exception as e:
            raise CorruptRecordError(folder.samples[index][0], 0, f"cannot decode image ({e})") from e
        pixels.append(img.numpy())
        labels.append(label)
    shapes = {p.shape for p in pixels}
    if len(shapes) != 1:
        raise ValidationError(f"Images have different sizes {sorted(shapes)}; set dataset.image_size")
    return np.stack(pixels).astype(np.float32), np.asarray(labels, dtype=np.int64)


# ============================================================
# SUBSETTING
# ============================================================

def _apply_class_filter(pool, native_test, class_names, class_filter):
    if class_filter is None:
        return pool, native_test, class_names

    selected = []
    for entry in class_filter:
        if isinstance(entry, str):
            if entry not in class_names:
                raise ConfigurationError(f"class_filter names class {entry!r} absent from the dataset ({class_names})")
            selected.append(class_names.index(entry))
        else:
            if not 0 <= entry < len(class_names) or not np.any(pool[1] == entry):
                raise ConfigurationError(f"class_filter names class {entry} absent from the dataset")
            selected.append(int(entry))

    remap = {old: new for new, old in enumerate(selected)}

    def _filter(part):
        pixels, labels = part
        keep = np.isin(labels, selected)
        return pixels[keep], np.asarray([remap[int(l)] for l in labels[keep]], dtype=np.int64)

    pool = _filter(pool)
    native_test = _filter(native_test) if native_test is not None else None
    return pool, native_test, [class_names[i] for i in selected]


def _limit_per_class(part, limit: Optional[int], rng: np.random.Generator):
    pixels, labels = part
    order = rng.permutation(len(labels))
    if limit is not None:
        kept, counts = [], {}
        for index in order:
            label = int(labels[index])
            if counts.get(label, 0) < limit:
                counts[label] = counts.get(label, 0) + 1
                kept.append(index)
        order = np.asarray(kept, dtype=np.int64)
    return pixels[order], labels[order]


def _split_indices(n: int, spec: DatasetSpec, rng: np.random.Generator):
    order = rng.permutation(n)
    n_val = int(round(n * spec.split.val))
    n_test = int(round(n * spec.split.test))
    n_train = n - n_val - n_test
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def _to_batch(pixels: np.ndarray, labels: np.ndarray, num_classes: int) -> ImageBatch:
    return ImageBatch(torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)),
                      torch.from_numpy(np.ascontiguousarray(labels, dtype=np.int64)), num_classes)
