"""
Dataset Sources

In-memory image sources for training and evaluation: CIFAR-10 / CIFAR-100 binary
record files, seeded synthetic class blobs, and folders of raw numpy tensors. Batches
can be produced inline (deterministic reference path) or by a background thread
feeding a bounded queue.
"""

import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ConfigError, DatasetFormatError

logger = logging.getLogger(__name__)

CIFAR_MEAN = (125.3, 123.0, 113.9)
CIFAR_STD = (63.0, 62.1, 66.7)
CIFAR_SIDE = 32
CIFAR_PIXELS = 3 * CIFAR_SIDE * CIFAR_SIDE
RECORD_BYTES = {"cifar10": 1 + CIFAR_PIXELS, "cifar100": 2 + CIFAR_PIXELS}

Batch = Tuple[np.ndarray, np.ndarray]


@dataclass
class DatasetSource:
    """Normalized (N, C, H, W) float32 images with integer labels."""
    kind: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    augment: bool = False
    mean: Tuple[float, ...] = field(default_factory=tuple)
    std: Tuple[float, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def resolution(self) -> int:
        return int(self.images.shape[-1])

    def subset(self, count: int) -> "DatasetSource":
        return DatasetSource(self.kind, self.images[:count], self.labels[:count], self.num_classes,
                             self.augment, self.mean, self.std)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None,
                shuffle: bool = True) -> Iterator[Batch]:
        """Yield (images, labels) batches; augmentation draws from the same rng."""
        rng = rng or np.random.default_rng(0)
        order = rng.permutation(len(self)) if shuffle else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            x = self.images[idx]
            if self.augment:
                x = augment_batch(x, rng)
            yield x, self.labels[idx]

    def prefetch(self, batch_size: int, rng: Optional[np.random.Generator] = None, shuffle: bool = True,
                 depth: int = 2) -> Iterator[Batch]:
        """Same batches as :meth:`batches`, produced by a background thread into a bounded queue."""
        q: "queue.Queue" = queue.Queue(maxsize=max(depth, 1))
        done = object()
        stop = threading.Event()
        failure: List[BaseException] = []

        def offer(item) -> bool:
            while not stop.is_set():
                try:
                    q.put(item, timeout=0.1)
                    return True
                except queue.Full:
                    continue
            return False

        def produce():
            try:
                for batch in self.batches(batch_size, rng, shuffle):
                    if not offer(batch):
                        return
            except BaseException as e:  # surfaced on the consumer side
                failure.append(e)
            finally:
                offer(done)

        worker = threading.Thread(target=produce, name="batch-producer", daemon=True)
        worker.start()
        try:
            while True:
                item = q.get()
                if item is done:
                    break
                yield item
        finally:
            # releases a producer blocked on a full queue
            stop.set()
            worker.join()
        if failure:
            raise failure[0]


def normalize(pixels: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    """(pixel - mean) / std per channel, with mean and std in pixel units."""
    mean = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((pixels.astype(np.float32) - mean) / std).astype(np.float32)


def augment_batch(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, take a random crop of the original size, flip half horizontally."""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def _cifar_files(path: Path, variant: str, split: str) -> List[Path]:
    if path.is_file():
        return [path]
    if variant == "cifar100":
        names = ["train.bin"] if split == "train" else ["test.bin"]
    else:
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    files = [path / n for n in names if (path / n).exists()]
    if not files:
        raise DatasetFormatError(f"no {variant} {split} files under {path}")
    return files


def load_cifar(path: Union[str, Path], variant: str = "cifar10", split: str = "train", augment: bool = False,
               mean: Sequence[float] = CIFAR_MEAN, std: Sequence[float] = CIFAR_STD,
               limit: Optional[int] = None) -> DatasetSource:
    """
    Read CIFAR binary records.

    CIFAR-10 records are 1 label byte + 3072 pixel bytes (R, G, B planes, row-major);
    CIFAR-100 records carry a coarse and a fine label byte, the fine label is used.

    Args:
        path: A record file or the extracted dataset directory
        variant: 'cifar10' or 'cifar100'
        split: 'train' or 'test' (directory inputs only)
        augment: Pad-4 random crop + horizontal flip when batching
        mean: Per-channel mean in pixel units
        std: Per-channel std in pixel units
        limit: Keep only the first ``limit`` records

    Returns:
        DatasetSource with normalized images
    """
    if variant not in RECORD_BYTES:
        raise DatasetFormatError(f"unknown CIFAR variant: {variant}")
    record = RECORD_BYTES[variant]
    chunks = []
    for file in _cifar_files(Path(path), variant, split):
        raw = np.fromfile(file, dtype=np.uint8)
        if raw.size == 0 or raw.size % record:
            raise DatasetFormatError(
                f"{file}: size {raw.size} is not a positive multiple of the {record}-byte record"
            )
        chunks.append(raw.reshape(-1, record))
    records = np.concatenate(chunks)
    if limit is not None:
        records = records[:limit]

    labels = records[:, record - CIFAR_PIXELS - 1].astype(np.int64)
    pixels = records[:, record - CIFAR_PIXELS:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    num_classes = 100 if variant == "cifar100" else 10
    logger.info(f"📦 Loaded {len(labels)} {variant} records from {path}")
    return DatasetSource(f"{variant}_binary", normalize(pixels, mean, std), labels, num_classes, augment,
                         tuple(mean), tuple(std))


def synthetic_blobs(count: int = 200, resolution: int = 8, num_classes: int = 2, channels: int = 3,
                    noise: float = 1.0, seed: int = 0) -> DatasetSource:
    """
    Separable toy task: each class shifts every channel by a fixed offset, plus Gaussian noise.

    Two classes use offsets +[1, -1, 0.5] and -[1, -1, 0.5]; more classes draw unit
    offset directions from the seeded generator.
    """
    rng = np.random.default_rng(seed)
    if num_classes == 2 and channels == 3:
        base = np.array([1.0, -1.0, 0.5])
        offsets = np.stack([base, -base])
    else:
        offsets = rng.standard_normal((num_classes, channels))
        offsets /= np.linalg.norm(offsets, axis=1, keepdims=True)
    labels = rng.permutation(np.arange(count) % num_classes).astype(np.int64)
    images = offsets[labels][:, :, None, None] + noise * rng.standard_normal((count, channels, resolution, resolution))
    return DatasetSource("synthetic_blobs", images.astype(np.float32), labels, num_classes)


def load_tensor_folder(path: Union[str, Path], num_classes: Optional[int] = None) -> DatasetSource:
    """Read ``images.npy`` (N, C, H, W) and ``labels.npy`` (N,) from a folder."""
    path = Path(path)
    try:
        images = np.load(path / "images.npy")
        labels = np.load(path / "labels.npy").astype(np.int64)
    except (OSError, ValueError) as e:
        raise DatasetFormatError(f"cannot read tensors from {path}: {e}") from e
    if images.ndim != 4 or labels.shape != (images.shape[0],):
        raise DatasetFormatError(f"{path}: expected images (N, C, H, W) and labels (N,), "
                                 f"got {images.shape} and {labels.shape}")
    classes = num_classes or int(labels.max()) + 1
    return DatasetSource("folder_of_raw_tensors", images.astype(np.float32), labels, classes)


def open_source(spec: dict, seed: int = 0) -> DatasetSource:
    """Build a DatasetSource from a run-config ``dataset`` section."""
    spec = dict(spec)
    kind = spec.pop("kind", "synthetic_blobs")
    try:
        return _open(kind, spec, seed)
    except TypeError as e:
        raise ConfigError(f"bad dataset options for {kind}: {e}") from e


def _open(kind: str, spec: dict, seed: int) -> DatasetSource:
    if kind in ("cifar10_binary", "cifar100_binary", "cifar10", "cifar100", "folder_of_raw_tensors") \
            and "path" not in spec:
        raise ConfigError(f"dataset kind {kind} needs a 'path'")
    if kind in ("cifar10_binary", "cifar100_binary", "cifar10", "cifar100"):
        variant = "cifar100" if kind.startswith("cifar100") else "cifar10"
        return load_cifar(spec.pop("path"), variant=variant, **spec)
    if kind == "synthetic_blobs":
        spec.setdefault("seed", seed)
        return synthetic_blobs(**spec)
    if kind == "folder_of_raw_tensors":
        return load_tensor_folder(spec.pop("path"), **spec)
    raise DatasetFormatError(f"unknown dataset kind: {kind}")
