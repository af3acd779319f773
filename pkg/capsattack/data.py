"""
Datasets: MNIST-style IDX files, the synthetic glyph generator, affine
transformations and saved adversarial sets.
"""
from __future__ import annotations

import gzip
import logging
import os
import struct
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from capsattack.config import DataConfig
from capsattack.errors import ConfigError, DomainError, FormatError, ShapeError
from capsattack.utils import example_rng, read_jsonl, write_jsonl

__all__ = (
    "Dataset",
    "Splits",
    "AdversarialSet",
    "read_idx",
    "save_idx",
    "load_idx",
    "synthetic_dataset",
    "load_splits",
    "affine_transform_image",
    "random_affine",
    "affine_dataset",
    "save_adversarial_set",
    "load_adversarial_set",
    "GLYPHS",
)

logger = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class Dataset:
    """
    Images of shape (n, c, h, w) in [0, 1] with one integer label each.

    Args:
        images:
            The pixels. (n, h, w) arrays get a channel axis.
        labels:
            Class indices in [0, num_classes).
        split:
            train, validation, test or a free-form tag.
        num_classes:
            M. Defaults to max(labels) + 1.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray, split: str = "train", num_classes: Optional[int] = None) -> None:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[:, None]
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4:
            raise ShapeError(f"images must be (n, c, h, w), got {images.shape}")
        if len(images) != len(labels):
            raise ShapeError(f"{len(images)} images but {len(labels)} labels")
        if images.size and (images.min() < 0 or images.max() > 1):
            raise DomainError("pixels must lie in [0, 1]")

        self.num_classes = int(num_classes) if num_classes is not None else int(labels.max()) + 1 if labels.size else 0
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DomainError(f"labels must lie in [0, {self.num_classes})")
        self.images = np.array(images, dtype=np.float32, order="C", copy=True)
        self.labels = labels.copy()
        self.split = split
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self):
        return len(self.labels)

    def __repr__(self):
        return f"<capsattack.Dataset split={self.split} n={len(self)} shape={self.image_shape}>"

    @property
    def image_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], split or self.split, self.num_classes)

    def head(self, n: Optional[int]) -> "Dataset":
        return self if n is None or n >= len(self) else self.subset(np.arange(n))


class Splits:
    def __init__(self, train: Dataset, validation: Dataset, test: Dataset) -> None:
        self.train = train
        self.validation = validation
        self.test = test

    def __getitem__(self, name: str) -> Dataset:
        if name not in ("train", "validation", "test"):
            raise KeyError(name)
        return getattr(self, name)

    def __repr__(self):
        return f"<capsattack.Splits train={len(self.train)} validation={len(self.validation)} test={len(self.test)}>"


def _open(path: str):
    with open(path, "rb") as f:
        compressed = f.read(2) == GZIP_MAGIC
    return gzip.open(path, "rb") if compressed else open(path, "rb")


def read_idx(path: str, magic: Optional[int] = None) -> np.ndarray:
    """
    Read one IDX file (plain or gzip-compressed) holding unsigned bytes.

    Raises:
        FormatError: on a bad magic number or a truncated payload.
    """
    try:
        with _open(path) as f:
            raw = f.read()
    except (OSError, EOFError) as e:
        if isinstance(e, FileNotFoundError):
            raise
        raise FormatError(f"{path}: cannot decompress ({e})") from None

    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if magic is not None and found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    if found >> 8 != 0x08:
        raise FormatError(f"{path}: only unsigned byte IDX files are supported (magic 0x{found:08x})")

    rank = found & 0xFF
    header = 4 + 4 * rank
    if rank < 1 or len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < count:
        raise FormatError(f"{path}: payload holds {len(raw) - header} bytes, expected {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def save_idx(array: np.ndarray, path: str) -> None:
    """Write unsigned bytes as an IDX file, gzip-compressed when `path` ends with .gz."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError("IDX files hold unsigned bytes")
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(array).tobytes())


def load_idx(images_path: str, labels_path: str, split: str = "train", num_classes: Optional[int] = None) -> Dataset:
    """Load an image/label IDX pair, scaling pixels by 1/255."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{images_path} holds {len(images)} images but {labels_path} {len(labels)} labels")
    return Dataset(images.astype(np.float32) / 255.0, labels, split, num_classes)


def _draw(canvas: np.ndarray, rows, cols, value: float) -> None:
    rows, cols = np.asarray(rows), np.asarray(cols)
    inside = (rows >= 0) & (rows < canvas.shape[0]) & (cols >= 0) & (cols < canvas.shape[1])
    canvas[rows[inside], cols[inside]] = value


def _bar(cy, cx, half, horizontal):
    span = np.arange(-half, half + 1)
    rows = np.concatenate([np.full_like(span, cy - 1), np.full_like(span, cy)])
    cols = np.concatenate([cx + span, cx + span])
    return (rows, cols) if horizontal else (cols - cx + cy, rows - cy + cx)


def _diagonal(cy, cx, half, anti):
    span = np.arange(-half, half + 1)
    direction = -1 if anti else 1
    rows = np.concatenate([cy + span, cy + span])
    cols = np.concatenate([cx + direction * span, cx + direction * span + 1])
    return rows, cols


def _join(*parts):
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _box(cy, cx, half):
    span = np.arange(-half, half + 1)
    top = (np.full_like(span, cy - half), cx + span)
    bottom = (np.full_like(span, cy + half), cx + span)
    left = (cy + span, np.full_like(span, cx - half))
    right = (cy + span, np.full_like(span, cx + half))
    return _join(top, bottom, left, right)


def _corner(cy, cx, half):
    span = np.arange(-half, half + 1)
    left = (cy + span, np.full_like(span, cx - half))
    bottom = (np.full_like(span, cy + half), cx + span)
    return _join(left, bottom)


GLYPHS = (
    ("horizontal-bar", lambda cy, cx, h: _bar(cy, cx, h, True)),
    ("vertical-bar", lambda cy, cx, h: _bar(cy, cx, h, False)),
    ("diagonal", lambda cy, cx, h: _diagonal(cy, cx, h, False)),
    ("anti-diagonal", lambda cy, cx, h: _diagonal(cy, cx, h, True)),
    ("plus", lambda cy, cx, h: _join(_bar(cy, cx, h, True), _bar(cy, cx, h, False))),
    ("cross", lambda cy, cx, h: _join(_diagonal(cy, cx, h, False), _diagonal(cy, cx, h, True))),
    ("box", _box),
    ("corner", _corner),
)

JITTER = 2
NOISE = 0.05


def synthetic_dataset(classes: int = 8, per_class: int = 100, size: int = 16, seed: int = 0, split: str = "train") -> Dataset:
    """
    Glyphs (bars, diagonals, crosses, boxes) with up to 2 pixels of positional
    jitter, random intensity and Gaussian pixel noise of standard deviation 0.05.
    """
    if not 1 <= classes <= len(GLYPHS):
        raise ConfigError(f"the synthetic generator draws between 1 and {len(GLYPHS)} classes, got {classes}")
    if size < 8:
        raise ConfigError("synthetic images need at least 8x8 pixels")

    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = np.zeros((len(labels), 1, size, size), dtype=np.float32)
    half = max(2, size // 2 - 4)

    for k, label in enumerate(labels):
        dy, dx = rng.integers(-JITTER, JITTER + 1, size=2)
        intensity = rng.uniform(0.7, 1.0)
        rows, cols = GLYPHS[label][1](size // 2 + dy, size // 2 + dx, half)
        _draw(images[k, 0], rows, cols, intensity)

    images += rng.normal(0.0, NOISE, size=images.shape).astype(np.float32)
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels, split, classes)


def load_splits(config: DataConfig, seed: int = 0) -> Splits:
    """
    Build train, validation and test splits.

    Synthetic splits come from independent streams derived from `seed`. For an
    IDX directory the validation split is the tail `validation_fraction` of the
    training files.
    """
    if config.is_synthetic:
        parts = []
        for code, (split, per_class) in enumerate(
            (("train", config.train_per_class), ("validation", config.validation_per_class), ("test", config.test_per_class))
        ):
            split_seed = int(np.random.SeedSequence([int(seed), code]).generate_state(1)[0])
            parts.append(synthetic_dataset(config.classes, per_class, config.size, split_seed, split))
        return Splits(*parts)

    def find(name: str) -> str:
        for candidate in (name, name + ".gz"):
            path = os.path.join(config.source, candidate)
            if os.path.exists(path):
                return path
        raise FileNotFoundError(os.path.join(config.source, name))

    train = load_idx(*(find(n) for n in IDX_FILES["train"]), split="train")
    test = load_idx(*(find(n) for n in IDX_FILES["test"]), split="test", num_classes=train.num_classes)
    cut = len(train) - int(round(config.validation_fraction * len(train)))
    logger.info("loaded %d training and %d test images from %s", len(train), len(test), config.source)
    return Splits(
        train.subset(np.arange(cut), "train"),
        train.subset(np.arange(cut, len(train)), "validation"),
        test,
    )


def affine_transform_image(image: np.ndarray, translate: Sequence[float] = (0, 0), angle: float = 0.0) -> np.ndarray:
    """
    Rotate `image` (c, h, w) by `angle` degrees about its centre, then shift it
    by `translate` = (rows, cols) pixels. Bilinear interpolation, zero fill.
    """
    image = np.asarray(image, dtype=np.float32)
    if not angle and not any(translate):
        return image.copy()
    theta = np.deg2rad(angle)
    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    center = (np.array(image.shape[-2:], dtype=np.float64) - 1) / 2
    inverse = rotation.T
    offset = center - inverse @ (center + np.asarray(translate, dtype=np.float64))

    out = np.empty_like(image)
    for c in range(image.shape[0]):
        out[c] = ndimage.affine_transform(image[c], inverse, offset=offset, order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0)


def random_affine(image: np.ndarray, max_translate_px: int, max_rotate_deg: float, rng: np.random.Generator) -> np.ndarray:
    """
    Translate by a uniform integer in [-t, t] pixels per axis and rotate by a
    uniform angle in [-d, d] degrees.
    """
    if max_translate_px < 0 or max_rotate_deg < 0:
        raise ConfigError("affine ranges must be non-negative")
    shift = rng.integers(-int(max_translate_px), int(max_translate_px) + 1, size=2)
    angle = rng.uniform(-max_rotate_deg, max_rotate_deg) if max_rotate_deg else 0.0
    return affine_transform_image(image, shift, angle)


def affine_dataset(dataset: Dataset, max_translate_px: int, max_rotate_deg: float, seed: int = 0) -> Dataset:
    """Transform every image with its own stream, `seed XOR index`."""
    images = np.empty_like(dataset.images)
    for i, image in enumerate(dataset.images):
        images[i] = random_affine(image, max_translate_px, max_rotate_deg, example_rng(seed, i))
    return Dataset(images, dataset.labels, f"{dataset.split}-affine", dataset.num_classes)


class AdversarialSet:
    """
    Adversarial images saved by the attack command: the images, their
    perturbations, true labels and the per-example result records.
    """

    def __init__(self, adversarial: np.ndarray, deltas: np.ndarray, labels: np.ndarray, records: List[dict]) -> None:
        if not len(adversarial) == len(deltas) == len(labels) == len(records):
            raise FormatError("adversarial set arrays and records differ in length")
        self.adversarial = adversarial
        self.deltas = deltas
        self.labels = labels
        self.records = records

    def __len__(self):
        return len(self.labels)

    def __repr__(self):
        return f"<capsattack.AdversarialSet n={len(self)}>"

    @property
    def clean(self) -> np.ndarray:
        return np.clip(self.adversarial - self.deltas, 0.0, 1.0)

    @property
    def success(self) -> np.ndarray:
        return np.array([bool(r["success"]) for r in self.records], dtype=bool)

    @property
    def predictions(self) -> np.ndarray:
        return np.array([int(r["prediction"]) for r in self.records], dtype=np.int64)

    def successful(self) -> "AdversarialSet":
        keep = self.success
        return AdversarialSet(
            self.adversarial[keep],
            self.deltas[keep],
            self.labels[keep],
            [r for r, k in zip(self.records, keep) if k],
        )


ADVERSARIAL_FILES: Dict[str, str] = {
    "adversarial": "adversarial.npy",
    "deltas": "deltas.npy",
    "labels": "labels.npy",
    "records": "results.jsonl",
}


def save_adversarial_set(results, directory: str) -> None:
    """Write attack results as .npy arrays plus one JSON record per line."""
    os.makedirs(directory, exist_ok=True)
    if results:
        adversarial = np.stack([r.adversarial for r in results])
        deltas = np.stack([r.delta for r in results])
    else:
        adversarial = deltas = np.zeros((0,), dtype=np.float32)
    np.save(os.path.join(directory, ADVERSARIAL_FILES["adversarial"]), adversarial)
    np.save(os.path.join(directory, ADVERSARIAL_FILES["deltas"]), deltas)
    np.save(os.path.join(directory, ADVERSARIAL_FILES["labels"]), np.array([r.label for r in results], dtype=np.int64))
    write_jsonl((r.to_dict() for r in results), os.path.join(directory, ADVERSARIAL_FILES["records"]))


def load_adversarial_set(directory: str) -> AdversarialSet:
    paths = {key: os.path.join(directory, name) for key, name in ADVERSARIAL_FILES.items()}
    missing = [path for path in paths.values() if not os.path.exists(path)]
    if missing:
        raise FormatError(f"not an adversarial set directory, missing {', '.join(missing)}")
    return AdversarialSet(
        np.load(paths["adversarial"]),
        np.load(paths["deltas"]),
        np.load(paths["labels"]),
        read_jsonl(paths["records"]),
    )
