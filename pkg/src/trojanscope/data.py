"""Labeled image sets, MNIST-style IDX files, and the synthetic shapes dataset.

Images are stored channels-first, ``[n, C, H, W]``, float32 in [0, 1].
"""
from __future__ import annotations

import json
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, IdxFormatError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
SPLIT_TAGS = ("train", "validation", "trigger_eval")


@dataclass
class LabeledSet:
    images: np.ndarray
    labels: np.ndarray
    split_tag: str = "train"
    # original labels of stamped samples (trigger_eval only)
    source_labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.split_tag not in SPLIT_TAGS:
            raise DatasetError(f"unknown split tag {self.split_tag!r}")
        if self.source_labels is not None:
            self.source_labels = np.asarray(self.source_labels, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, split_tag=None):
        src = None if self.source_labels is None else self.source_labels[idx]
        return LabeledSet(self.images[idx], self.labels[idx], split_tag or self.split_tag, src, dict(self.meta))

    def check_labels(self, class_count):
        if len(self) and (self.labels.min() < 0 or self.labels.max() >= class_count):
            raise DatasetError(f"labels must lie in [0, {class_count})")


# -- IDX ---------------------------------------------------------------------

def _read_header(buf, expected_magic, ndim, path):
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: file too short for IDX magic")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(buf) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: file too short for IDX header")
    dims = struct.unpack(">" + "I" * ndim, buf[4:4 + 4 * ndim])
    body = buf[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)):
        raise IdxFormatError(f"{path}: expected {int(np.prod(dims))} data bytes for dims {dims}, found {len(body)}")
    return dims, body


def read_idx_images(path):
    buf = Path(path).read_bytes()
    dims, body = _read_header(buf, IDX_IMAGE_MAGIC, 3, path)
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def read_idx_labels(path):
    buf = Path(path).read_bytes()
    dims, body = _read_header(buf, IDX_LABEL_MAGIC, 1, path)
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGE_MAGIC, *images.shape) + images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABEL_MAGIC, len(labels)) + labels.tobytes())


def from_idx(images_path, labels_path):
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    return LabeledSet(images[:, None].astype(np.float32) / 255.0, labels.astype(np.int64))


def split(data, validation_fraction=0.1, seed=0):
    """Seeded random train/validation split."""
    order = np.random.default_rng(seed).permutation(len(data))
    n_val = int(round(validation_fraction * len(data)))
    return data.subset(np.sort(order[n_val:]), "train"), data.subset(np.sort(order[:n_val]), "validation")


# -- synthetic shapes --------------------------------------------------------

def _glyph_masks(size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    y, x = yy - c, xx - c
    r = size / 2.0
    ring = np.hypot(x, y)
    disk = ring <= r * 0.8
    ring_mask = np.abs(ring - r * 0.7) <= r * 0.2
    box = np.maximum(np.abs(x), np.abs(y))
    hollow_square = (box <= r * 0.85) & (box >= r * 0.5)
    plus = (np.abs(x) <= r * 0.25) | (np.abs(y) <= r * 0.25)
    x_cross = (np.abs(x - y) <= r * 0.3) | (np.abs(x + y) <= r * 0.3)
    triangle = (y >= -r * 0.8) & (np.abs(x) <= (y + r * 0.8) * 0.55)
    v_bars = (np.abs(y) <= r * 0.9) & (np.abs(np.mod(x + r, r * 0.9) - r * 0.45) <= r * 0.2)
    h_bars = (np.abs(x) <= r * 0.9) & (np.abs(np.mod(y + r, r * 0.9) - r * 0.45) <= r * 0.2)
    ell = (((np.abs(x + r * 0.5) <= r * 0.25) & (np.abs(y) <= r * 0.85))
           | ((np.abs(y - r * 0.6) <= r * 0.25) & (np.abs(x) <= r * 0.85)))
    tee = (((np.abs(y + r * 0.6) <= r * 0.25) & (np.abs(x) <= r * 0.85))
           | ((np.abs(x) <= r * 0.25) & (np.abs(y) <= r * 0.85)))
    # the first five stay distinguishable when a trigger covers part of the glyph
    masks = [disk, x_cross, triangle, h_bars, ell, ring_mask, plus, hollow_square, v_bars, tee]
    return [m.astype(np.float32) for m in masks]


MAX_SHAPE_CLASSES = 10


def synthetic_shapes(n, class_count=5, image_size=28, channels=1, seed=0,
                     background=0.1, glyph_frac=(0.45, 0.7), jitter=4, intensity=(0.85, 1.0)):
    """Seeded glyph dataset: one parametric glyph per class drawn on a noise background.

    Each image gets a uniform noise background in [0, ``background``], one
    glyph scaled to ``glyph_frac`` of the image side and shifted by up to
    ``jitter`` pixels, and ``intensity`` drawn uniformly (a random colour for
    3-channel images). Classes are balanced up to rounding.
    """
    if not 2 <= class_count <= MAX_SHAPE_CLASSES:
        raise DatasetError(f"class_count must be in [2, {MAX_SHAPE_CLASSES}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % class_count
    rng.shuffle(labels)
    images = rng.uniform(0.0, background, size=(n, channels, image_size, image_size)).astype(np.float32)
    sizes = list(range(int(glyph_frac[0] * image_size), int(glyph_frac[1] * image_size) + 1))
    masks = {s: _glyph_masks(s) for s in sizes}
    for i in range(n):
        s = sizes[rng.integers(len(sizes))]
        glyph = masks[s][labels[i]]
        lo = (image_size - s) // 2
        top = int(np.clip(lo + rng.integers(-jitter, jitter + 1), 0, image_size - s))
        left = int(np.clip(lo + rng.integers(-jitter, jitter + 1), 0, image_size - s))
        if channels == 1:
            colour = np.array([rng.uniform(*intensity)], dtype=np.float32)
        else:
            colour = rng.uniform(intensity[0] / 2, intensity[1], size=channels).astype(np.float32)
        patch = images[i, :, top:top + s, left:left + s]
        images[i, :, top:top + s, left:left + s] = np.where(glyph > 0, colour[:, None, None], patch)
    return LabeledSet(images, labels, "train", meta={"source": "shapes", "class_count": class_count,
                                                      "seed": seed})


# -- internal on-disk dataset ------------------------------------------------

def save_dataset(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # np.savez stamps members with the wall clock; a fixed date keeps files byte-identical
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in (("images", data.images), ("labels", data.labels)):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)
    return path


def load_dataset(path, split_tag="train"):
    path = Path(path)
    try:
        with np.load(path) as z:
            return LabeledSet(z["images"], z["labels"], split_tag)
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from None


def write_dataset_dir(out_dir, train, validation, info):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(out_dir / "train.npz", train)
    save_dataset(out_dir / "validation.npz", validation)
    info = dict(info, n_train=len(train), n_validation=len(validation),
                input_shape=list(train.input_shape),
                class_count=int(info.get("class_count", int(max(train.labels.max(), validation.labels.max())) + 1)))
    (out_dir / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out_dir


def read_dataset_dir(path):
    """Return ``(train, validation, info)`` from a dataset directory."""
    path = Path(path)
    info_file = path / "dataset.json"
    if not info_file.is_file():
        raise FileNotFoundError(f"no dataset.json in {path}")
    info = json.loads(info_file.read_text())
    return load_dataset(path / "train.npz", "train"), load_dataset(path / "validation.npz", "validation"), info
