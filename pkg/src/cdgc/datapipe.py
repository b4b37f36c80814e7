"""Datasets, normalization, augmentation and label encoding.

Images are stored as float32 tensors of shape (N, 3, H, W) with values in
[-1, 1]; labels are int64. Both the context network and the classifiers
read the same normalized tensors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from torch.utils.data import Dataset

CIFAR_RECORD_BYTES = 3073
CIFAR_PIXEL_BYTES = 3072
CIFAR_CLASSES = 10

SHAPES = ("circle", "square", "triangle", "cross")
# RGB in [0, 1]; the first n_colors entries are used.
PALETTE = (
    (0.95, 0.15, 0.15),
    (0.15, 0.85, 0.20),
    (0.20, 0.35, 0.95),
    (0.95, 0.90, 0.15),
    (0.90, 0.20, 0.90),
    (0.15, 0.90, 0.90),
    (0.98, 0.55, 0.10),
    (0.95, 0.95, 0.95),
)

TOYSET_MAGIC = "cdgc-toyset"
TOYSET_VERSION = 1


class DataFormatError(ValueError):
    """Raised when an on-disk dataset does not match its binary layout."""


@dataclass(frozen=True)
class ImageRecord:
    pixels: torch.Tensor  # (3, H, W) in [-1, 1]
    label: int


@dataclass(frozen=True)
class DatasetSpec:
    source: str = "toyset"
    n_classes: int = 4
    resolution: int = 32
    train_size: int = 2000
    test_size: int = 500

    def __post_init__(self):
        if self.source not in ("cifar10-binary", "toyset"):
            raise ValueError(f"unknown dataset source {self.source!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.resolution not in (32, 224):
            raise ValueError(f"unsupported resolution {self.resolution}")


@dataclass(frozen=True)
class AugmentationConfig:
    pad: int = 4
    crop: int = 32
    hflip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError("pad must be non-negative")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must lie in [0, 1]")

    def validate_for(self, resolution: int) -> None:
        if self.crop > resolution + 2 * self.pad:
            raise ValueError(
                f"crop {self.crop} exceeds padded size {resolution + 2 * self.pad}"
            )


class ImageDataset(Dataset):
    """An immutable in-memory image dataset.

    ``extras`` holds per-sample side metadata (e.g. the nuisance color index of
    the toy set) as 1-D integer tensors aligned with ``labels``.
    """

    def __init__(self, images: torch.Tensor, labels: torch.Tensor, n_classes: int,
                 extras: Optional[dict] = None, info: Optional[dict] = None):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) images, got {tuple(images.shape)}")
        if labels.shape != (images.shape[0],):
            raise ValueError("labels must be a 1-D tensor aligned with images")
        self.images = images.contiguous()
        self.labels = labels.long().contiguous()
        self.n_classes = int(n_classes)
        self.extras = dict(extras or {})
        self.info = dict(info or {})
        self.images.requires_grad_(False)

    def __len__(self):
        return self.images.shape[0]

    def __getitem__(self, idx):
        return self.images[idx], self.labels[idx]

    def record(self, idx: int) -> ImageRecord:
        return ImageRecord(self.images[idx], int(self.labels[idx]))

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def subset(self, indices) -> "ImageDataset":
        indices = torch.as_tensor(indices, dtype=torch.long)
        extras = {k: v[indices] for k, v in self.extras.items()}
        return ImageDataset(self.images[indices], self.labels[indices],
                            self.n_classes, extras, self.info)

    def split(self, first: int) -> tuple["ImageDataset", "ImageDataset"]:
        n = len(self)
        if not 0 < first < n:
            raise ValueError(f"split point {first} outside (0, {n})")
        return self.subset(range(first)), self.subset(range(first, n))


def bytes_to_unit(values: np.ndarray) -> np.ndarray:
    """Map uint8 pixel bytes to [-1, 1] via v / 127.5 - 1."""
    return values.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def parse_cifar10_bytes(buf: bytes, source: str = "<bytes>"):
    if len(buf) == 0 or len(buf) % CIFAR_RECORD_BYTES != 0:
        raise DataFormatError(
            f"{source}: {len(buf)} bytes is not a whole number of "
            f"{CIFAR_RECORD_BYTES}-byte records"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= CIFAR_CLASSES)[0]
    if bad.size:
        raise DataFormatError(
            f"{source}: record {int(bad[0])} has label byte {int(labels[bad[0]])} >= 10"
        )
    pixels = bytes_to_unit(raw[:, 1:]).reshape(-1, 3, 32, 32)
    return pixels, labels


def load_cifar10(directory, split: str = "train",
                 files: Optional[Sequence[str]] = None) -> ImageDataset:
    """Load CIFAR-10 binary batches from ``directory``.

    Each record is 1 label byte followed by 3072 pixel bytes (R, G, B planes,
    row-major). By default ``split="train"`` reads ``data_batch_*.bin`` and
    ``split="test"`` reads ``test_batch.bin``.
    """
    directory = Path(directory)
    if files is None:
        if split == "train":
            paths = sorted(directory.glob("data_batch_*.bin"))
        elif split == "test":
            paths = sorted(directory.glob("test_batch.bin"))
        else:
            raise ValueError(f"unknown split {split!r}")
    else:
        paths = [directory / f for f in files]
    if not paths:
        raise FileNotFoundError(f"no CIFAR-10 batch files for split {split!r} in {directory}")

    images, labels = [], []
    for path in paths:
        px, lb = parse_cifar10_bytes(path.read_bytes(), source=str(path))
        images.append(px)
        labels.append(lb)
    return ImageDataset(torch.from_numpy(np.concatenate(images)),
                        torch.from_numpy(np.concatenate(labels)),
                        CIFAR_CLASSES, info={"source": "cifar10-binary", "split": split})


def _shape_mask(shape: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        return dy * dy + dx * dx <= r * r
    if shape == "square":
        s = 0.8 * r
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if shape == "triangle":
        # apex up
        top, base = cy - r, cy + 0.6 * r
        frac = (yy - top) / (base - top)
        return (yy >= top) & (yy <= base) & (np.abs(dx) <= frac * r)
    if shape == "cross":
        arm = 0.3 * r
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r))
    raise ValueError(f"unknown shape {shape!r}")


def generate_toyset(seed: int, n_shapes: int = 4, n_colors: int = 4, count: int = 2000,
                    resolution: int = 32, noise: float = 0.05) -> ImageDataset:
    """Render a shapes-on-noise dataset where shape is the label and color a nuisance.

    Output is a pure function of the arguments. The color index of each image
    is stored in ``extras["color"]``.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if not 2 <= n_shapes <= len(SHAPES):
        raise ValueError(f"n_shapes must be in [2, {len(SHAPES)}]")
    if not 2 <= n_colors <= len(PALETTE):
        raise ValueError(f"n_colors must be in [2, {len(PALETTE)}]")

    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_shapes, size=count)
    colors = rng.integers(0, n_colors, size=count)
    radius = rng.uniform(0.18, 0.32, size=count) * resolution
    margin = radius + 1.0
    cy = rng.uniform(margin, resolution - margin)
    cx = rng.uniform(margin, resolution - margin)
    background = rng.normal(0.0, noise, size=(count, 3, resolution, resolution))

    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64) + 0.5
    images = np.full((count, 3, resolution, resolution), -0.6) + background
    palette = np.asarray(PALETTE) * 2.0 - 1.0
    for i in range(count):
        mask = _shape_mask(SHAPES[labels[i]], yy, xx, cy[i], cx[i], radius[i])
        images[i][:, mask] = palette[colors[i]][:, None]
    images = np.clip(images, -1.0, 1.0).astype(np.float32)

    return ImageDataset(
        torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64)), n_shapes,
        extras={"color": torch.from_numpy(colors.astype(np.int64))},
        info={"source": "toyset", "seed": seed, "n_shapes": n_shapes,
              "n_colors": n_colors, "count": count, "resolution": resolution,
              "noise": noise},
    )


def save_toyset(dataset: ImageDataset, directory) -> Path:
    """Persist a toy set as ``header.json`` plus raw little-endian tensors.

    Layout: ``images.f32`` (float32, N*3*H*W), ``labels.i32`` and
    ``color.i32`` (int32, N). The header records shapes, dtypes and the
    generator parameters.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {"images": ("images.f32", "<f4", dataset.images.numpy()),
               "labels": ("labels.i32", "<i4", dataset.labels.numpy())}
    for name, values in dataset.extras.items():
        tensors[name] = (f"{name}.i32", "<i4", values.numpy())
    header = {"format": TOYSET_MAGIC, "version": TOYSET_VERSION,
              "n_classes": dataset.n_classes, "count": len(dataset),
              "spec": dataset.info, "tensors": {}}
    for name, (fname, dtype, arr) in tensors.items():
        (directory / fname).write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        header["tensors"][name] = {"file": fname, "dtype": dtype, "shape": list(arr.shape)}
    path = directory / "header.json"
    path.write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_toyset(directory) -> ImageDataset:
    directory = Path(directory)
    header = json.loads((directory / "header.json").read_text(encoding="utf-8"))
    if header.get("format") != TOYSET_MAGIC or header.get("version") != TOYSET_VERSION:
        raise DataFormatError(f"{directory}: not a version-{TOYSET_VERSION} toy set")
    arrays = {}
    for name, meta in header["tensors"].items():
        raw = (directory / meta["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=meta["dtype"])
        if arr.size != int(np.prod(meta["shape"])):
            raise DataFormatError(f"{meta['file']}: size does not match header shape")
        arrays[name] = torch.from_numpy(arr.reshape(meta["shape"]).copy())
    images = arrays.pop("images")
    labels = arrays.pop("labels").long()
    extras = {k: v.long() for k, v in arrays.items()}
    return ImageDataset(images, labels, header["n_classes"], extras, header["spec"])


def augment(record: ImageRecord, cfg: AugmentationConfig,
            rng: np.random.Generator) -> ImageRecord:
    """Zero-pad, random-crop back to the input size, and random horizontal flip."""
    if not cfg.enabled:
        return record
    pixels = augment_images(record.pixels[None], cfg, rng)[0]
    return ImageRecord(pixels, record.label)


def augment_images(images: torch.Tensor, cfg: AugmentationConfig,
                   rng: np.random.Generator) -> torch.Tensor:
    """Batched :func:`augment`; draws (dy, dx, flip) per image in that order."""
    if not cfg.enabled:
        return images
    n, _, h, w = images.shape
    cfg.validate_for(h)
    p = cfg.pad
    padded = torch.nn.functional.pad(images, (p, p, p, p))
    out = torch.empty(n, images.shape[1], cfg.crop, cfg.crop, dtype=images.dtype)
    span = h + 2 * p - cfg.crop
    for i in range(n):
        dy = int(rng.integers(0, span + 1))
        dx = int(rng.integers(0, span + 1))
        flip = rng.random() < cfg.hflip_prob
        crop = padded[i, :, dy:dy + cfg.crop, dx:dx + cfg.crop]
        out[i] = crop.flip(-1) if flip else crop
    return out


class ConditionEmbedder(nn.Module):
    """Two fully connected layers mapping a one-hot label to a 10-d vector."""

    def __init__(self, n_classes: int, out_dim: int = 10, hidden: int = 32):
        super().__init__()
        self.n_classes = n_classes
        self.net = nn.Sequential(nn.Linear(n_classes, hidden), nn.ReLU(inplace=True),
                                 nn.Linear(hidden, out_dim))

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        onehot = nn.functional.one_hot(labels, self.n_classes).float()
        return self.net(onehot)


def condition_dim(n_classes: int) -> int:
    return n_classes if n_classes <= 10 else 10


def encode_condition(label, n: int, embedder: Optional[ConditionEmbedder] = None) -> torch.Tensor:
    """Conditional vector for ``label`` (an int or a 1-D tensor of labels).

    One-hot of length ``n`` when ``n <= 10``; otherwise the 10-d output of
    ``embedder`` (a fresh one is created if none is given).
    """
    labels = torch.as_tensor(label, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"label out of range [0, {n})")
    if n <= 10:
        return nn.functional.one_hot(labels, n).float()
    if embedder is None:
        embedder = ConditionEmbedder(n)
    if embedder.n_classes != n:
        raise ValueError("embedder was built for a different class count")
    return embedder(labels)


@dataclass
class ToysetSpec:
    """Generator parameters; persisted in RunConfig files."""
    seed: int = 1
    n_shapes: int = 4
    n_colors: int = 4
    train_size: int = 2000
    test_size: int = 500

    def build(self) -> tuple[ImageDataset, ImageDataset]:
        full = generate_toyset(self.seed, self.n_shapes, self.n_colors,
                               self.train_size + self.test_size)
        return full.split(self.train_size)

    def to_dict(self):
        return asdict(self)
