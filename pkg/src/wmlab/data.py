"""Image datasets: in-memory container, loaders, PNG directory format, caches."""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import subprocess
import tarfile
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

DATA_ENV = "WMLAB_DATA"
MANIFEST_NAME = "manifest.csv"
SPLITS = ("train", "test", "transfer")

# npm package that ships Fashion-MNIST as per-class JSON arrays of 784 uint8 values
FMNIST_NPM_PACKAGE = "fashion-mnist"
FMNIST_TRAIN_PER_CLASS = 6000


def data_home() -> Path:
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "wmlab"))


@dataclass
class LabeledDataset:
    """Images with integer labels.

    ``images`` is ``(N, C, H, W)`` uint8; models consume ``images / 255``.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    name: str = ""
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        h, w = self.images.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"image height and width must be even, got {h}x{w}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index, split: str | None = None) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes,
                              split or self.split, self.name)

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return to_float(self.images), torch.from_numpy(self.labels)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def to_float(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(images, dtype=np.float32) / 255.0)


def to_uint8(x: torch.Tensor | np.ndarray) -> np.ndarray:
    x = x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def channel_stats(data: LabeledDataset) -> tuple[list[float], list[float]]:
    """Per-channel mean and std of ``data`` on the [0, 1] scale."""
    x = data.images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return mean.tolist(), std.tolist()


def load_dataset(source: str | os.PathLike, split: str = "train", limit: int | None = None,
                 seed: int | None = 0, offset: int = 0, remap: bool = True) -> LabeledDataset:
    """Load ``split`` of a named dataset or a PNG directory.

    The split is permuted with ``seed`` (natural order when ``seed`` is None) and
    the window ``[offset, offset + limit)`` is returned, so windows taken with the
    same seed are disjoint.
    """
    source = str(source)
    if source == "fashion-mnist":
        data = _load_fashion_mnist(split)
    elif source.startswith("synthetic"):
        data = _synthetic_from_id(source, split)
    else:
        data = load_image_dir(source, split, remap=remap)

    n = len(data)
    if seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng(seed).permutation(n)
    stop = n if limit is None else offset + limit
    if offset < 0 or stop > n or offset >= stop:
        raise ValueError(f"requested samples [{offset}, {stop}) but {source}:{split} has {n}")
    out = data.subset(order[offset:stop])
    out.skipped = data.skipped
    return out


# --------------------------------------------------------------------------- PNG dirs

def save_image_dir(data: LabeledDataset, directory: str | os.PathLike,
                   extra: list[dict] | None = None) -> Path:
    """Write one PNG per sample plus ``manifest.csv`` (filename, label, split, ...)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    width = max(5, len(str(len(data))))
    for i, (img, label) in enumerate(zip(data.images, data.labels)):
        fname = f"{i:0{width}d}.png"
        Image.fromarray(_hwc(img)).save(directory / fname, optimize=False)
        row = {"filename": fname, "label": int(label), "split": data.split}
        if extra is not None:
            row.update(extra[i])
        rows.append(row)
    fields = list(rows[0]) if rows else ["filename", "label", "split"]
    with open(directory / MANIFEST_NAME, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return directory


def read_manifest(directory: str | os.PathLike) -> list[dict]:
    path = Path(directory) / MANIFEST_NAME
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def load_image_dir(directory: str | os.PathLike, split: str | None = "train",
                   remap: bool = True, num_classes: int | None = None) -> LabeledDataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset source not found: {directory}")
    if not (directory / MANIFEST_NAME).exists():
        raise ValueError(f"no samples found in {directory}")
    rows = [r for r in read_manifest(directory) if split is None or r["split"] == split]
    images, labels, skipped = [], [], []
    for row in rows:
        try:
            with Image.open(directory / row["filename"]) as im:
                arr = np.array(im)
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping corrupt sample %s: %s", row["filename"], exc)
            skipped.append(row["filename"])
            continue
        images.append(arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1))
        labels.append(int(row["label"]))
    if not images:
        raise ValueError(f"no samples found in {directory}")
    labels = np.array(labels)
    if remap:
        classes = np.unique(labels)
        labels = np.searchsorted(classes, labels)
        num_classes = len(classes)
    elif num_classes is None:
        num_classes = int(labels.max()) + 1
    data = LabeledDataset(np.stack(images), labels, num_classes, split or "train", str(directory))
    data.skipped = skipped
    return data


def _hwc(img: np.ndarray) -> np.ndarray:
    return img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)


# --------------------------------------------------------------------------- synthetic

def make_synthetic_dataset(num_classes: int = 4, per_class: int = 10, size: int = 8,
                           channels: int = 1, seed: int = 0, split: str = "train") -> LabeledDataset:
    """Linearly separable blobs: class ``k`` lights up horizontal band ``k``.

    Each image is a noisy constant background with one bright band whose row
    position encodes the class, so a linear probe on band means separates the
    classes exactly.
    """
    rng = np.random.default_rng(seed)
    band = size // num_classes
    if band < 1:
        raise ValueError("image too small for the requested class count")
    images = rng.integers(0, 40, size=(num_classes * per_class, channels, size, size))
    labels = np.repeat(np.arange(num_classes), per_class)
    for i, k in enumerate(labels):
        images[i, :, k * band:(k + 1) * band, :] += 200
    return LabeledDataset(images.astype(np.uint8), labels, num_classes, split, "synthetic")


def _synthetic_from_id(source: str, split: str) -> LabeledDataset:
    # synthetic[-C[-PER_CLASS[-SIZE]]]
    parts = [int(p) for p in source.split("-")[1:]]
    c, per, size = (parts + [4, 10, 8][len(parts):])[:3]
    return make_synthetic_dataset(c, per, size, seed=0 if split == "train" else 1, split=split)


# --------------------------------------------------------------------------- Fashion-MNIST

def fashion_mnist_cache() -> Path:
    return data_home() / "fashion-mnist.npz"


def _load_fashion_mnist(split: str) -> LabeledDataset:
    path = fashion_mnist_cache()
    if not path.exists():
        raise FileNotFoundError(
            f"Fashion-MNIST cache not found at {path}; run `wmlab fetch-data` "
            f"or set {DATA_ENV}")
    key = "train" if split in ("train", "transfer") else "test"
    with np.load(path) as z:
        x, y = z[f"x_{key}"], z[f"y_{key}"]
    return LabeledDataset(x[:, None], y, 10, split, "fashion-mnist")


def import_fashion_mnist_npm(package: str | os.PathLike, out: str | os.PathLike | None = None) -> Path:
    """Convert the npm ``fashion-mnist`` package (dir or .tgz) into the npz cache.

    The package stores each class as a flat list of 28x28 images; the first
    6000 per class become the train split and the remainder the test split.
    """
    package = Path(package)
    out = Path(out) if out else fashion_mnist_cache()
    with tempfile.TemporaryDirectory() as tmp:
        if package.is_file():
            with tarfile.open(package) as tar:
                tar.extractall(tmp)
            package = Path(tmp) / "package"
        clothes = package / "src" / "clothes"
        if not clothes.is_dir():
            clothes = package / "package" / "src" / "clothes"
        if not clothes.is_dir():
            raise FileNotFoundError(f"no src/clothes directory under {package}")
        xs = {"train": [], "test": []}
        ys = {"train": [], "test": []}
        for k in range(10):
            with open(clothes / f"{k}.json") as fh:
                records = json.load(fh)["data"]
            bad = [i for i, r in enumerate(records) if len(r) != 28 * 28]
            if bad:
                log.warning("class %d: skipping %d malformed records at %s", k, len(bad), bad)
            arr = np.asarray([r for r in records if len(r) == 28 * 28], dtype=np.uint8)
            arr = arr.reshape(-1, 28, 28)
            for split, part in (("train", arr[:FMNIST_TRAIN_PER_CLASS]),
                                ("test", arr[FMNIST_TRAIN_PER_CLASS:])):
                xs[split].append(part)
                ys[split].append(np.full(len(part), k, dtype=np.int64))
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out, x_train=np.concatenate(xs["train"]), y_train=np.concatenate(ys["train"]),
                        x_test=np.concatenate(xs["test"]), y_test=np.concatenate(ys["test"]))
    return out


def fetch_fashion_mnist(out: str | os.PathLike | None = None) -> Path:
    """Download the npm package with ``npm pack`` and build the cache."""
    npm = shutil.which("npm")
    if npm is None:
        raise RuntimeError("npm is required to fetch Fashion-MNIST")
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([npm, "pack", FMNIST_NPM_PACKAGE], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        tgz = next(Path(tmp).glob("*.tgz"))
        return import_fashion_mnist_npm(tgz, out)
