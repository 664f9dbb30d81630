"""Marking-key construction: source classes, composite samples, target label."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset, to_float
from .models import logits_of

NUM_SOURCES = 4
RESIZE_FILTERS = ("bilinear", "nearest")


@dataclass
class ClassCentroidMap:
    centroids: np.ndarray  # (C, feature_dim)
    counts: np.ndarray  # (C,)


@dataclass(frozen=True)
class WatermarkSpec:
    """Secret marking key: four source classes tiled 2x2 and a target label.

    ``layout`` lists the classes in quadrant order TL, TR, BL, BR.
    """

    source_classes: tuple[int, ...]
    target_label: int
    image_shape: tuple[int, int, int]
    layout: tuple[int, ...] = field(default=())
    resize_filter: str = "bilinear"
    seed: int = 0

    def __post_init__(self):
        src = tuple(int(c) for c in self.source_classes)
        object.__setattr__(self, "source_classes", src)
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if not self.layout:
            object.__setattr__(self, "layout", tuple(sorted(src)))
        object.__setattr__(self, "layout", tuple(int(c) for c in self.layout))
        if len(src) != NUM_SOURCES or len(set(src)) != NUM_SOURCES:
            raise ValueError(f"need exactly {NUM_SOURCES} distinct source classes, got {src}")
        if sorted(self.layout) != sorted(src):
            raise ValueError("layout must be a permutation of the source classes")
        if self.resize_filter not in RESIZE_FILTERS:
            raise ValueError(f"resize filter must be one of {RESIZE_FILTERS}")
        _, h, w = self.image_shape
        if h % 2 or w % 2:
            raise ValueError(f"composite layout needs even image dimensions, got {h}x{w}")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "WatermarkSpec":
        return cls(tuple(d["source_classes"]), int(d["target_label"]), tuple(d["image_shape"]),
                   tuple(d["layout"]), d["resize_filter"], int(d["seed"]))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------- centroids

@torch.no_grad()
def extract_features(model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    model.eval()
    x = to_float(images)
    out = [model.forward_features(x[i:i + batch_size])[1] for i in range(0, len(x), batch_size)]
    return torch.cat(out).double().numpy()


def class_means(features: np.ndarray, labels: np.ndarray, num_classes: int) -> ClassCentroidMap:
    counts = np.bincount(labels, minlength=num_classes)
    missing = np.flatnonzero(counts == 0)
    if len(missing):
        raise ValueError(f"class {int(missing[0])} has no samples")
    sums = np.zeros((num_classes, features.shape[1]))
    np.add.at(sums, labels, features)
    return ClassCentroidMap(sums / counts[:, None], counts)


def extract_class_centroids(model, data: LabeledDataset) -> ClassCentroidMap:
    """Mean penultimate feature vector of every class."""
    return class_means(extract_features(model, data.images), data.labels, data.num_classes)


# --------------------------------------------------------------------------- k-means

def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(len(points))]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total == 0:
            idx = rng.integers(len(points))
        else:
            idx = rng.choice(len(points), p=d2 / total)
        centers.append(points[idx])
    return np.array(centers, dtype=np.float64)


def kmeans(points: np.ndarray, k: int, seed: int = 0, max_iter: int = 300,
           tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from a seeded k-means++ start.

    Stops when no center moves more than ``tol``; an emptied cluster is
    re-seeded at the point farthest from its assigned center.
    """
    points = np.asarray(points, dtype=np.float64)
    if k > len(points):
        raise ValueError(f"cannot form {k} clusters from {len(points)} points")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(points, k, rng)
    for _ in range(max_iter):
        d2 = ((points[:, None] - centers[None]) ** 2).sum(-1)
        assign = np.argmin(d2, axis=1)
        new = centers.copy()
        for c in range(k):
            members = points[assign == c]
            if len(members):
                new[c] = members.mean(axis=0)
            else:
                far = np.argmax(d2[np.arange(len(points)), assign])
                new[c] = points[far]
                assign[far] = c
        shift = np.sqrt(((new - centers) ** 2).sum(-1)).max()
        centers = new
        if shift <= tol:
            break
    d2 = ((points[:, None] - centers[None]) ** 2).sum(-1)
    return centers, np.argmin(d2, axis=1)


def representatives(points: np.ndarray, centers: np.ndarray) -> list[int]:
    """Nearest point index per center; a repeated pick falls to the next-nearest unused."""
    chosen: list[int] = []
    for m in centers:
        dist = np.sqrt(((points - m) ** 2).sum(-1))
        for j in np.argsort(dist, kind="stable"):
            if int(j) not in chosen:
                chosen.append(int(j))
                break
    return chosen


def select_source_classes(centroids: ClassCentroidMap | np.ndarray, k: int = NUM_SOURCES,
                          seed: int = 0) -> list[int]:
    """Cluster the class centroids into ``k`` groups and return one class per group."""
    points = centroids.centroids if isinstance(centroids, ClassCentroidMap) else np.asarray(centroids)
    if k > len(points):
        raise ValueError(f"need at least {k} classes, have {len(points)}")
    centers, _ = kmeans(points, k, seed)
    return sorted(representatives(points, centers))


# --------------------------------------------------------------------------- composites

def _resize_half(x: torch.Tensor, resize_filter: str) -> torch.Tensor:
    h, w = x.shape[-2:]
    if resize_filter == "nearest":
        return F.interpolate(x, size=(h // 2, w // 2), mode="nearest")
    return F.interpolate(x, size=(h // 2, w // 2), mode="bilinear", align_corners=False)


def compose_batch(quadrants: np.ndarray, resize_filter: str = "bilinear") -> np.ndarray:
    """Tile ``(N, 4, C, H, W)`` uint8 sources into ``(N, C, H, W)`` composites.

    Sources are taken in TL, TR, BL, BR order.
    """
    quadrants = np.asarray(quadrants)
    n, q, c, h, w = quadrants.shape
    if q != NUM_SOURCES:
        raise ValueError(f"expected {NUM_SOURCES} sources per composite, got {q}")
    if h % 2 or w % 2:
        raise ValueError(f"composite layout needs even image dimensions, got {h}x{w}")
    small = _resize_half(torch.from_numpy(quadrants.reshape(n * q, c, h, w).astype(np.float64)),
                         resize_filter)
    small = small.numpy().reshape(n, q, c, h // 2, w // 2)
    out = np.empty((n, c, h, w), dtype=np.float64)
    out[:, :, :h // 2, :w // 2] = small[:, 0]
    out[:, :, :h // 2, w // 2:] = small[:, 1]
    out[:, :, h // 2:, :w // 2] = small[:, 2]
    out[:, :, h // 2:, w // 2:] = small[:, 3]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def compose_watermark_sample(sources, spec: WatermarkSpec) -> np.ndarray:
    """Compose one sample; ``sources`` are four ``(C, H, W)`` images in ``spec.layout`` order."""
    sources = np.stack([np.asarray(s) for s in sources])
    if tuple(sources.shape[1:]) != spec.image_shape:
        raise ValueError(f"sources have shape {sources.shape[1:]}, spec expects {spec.image_shape}")
    return compose_batch(sources[None], spec.resize_filter)[0]


def draw_composites(data: LabeledDataset, layout, count: int, seed: int,
                    resize_filter: str = "bilinear") -> tuple[np.ndarray, np.ndarray]:
    """Composite ``count`` samples drawn with replacement; returns images and source indices."""
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    picks = np.empty((count, NUM_SOURCES), dtype=np.int64)
    for q, cls in enumerate(layout):
        pool = np.flatnonzero(data.labels == cls)
        if len(pool) == 0:
            raise ValueError(f"source class {cls} is absent from the dataset")
        picks[:, q] = pool[rng.integers(len(pool), size=count)]
    images = compose_batch(data.images[picks], resize_filter)
    return images, picks


def build_watermark_dataset(data: LabeledDataset, spec: WatermarkSpec, count: int,
                            seed: int, split: str | None = None) -> LabeledDataset:
    """``count`` composites labeled with the target label; ``.provenance`` holds source indices."""
    images, picks = draw_composites(data, spec.layout, count, seed, spec.resize_filter)
    out = LabeledDataset(images, np.full(count, spec.target_label), data.num_classes,
                         split or data.split, "watermark")
    out.provenance = picks
    return out


# --------------------------------------------------------------------------- target label

def target_label_from_probabilities(probs: np.ndarray) -> int:
    """Class with the lowest mean probability; ties go to the lowest index.

    Column sums use exactly rounded summation so the result does not depend on
    sample order.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("need a non-empty (n, C) probability table")
    n = len(probs)
    means = np.array([math.fsum(probs[:, j]) / n for j in range(probs.shape[1])])
    return int(np.argmin(means))


def select_target_label(benign, watermark_samples) -> int:
    """Least-likely class of the benign model averaged over ``watermark_samples``."""
    x = watermark_samples if isinstance(watermark_samples, torch.Tensor) else to_float(watermark_samples)
    if len(x) == 0:
        raise ValueError("need at least one watermark sample")
    probs = F.softmax(logits_of(benign, x).double(), dim=1).numpy()
    return target_label_from_probabilities(probs)
