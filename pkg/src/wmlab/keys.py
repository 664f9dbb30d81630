"""Verification key generation: surrogate stealing plus the two-stage filter."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import LabeledDataset, load_image_dir, read_manifest, save_image_dir, to_float
from .models import Classifier, predict
from .training import TrainingSchedule, black_box, train_student

log = logging.getLogger(__name__)

DEFAULT_M = 2000
PROVENANCE_FIELDS = ("source_index", "victim_pred", "surrogate_pred", "benign_pred", "surrogate_conf")


@dataclass
class KeySampleSet:
    """Filtered verification key; samples sorted by surrogate confidence, descending."""

    images: np.ndarray
    target_label: int
    num_classes: int
    provenance: list[dict]
    M: int
    spec_hash: str = ""
    warnings: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def confidences(self) -> np.ndarray:
        return np.array([p["surrogate_conf"] for p in self.provenance], dtype=np.float64)

    def as_dataset(self) -> LabeledDataset:
        return LabeledDataset(self.images, np.full(len(self), self.target_label), self.num_classes,
                              "key", "key-set")

    def save(self, directory: str | os.PathLike) -> Path:
        extra = [{**{k: p[k] for k in PROVENANCE_FIELDS}, "spec_hash": self.spec_hash}
                 for p in self.provenance]
        for row in extra:
            row["surrogate_conf"] = repr(float(row["surrogate_conf"]))
        return save_image_dir(self.as_dataset(), directory, extra)

    @classmethod
    def load(cls, directory: str | os.PathLike, num_classes: int, M: int | None = None) -> "KeySampleSet":
        rows = read_manifest(directory)
        data = load_image_dir(directory, split="key", remap=False, num_classes=num_classes)
        if data.skipped:
            raise ValueError(f"key archive has unreadable samples: {data.skipped}")
        targets = {int(r["label"]) for r in rows}
        if len(targets) != 1:
            raise ValueError("key archive must carry a single target label")
        prov = [{"source_index": int(r["source_index"]), "victim_pred": int(r["victim_pred"]),
                 "surrogate_pred": int(r["surrogate_pred"]), "benign_pred": int(r["benign_pred"]),
                 "surrogate_conf": float(r["surrogate_conf"])} for r in rows]
        return cls(data.images, targets.pop(), num_classes, prov, M or len(rows),
                   rows[0]["spec_hash"] if rows else "")


def train_surrogate(victim, transfer_set: LabeledDataset, arch: str,
                    schedule: TrainingSchedule) -> Classifier:
    """Simulated stealing: fit ``arch`` to the victim's soft answers on ``transfer_set``."""
    if len(transfer_set) == 0:
        raise ValueError("transfer set is empty")
    x, _ = transfer_set.tensors()
    query = victim if not isinstance(victim, torch.nn.Module) else black_box(victim)
    return train_student(query, x, "soft", arch, transfer_set.num_classes, schedule)


@dataclass
class Stage1Result:
    """Survivors of the stage-1 predicate, in candidate order."""

    samples: LabeledDataset
    index: np.ndarray
    victim_pred: np.ndarray
    surrogate_pred: np.ndarray
    benign_pred: np.ndarray
    candidates: int

    def __len__(self) -> int:
        return len(self.index)


def stage1_mask(victim_pred, surrogate_pred, benign_pred, target: int) -> np.ndarray:
    v, s, b = (np.asarray(a) for a in (victim_pred, surrogate_pred, benign_pred))
    return (v == target) & (s == target) & (b != target)


def stage1_filter(S0: LabeledDataset, victim, surrogate, benign) -> Stage1Result:
    """Keep candidates the victim and surrogate label as target but the benign model does not."""
    targets = np.unique(S0.labels)
    if len(targets) != 1:
        raise ValueError("candidate set must carry a single target label")
    target = int(targets[0])
    for name, m in (("victim", victim), ("surrogate", surrogate), ("benign", benign)):
        n_cls = getattr(m, "num_classes", S0.num_classes)
        if n_cls != S0.num_classes:
            raise ValueError(f"{name} model has {n_cls} classes, candidates have {S0.num_classes}")
    x = to_float(S0.images)
    v, s, b = (predict(m, x, "hard") for m in (victim, surrogate, benign))
    keep = np.flatnonzero(stage1_mask(v, s, b, target))
    if len(keep) == 0:
        log.warning("stage-1 filter kept no candidates out of %d", len(S0))
    return Stage1Result(S0.subset(keep), keep, v[keep], s[keep], b[keep], len(S0))


def topk_order(confidences: np.ndarray, M: int) -> np.ndarray:
    """Indices sorted by confidence descending, ties by index ascending; first ``M``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    conf = np.asarray(confidences, dtype=np.float64)
    order = np.lexsort((np.arange(len(conf)), -conf))
    return order[:M]


def stage2_topk(S1: Stage1Result, surrogate, M: int = DEFAULT_M, spec_hash: str = "") -> KeySampleSet:
    """Retain the ``M`` survivors the surrogate assigns the highest target probability."""
    target = int(S1.samples.labels[0]) if len(S1) else -1
    if len(S1):
        probs = predict(surrogate, to_float(S1.samples.images), "soft").double().numpy()
        conf = probs[:, target]
    else:
        conf = np.empty(0)
    order = topk_order(conf, M)
    warnings = []
    if len(S1) < M:
        msg = f"only {len(S1)} stage-1 survivors for M={M}"
        log.warning(msg)
        warnings.append(msg)
    prov = [{"source_index": int(S1.index[i]), "victim_pred": int(S1.victim_pred[i]),
             "surrogate_pred": int(S1.surrogate_pred[i]), "benign_pred": int(S1.benign_pred[i]),
             "surrogate_conf": float(conf[i])} for i in order]
    return KeySampleSet(S1.samples.images[order], target, S1.samples.num_classes, prov, M,
                        spec_hash, warnings)
