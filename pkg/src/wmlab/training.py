"""Supervised training loops and evaluation shared by every stage."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset, channel_stats
from .models import Classifier, build_model, predict

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingSchedule:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    decay_every: int = 10
    decay_factor: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def make_optimizer(params: Iterable, schedule: TrainingSchedule):
    opt = torch.optim.Adam(params, lr=schedule.lr)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=schedule.decay_every,
                                            gamma=schedule.decay_factor)
    return opt, sched


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss.item()} during {where}")


def soft_cross_entropy(logits: torch.Tensor, target_probs: torch.Tensor,
                       temperature: float = 1.0) -> torch.Tensor:
    """Cross-entropy against soft targets, scaled by T^2 as in distillation."""
    logp = F.log_softmax(logits / temperature, dim=1)
    return -(target_probs * logp).sum(dim=1).mean() * temperature ** 2


def fit(model: Classifier, x: torch.Tensor, targets: torch.Tensor, schedule: TrainingSchedule,
        params=None, temperature: float = 1.0, where: str = "training") -> list[dict]:
    """Train ``model`` in place on hard (1-D long) or soft (2-D float) targets."""
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    set_determinism(schedule.seed)
    soft = targets.dim() == 2
    params = list(model.parameters()) if params is None else list(params)
    opt, sched = make_optimizer(params, schedule)
    gen = torch.Generator().manual_seed(schedule.seed)
    history = []
    for epoch in range(schedule.epochs):
        model.train()
        order = torch.randperm(len(x), generator=gen)
        total, seen = 0.0, 0
        for start in range(0, len(x), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            logits = model(x[idx])
            if soft:
                loss = soft_cross_entropy(logits, targets[idx], temperature)
            else:
                loss = F.cross_entropy(logits, targets[idx])
            check_finite(loss, f"{where} epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        sched.step()
        history.append({"epoch": epoch, "loss": total / seen})
        log.info("%s epoch %d loss %.4f", where, epoch, total / seen)
    model.eval()
    return history


def train_classifier(arch: str, data: LabeledDataset, schedule: TrainingSchedule,
                     model: Classifier | None = None) -> Classifier:
    """Train a fresh ``arch`` classifier with cross-entropy on ``data``."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if model is None:
        mean, std = channel_stats(data)
        model = build_model(arch, data.num_classes, data.input_shape, seed=schedule.seed,
                            mean=mean, std=std)
    x, y = data.tensors()
    history = fit(model, x, y, schedule, where=f"train {arch}")
    model.meta.update(epochs=schedule.epochs, seed=schedule.seed, final_loss=history[-1]["loss"])
    return model


def evaluate_accuracy(model, data: LabeledDataset) -> float:
    """Top-1 accuracy of ``model`` on ``data``."""
    if len(data) == 0:
        raise ValueError("empty evaluation set")
    n_cls = getattr(model, "num_classes", data.num_classes)
    if n_cls != data.num_classes:
        raise ValueError(f"model has {n_cls} classes, data has {data.num_classes}")
    x, _ = data.tensors()
    pred = predict(model, x, "hard")
    return float(np.mean(pred == data.labels))


def train_student(query_fn, x: torch.Tensor, mode: str, arch: str, num_classes: int,
                  schedule: TrainingSchedule, temperature: float = 1.0,
                  mean=None, std=None) -> Classifier:
    """Fit a fresh ``arch`` model to the answers of a black-box ``query_fn``.

    ``query_fn(x, mode)`` returns probability rows (soft) or label ids (hard).
    Soft answers are re-tempered as ``softmax(log p / T)`` and fitted with the
    T^2-scaled soft cross-entropy; hard answers use plain cross-entropy.
    """
    if len(x) == 0:
        raise ValueError("query set is empty")
    if mode == "soft":
        if temperature < 1:
            raise ValueError("temperature must be >= 1")
        probs = torch.as_tensor(query_fn(x, "soft"), dtype=torch.float64)
        targets = torch.softmax(torch.log(probs.clamp_min(1e-30)) / temperature, dim=1).float()
    elif mode == "hard":
        targets = torch.as_tensor(np.asarray(query_fn(x, "hard")), dtype=torch.long)
    else:
        raise ValueError(f"unknown label mode {mode!r}")
    if mean is None:
        xd = x.double()
        mean = xd.mean(dim=(0, 2, 3)).tolist()
        std = [s if s > 0 else 1.0 for s in xd.std(dim=(0, 2, 3), unbiased=False).tolist()]
    model = build_model(arch, num_classes, tuple(x.shape[1:]), seed=schedule.seed, mean=mean, std=std)
    history = fit(model, x, targets, schedule, temperature=temperature, where=f"{mode}-label student")
    model.meta.update(epochs=schedule.epochs, seed=schedule.seed, final_loss=history[-1]["loss"])
    return model


def black_box(model):
    """Prediction-only view of ``model``: callers never see its parameters."""
    def query(x: torch.Tensor, mode: str = "soft"):
        return predict(model, x, mode)
    return query
