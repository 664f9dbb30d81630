"""Watermark embedding with the same-class coupling loss."""

from __future__ import annotations

import copy
import csv
import logging
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .models import Classifier, predict
from .training import TrainingDiverged, TrainingSchedule, make_optimizer, set_determinism

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "phase", "L_pri", "L_wm", "L_intra", "L_inter", "train_acc", "holdout_wsr"]


@dataclass
class LossWeights:
    wm: float = 1.0  # lambda1
    coupling: float = 1.0  # lambda2
    intra: float = 0.01  # lambda3
    inter: float = 3.0  # lambda4

    def __post_init__(self):
        if min(self.wm, self.coupling, self.intra, self.inter) < 0:
            raise ValueError("loss weights must be non-negative")


class CouplingState:
    """Running class centroids used by the coupling loss.

    Centroids are plain tensors: no gradient flows into them.
    """

    def __init__(self, num_classes: int, feature_dim: int, margin: float = 1.0,
                 momentum: float = 0.9, dtype=torch.float32):
        if not margin > 0:
            raise ValueError("margin must be > 0")
        self.centroids = torch.zeros(num_classes, feature_dim, dtype=dtype)
        self.initialized = torch.zeros(num_classes, dtype=torch.bool)
        self.margin = margin
        self.momentum = momentum

    @property
    def num_classes(self) -> int:
        return self.centroids.shape[0]


def _batch_means(features: torch.Tensor, labels: torch.Tensor):
    for cls in torch.unique(labels).tolist():
        yield cls, features[labels == cls].mean(dim=0)


def update_centroids(state: CouplingState, features: torch.Tensor, labels: torch.Tensor,
                     only_missing: bool = False) -> CouplingState:
    """EMA update ``c <- m*c + (1-m)*batch_mean`` for classes present in the batch.

    A class seen for the first time is set to its batch mean. With
    ``only_missing`` just those first-time classes are touched.
    """
    if len(labels) == 0:
        raise ValueError("cannot update centroids from an empty batch")
    features = features.detach().to(state.centroids.dtype)
    m = state.momentum
    # 1 - m taken on the decimal value, so m=0.9 gives the double nearest 0.1
    rest = float(1 - Fraction(repr(float(m))))
    for cls, mean in _batch_means(features, labels):
        if not state.initialized[cls]:
            state.centroids[cls] = mean
            state.initialized[cls] = True
        elif not only_missing:
            state.centroids[cls] = m * state.centroids[cls] + rest * mean
    return state


def coupling_loss(features: torch.Tensor, labels: torch.Tensor,
                  state: CouplingState) -> tuple[torch.Tensor, torch.Tensor]:
    """Intra-class pull and margin-based inter-class push.

    ``L_intra = mean_i ||f_i - c_{y_i}||^2`` and
    ``L_inter = mean_i sum_{j != y_i} max(0, margin - ||f_i - c_j||)^2``, where the
    inner sum only covers initialized centroids.
    """
    present = torch.unique(labels)
    if not bool(state.initialized[present].all()):
        missing = present[~state.initialized[present]].tolist()
        raise RuntimeError(f"centroid not initialized for classes {missing}")
    c = state.centroids.to(features.dtype)
    diff = features[:, None, :] - c[None, :, :]
    d2 = (diff ** 2).sum(-1)
    n = len(labels)
    intra = d2[torch.arange(n), labels].sum() / n

    foreign = state.initialized[None, :].expand(n, -1).clone()
    foreign[torch.arange(n), labels] = False
    dist = torch.sqrt(d2.clamp_min(1e-12))
    hinge = torch.clamp(state.margin - dist, min=0) ** 2
    inter = (hinge * foreign).sum() / n
    return intra, inter


def total_loss(pri_loss, wm_loss, intra, inter, weights: LossWeights):
    """``L_pri + l1*L_wm + l2*(l3*L_intra + l4*L_inter)``."""
    for name, v in (("L_pri", pri_loss), ("L_wm", wm_loss), ("L_intra", intra), ("L_inter", inter)):
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise TrainingDiverged(f"{name} is {value}; aborting training step")
    return pri_loss + weights.wm * wm_loss + weights.coupling * (
        weights.intra * intra + weights.inter * inter)


@dataclass
class EmbeddingConfig:
    phase1_ratio: float = 0.01
    phase2_ratio: float = 0.10
    phase1: TrainingSchedule = field(default_factory=TrainingSchedule)
    phase2: TrainingSchedule = field(default_factory=TrainingSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    margin: float = 1.0
    momentum: float = 0.9
    normalize_features: bool = True
    phase1_from_benign: bool = False

    def check(self) -> None:
        for name, ratio, sched in (("phase1", self.phase1_ratio, self.phase1),
                                   ("phase2", self.phase2_ratio, self.phase2)):
            if not 0 < ratio < 1:
                raise ValueError(f"{name} watermark ratio must lie in (0, 1)")
            if wm_per_batch(ratio, sched.batch_size) >= sched.batch_size:
                raise ValueError(f"{name} watermark ratio {ratio} leaves no clean samples "
                                 f"in a batch of {sched.batch_size}")
        if not self.margin > 0:
            raise ValueError("margin must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def wm_per_batch(ratio: float, batch_size: int) -> int:
    return math.ceil(ratio * batch_size)


def wsr_of(model, wm: LabeledDataset) -> float:
    x, y = wm.tensors()
    return float(np.mean(predict(model, x, "hard") == y.numpy()))


def _cycle(n: int, gen: torch.Generator):
    while True:
        yield from torch.randperm(n, generator=gen).tolist()


def _run_phase(model: Classifier, x_clean, y_clean, x_wm, y_wm, ratio: float,
               schedule: TrainingSchedule, config: EmbeddingConfig, state: CouplingState,
               phase: int, holdout: LabeledDataset | None, history: list[dict]) -> None:
    set_determinism(schedule.seed)
    opt, sched = make_optimizer(model.parameters(), schedule)
    gen = torch.Generator().manual_seed(schedule.seed)
    n_wm = wm_per_batch(ratio, schedule.batch_size)
    w = config.weights
    use_coupling = w.coupling > 0 and (w.intra > 0 or w.inter > 0)
    wm_stream = _cycle(len(x_wm), gen)
    for epoch in range(schedule.epochs):
        model.train()
        order = torch.randperm(len(x_clean), generator=gen)
        sums = dict.fromkeys(["L_pri", "L_wm", "L_intra", "L_inter"], 0.0)
        steps = correct = seen = 0
        for start in range(0, len(x_clean), schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            widx = torch.tensor([next(wm_stream) for _ in range(n_wm)])
            nc = len(idx)
            x = torch.cat([x_clean[idx], x_wm[widx]])
            labels = torch.cat([y_clean[idx], y_wm[widx]])
            logits, feats = model.forward_features(x)
            l_pri = F.cross_entropy(logits[:nc], labels[:nc])
            l_wm = F.cross_entropy(logits[nc:], labels[nc:])
            if use_coupling:
                f = F.normalize(feats, dim=1) if config.normalize_features else feats
                update_centroids(state, f, labels, only_missing=True)
                intra, inter = coupling_loss(f, labels, state)
            else:
                f = None
                intra = inter = torch.zeros(())
            loss = total_loss(l_pri, l_wm, intra, inter, w)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if f is not None:
                update_centroids(state, f, labels)
            for key, v in (("L_pri", l_pri), ("L_wm", l_wm), ("L_intra", intra), ("L_inter", inter)):
                sums[key] += float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            steps += 1
            correct += int((logits[:nc].argmax(1) == labels[:nc]).sum())
            seen += nc
        sched.step()
        row = {"epoch": epoch, "phase": phase, **{k: v / steps for k, v in sums.items()},
               "train_acc": correct / seen,
               "holdout_wsr": wsr_of(model, holdout) if holdout is not None else float("nan")}
        history.append(row)
        log.info("embed phase %d epoch %d: %s", phase, epoch,
                 ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k not in ("epoch", "phase")))


def embed_watermark(init: Classifier, data: LabeledDataset, wm_set: LabeledDataset,
                    config: EmbeddingConfig, holdout: LabeledDataset | None = None,
                    ) -> tuple[Classifier, list[dict]]:
    """Two-phase joint training of the primary and watermark tasks.

    Phase 1 mixes watermark samples at ``phase1_ratio`` using a pool of
    ``ceil(phase1_ratio * |data|)`` composites; phase 2 fine-tunes the phase-1
    model at ``phase2_ratio`` with ``ceil(phase2_ratio * |data|)`` composites.
    ``init`` is copied, never modified.
    """
    config.check()
    targets = np.unique(wm_set.labels)
    if len(targets) != 1:
        raise ValueError("watermark set must carry a single target label")
    if wm_set.input_shape != data.input_shape:
        raise ValueError("watermark samples and data have different shapes")
    model = copy.deepcopy(init)
    x_clean, y_clean = data.tensors()
    x_wm, y_wm = wm_set.tensors()
    state = CouplingState(data.num_classes, model.feature_dim, config.margin, config.momentum)
    history: list[dict] = []
    for phase, ratio, sched in ((1, config.phase1_ratio, config.phase1),
                                (2, config.phase2_ratio, config.phase2)):
        pool = min(len(x_wm), max(1, math.ceil(ratio * len(x_clean))))
        _run_phase(model, x_clean, y_clean, x_wm[:pool], y_wm[:pool], ratio, sched, config,
                   state, phase, holdout, history)
    model.eval()
    model.meta.update(epochs=config.phase1.epochs + config.phase2.epochs,
                      seed=config.phase1.seed, target_label=int(targets[0]))
    return model, history


def write_training_log(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return path
