"""Adversary simulations: model stealing and watermark removal."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import LabeledDataset
from .models import Classifier
from .training import TrainingSchedule, fit, train_student

log = logging.getLogger(__name__)

FINETUNE_MODES = ("FTLL", "FTAL", "RTLL", "RTAL")
PREPROCESS_METHODS = ("blur", "noise", "input_quantize", "crop")


@dataclass
class AttackResult:
    attack: str
    params: dict
    acc: float
    wsr: float
    seed: int
    model_path: str | None = None
    wall_clock: float = 0.0
    decision: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("acc", "wsr"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "AttackResult":
        return cls(**json.loads(Path(path).read_text()))


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start


def _as_inputs(query_set) -> torch.Tensor:
    if isinstance(query_set, LabeledDataset):
        return query_set.tensors()[0]
    return torch.as_tensor(query_set, dtype=torch.float32)


# --------------------------------------------------------------------------- stealing

def steal_model(query_fn, query_set, label_mode: str, student_arch: str, num_classes: int,
                schedule: TrainingSchedule, temperature: float = 1.0) -> Classifier:
    """Extract a copy of a deployed model from its answers on ``query_set``.

    ``query_fn(x, mode)`` is the only handle on the victim. Soft mode is the
    distillation loss with the ground-truth term weighted zero.
    """
    if isinstance(query_fn, nn.Module):
        raise TypeError("steal_model takes a prediction callback, not a model; wrap it with black_box()")
    x = _as_inputs(query_set)
    if len(x) == 0:
        raise ValueError("query set is empty")
    return train_student(query_fn, x, label_mode, student_arch, num_classes, schedule, temperature)


def jbda_augment(seed_set, student: Classifier, lambda_step: float = 0.1, rounds: int = 1,
                 cap: int | None = None) -> torch.Tensor:
    """Jacobian-based augmentation: each round appends ``clip(x + lambda*sign(grad))``.

    The gradient is of the cross-entropy between the student's logits and its
    own hard label, so the set doubles every round.
    """
    if not lambda_step > 0:
        raise ValueError("lambda_step must be > 0")
    x = _as_inputs(seed_set).clone()
    student.eval()
    for r in range(rounds):
        if cap is not None and 2 * len(x) > cap:
            log.warning("JBDA stopped after %d rounds: next round would exceed cap %d", r, cap)
            break
        xr = x.clone().requires_grad_(True)
        logits = student(xr)
        own = logits.argmax(dim=1).detach()
        loss = F.cross_entropy(logits, own, reduction="sum")
        (grad,) = torch.autograd.grad(loss, xr)
        new = torch.clamp(x + lambda_step * grad.sign(), 0.0, 1.0)
        x = torch.cat([x, new.detach()])
    return x


def jbda_steal(query_fn, seed_set, rounds: int, student_arch: str, num_classes: int,
               schedule: TrainingSchedule, label_mode: str = "soft", lambda_step: float = 0.1,
               cap: int | None = None) -> tuple[Classifier, torch.Tensor]:
    """Substitute training: alternate fitting the student and growing the query set."""
    x = _as_inputs(seed_set)
    student = steal_model(query_fn, x, label_mode, student_arch, num_classes, schedule)
    for _ in range(rounds):
        grown = jbda_augment(x, student, lambda_step, 1, cap)
        if len(grown) == len(x):
            break
        x = grown
        student = steal_model(query_fn, x, label_mode, student_arch, num_classes, schedule)
    return student, x


# --------------------------------------------------------------------------- removal

def finetune(model: Classifier, data: LabeledDataset, mode: str, schedule: TrainingSchedule) -> Classifier:
    """FTLL/FTAL fine-tune the last or all layers; RTLL/RTAL first re-initialize the last layer."""
    if mode not in FINETUNE_MODES:
        raise ValueError(f"unknown fine-tuning mode {mode!r}; choose from {FINETUNE_MODES}")
    out = copy.deepcopy(model)
    if mode.startswith("RT"):
        out.reset_final_layer(schedule.seed + 7919)
    last_only = mode.endswith("LL")
    for p in out.body_parameters():
        p.requires_grad_(not last_only)
    params = out.final_layer_parameters() if last_only else list(out.parameters())
    x, y = data.tensors()
    fit(out, x, y, schedule, params=params, where=f"{mode} fine-tune")
    for p in out.parameters():
        p.requires_grad_(True)
    out.meta = dict(model.meta, attack=mode)
    return out


def weight_tensors(model: nn.Module) -> list[tuple[str, torch.Tensor]]:
    """Conv/linear weight tensors in module order; biases are excluded."""
    return [(n, p) for n, p in model.named_parameters() if n.endswith("weight") and p.dim() > 1]


def prune_weights(model: Classifier, rate: float) -> Classifier:
    """Zero the ``rate`` fraction of smallest-magnitude weights across all weight tensors."""
    if not 0 <= rate <= 1:
        raise ValueError("pruning rate must lie in [0, 1]")
    out = copy.deepcopy(model)
    tensors = weight_tensors(out)
    flat = np.concatenate([p.detach().abs().numpy().ravel() for _, p in tensors])
    k = math.floor(Fraction(repr(float(rate))) * len(flat))
    if k == 0:
        return out
    drop = np.zeros(len(flat), dtype=bool)
    drop[np.argsort(flat, kind="stable")[:k]] = True
    start = 0
    with torch.no_grad():
        for _, p in tensors:
            n = p.numel()
            mask = torch.from_numpy(drop[start:start + n].reshape(p.shape))
            p[mask] = 0.0
            start += n
    out.meta = dict(model.meta, attack=f"prune:{rate}")
    return out


def quantize_tensor(w: torch.Tensor, bits: int) -> torch.Tensor:
    """Min-max affine quantization to ``2**bits`` levels with round-half-to-even."""
    wd = w.detach().double()
    lo, hi = wd.min(), wd.max()
    if lo == hi:
        return w.detach().clone()
    step = (hi - lo) / (2 ** bits - 1)
    return (torch.round((wd - lo) / step) * step + lo).to(w.dtype)


def quantize_weights(model: Classifier, bits: int) -> Classifier:
    if not 1 <= bits <= 16:
        raise ValueError("bits must lie in [1, 16]")
    out = copy.deepcopy(model)
    with torch.no_grad():
        for _, p in weight_tensors(out):
            p.copy_(quantize_tensor(p, bits))
    out.meta = dict(model.meta, attack=f"quantize:{bits}")
    return out


# --------------------------------------------------------------------------- inputs

def gaussian_kernel(sigma: float, radius: int) -> torch.Tensor:
    t = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def preprocess_inputs(samples, method: str, strength: float, seed: int = 0) -> torch.Tensor:
    """Input transformations an adversary may put in front of a stolen model.

    ``strength`` is the blur sigma, the noise std, the bit depth, or the kept
    area fraction of a center crop, depending on ``method``.
    """
    x = _as_inputs(samples)
    n, c, h, w = x.shape
    if method == "blur":
        if not strength > 0:
            raise ValueError("blur sigma must be > 0")
        radius = min(math.ceil(3 * strength), h - 1, w - 1)
        k = gaussian_kernel(strength, radius).to(x.dtype)
        y = x.reshape(n * c, 1, h, w)
        y = F.conv2d(F.pad(y, (radius, radius, 0, 0), mode="reflect"), k.view(1, 1, 1, -1))
        y = F.conv2d(F.pad(y, (0, 0, radius, radius), mode="reflect"), k.view(1, 1, -1, 1))
        return y.reshape(n, c, h, w).clamp(0, 1)
    if method == "noise":
        if strength < 0:
            raise ValueError("noise std must be >= 0")
        if strength == 0:
            return x.clone()
        gen = torch.Generator().manual_seed(seed)
        return (x + strength * torch.randn(x.shape, generator=gen)).clamp(0, 1)
    if method == "input_quantize":
        bits = int(strength)
        if bits != strength or not 1 <= bits <= 8:
            raise ValueError("input quantization bits must be an integer in [1, 8]")
        levels = 2 ** bits - 1
        return torch.round(x * levels) / levels
    if method == "crop":
        if not 0 < strength <= 1:
            raise ValueError("crop keep-fraction must lie in (0, 1]")
        if strength == 1:
            return x.clone()
        side = math.sqrt(strength)
        ch, cw = max(1, round(h * side)), max(1, round(w * side))
        top, left = (h - ch) // 2, (w - cw) // 2
        crop = x[:, :, top:top + ch, left:left + cw]
        return F.interpolate(crop, size=(h, w), mode="bilinear", align_corners=False).clamp(0, 1)
    raise ValueError(f"unknown preprocessing method {method!r}; choose from {PREPROCESS_METHODS}")
