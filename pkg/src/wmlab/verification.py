"""Black-box ownership verification and false-positive / crack probabilities."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import to_float
from .models import predict

DEFAULT_THRESHOLD = 0.2
REPORT_VERSION = 1
NEGLIGIBLE = 1e-30


def as_fraction(x) -> Fraction:
    """Exact rational for ``x``; floats are read by their shortest decimal repr."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def _key_arrays(key_set):
    images = key_set.images
    if hasattr(key_set, "target_label"):
        labels = np.full(len(images), key_set.target_label)
    else:
        labels = np.asarray(key_set.labels)
    return images, labels


def key_predictions(model, key_set) -> np.ndarray:
    images, _ = _key_arrays(key_set)
    x = images if isinstance(images, torch.Tensor) else to_float(images)
    return predict(model, x, "hard")


def watermark_success_rate(model, key_set) -> float:
    """Fraction of key samples the model labels with the target label (hard labels only)."""
    images, labels = _key_arrays(key_set)
    if len(images) == 0:
        raise ValueError("key set is empty")
    hits = int(np.sum(key_predictions(model, key_set) == labels))
    return float(Fraction(hits, len(images)))


@dataclass
class VerificationReport:
    model_id: str
    key_set_id: str
    n: int
    hits: int
    wsr: float
    threshold: float
    decision: str
    predictions: list[int] = field(repr=False)
    timestamp: float = 0.0
    tool_version: str = __version__
    report_version: int = REPORT_VERSION

    @property
    def owned(self) -> bool:
        return self.decision == "owned"

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "VerificationReport":
        d = json.loads(Path(path).read_text())
        if d.get("report_version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('report_version')}")
        return cls(**d)


def decide(hits: int, n: int, threshold) -> bool:
    return Fraction(hits, n) >= as_fraction(threshold)


def verify_ownership(model, key_set, threshold: float = DEFAULT_THRESHOLD,
                     model_id: str = "suspect", key_set_id: str = "key",
                     path: str | Path | None = None) -> VerificationReport:
    """Declare ``model`` pirated when its WSR on ``key_set`` reaches ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    images, labels = _key_arrays(key_set)
    if len(images) == 0:
        raise ValueError("key set is empty")
    preds = key_predictions(model, key_set)
    hits = int(np.sum(preds == labels))
    report = VerificationReport(
        model_id=model_id, key_set_id=key_set_id, n=len(images), hits=hits,
        wsr=float(Fraction(hits, len(images))), threshold=threshold,
        decision="owned" if decide(hits, len(images), threshold) else "not-owned",
        predictions=[int(p) for p in preds], timestamp=time.time())
    if path is not None:
        report.save(path)
    return report


# --------------------------------------------------------------------------- guarantees

def tail_start(n: int, threshold) -> int:
    """Smallest hit count whose rate reaches ``threshold``: ``ceil(n*T)``."""
    return math.ceil(n * as_fraction(threshold))


def log_binom_pmf(k: int, n: int, p: float) -> float:
    return (math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
            + k * math.log(p) + (n - k) * math.log1p(-p))


def false_positive_tail_log(n: int, K: int, threshold) -> float:
    """Natural log of ``P[X >= ceil(n*T)]`` for ``X ~ Binomial(n, 1/K)``."""
    if n < 1 or K < 2:
        raise ValueError("need n >= 1 and K >= 2")
    if not 0 <= as_fraction(threshold) <= 1:
        raise ValueError("threshold must lie in [0, 1]")
    start = tail_start(n, threshold)
    if start <= 0:
        return 0.0
    p = 1.0 / K
    terms = sorted(log_binom_pmf(k, n, p) for k in range(start, n + 1))
    top = terms[-1]
    return top + math.log(math.fsum(math.exp(t - top) for t in terms))


def false_positive_tail(n: int, K: int, threshold) -> float:
    """Chance that a model guessing uniformly over ``K`` classes passes verification."""
    return math.exp(false_positive_tail_log(n, K, threshold))


def format_probability(p_log: float) -> str:
    """Human rendering; values below 1e-30 show as ``≈0`` with their log10."""
    log10 = p_log / math.log(10)
    if log10 < math.log10(NEGLIGIBLE):
        return f"≈0 (log10={log10:.2f})"
    return f"{math.exp(p_log):.6g}"


@dataclass(frozen=True)
class CrackProbabilities:
    """Guessing odds: the source-class set, the target label, and both."""

    combination: Fraction  # 1 / C(K, 4)
    target: Fraction  # 1 / K
    joint: Fraction

    def as_floats(self) -> tuple[float, float, float]:
        return float(self.combination), float(self.target), float(self.joint)


def crack_probabilities(K: int, sources: int = 4) -> CrackProbabilities:
    if K < sources:
        raise ValueError(f"need at least {sources} classes, got {K}")
    r1 = Fraction(1, math.comb(K, sources))
    r2 = Fraction(1, K)
    return CrackProbabilities(r1, r2, r1 * r2)


def guarantee_table(ns, Ks, thresholds) -> list[dict]:
    rows = []
    for n in ns:
        for K in Ks:
            for t in thresholds:
                lp = false_positive_tail_log(n, K, t)
                row = {"n": n, "K": K, "T": t, "tail": math.exp(lp),
                       "tail_log10": lp / math.log(10), "display": format_probability(lp)}
                if K >= 4:
                    r1, _, r = crack_probabilities(K).as_floats()
                    row.update(crack=r1, joint=r)
                rows.append(row)
    return rows
