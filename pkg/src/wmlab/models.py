"""Classifier architectures, prediction helpers and the checkpoint format."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"WMLABCKP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sII")


class CheckpointError(ValueError):
    pass


class Classifier(nn.Module):
    """Image classifier split into a feature ``body`` and a linear ``head``.

    Inputs are ``(N, C, H, W)`` floats in [0, 1]; per-channel standardization
    is stored as buffers so checkpoints are self-contained.
    """

    def __init__(self, arch: str, body: nn.Module, feature_dim: int, num_classes: int,
                 input_shape: tuple[int, int, int], mean=None, std=None):
        super().__init__()
        self.arch = arch
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.input_shape = tuple(input_shape)
        self.body = body
        self.head = nn.Linear(feature_dim, num_classes)
        c = input_shape[0]
        self.register_buffer("input_mean", torch.tensor(mean or [0.5] * c).view(1, c, 1, 1))
        self.register_buffer("input_std", torch.tensor(std or [0.5] * c).view(1, c, 1, 1))
        self.meta: dict = {}

    def forward_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"expected input shape {self.input_shape}, got {tuple(x.shape[1:])}")
        feats = self.body((x - self.input_mean) / self.input_std)
        return self.head(feats), feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_features(x)[0]

    def final_layer_parameters(self):
        return list(self.head.parameters())

    def body_parameters(self):
        return list(self.body.parameters())

    def reset_final_layer(self, seed: int) -> None:
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.head.reset_parameters()
        torch.random.set_rng_state(gen_state)

    def spec(self) -> dict:
        return {"arch": self.arch, "num_classes": self.num_classes,
                "feature_dim": self.feature_dim, "input_shape": list(self.input_shape)}


def _naivenet(c: int, h: int, w: int, width: int = 16, hidden: int = 128):
    body = nn.Sequential(
        nn.Conv2d(c, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(2 * width * (h // 4) * (w // 4), hidden), nn.ReLU(),
    )
    return body, hidden


def _vgglike(c: int, h: int, w: int, width: int = 32, hidden: int = 128):
    body = nn.Sequential(
        nn.Conv2d(c, width, 3, padding=1), nn.ReLU(),
        nn.Conv2d(width, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(),
        nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(2 * width * (h // 4) * (w // 4), 2 * hidden), nn.ReLU(),
        nn.Linear(2 * hidden, hidden), nn.ReLU(),
    )
    return body, hidden


def _mlp(c: int, h: int, w: int, hidden: int = 256):
    body = nn.Sequential(nn.Flatten(), nn.Linear(c * h * w, hidden), nn.ReLU(),
                         nn.Linear(hidden, hidden // 2), nn.ReLU())
    return body, hidden // 2


ARCHITECTURES: dict[str, Callable] = {
    "naivenet": _naivenet,
    "naivenet-wide": lambda c, h, w: _naivenet(c, h, w, width=32, hidden=256),
    "vgglike": _vgglike,
    "mlp": _mlp,
}


def build_model(arch: str, num_classes: int, input_shape, seed: int = 0,
                mean=None, std=None) -> Classifier:
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHITECTURES)}")
    torch.manual_seed(seed)
    body, feature_dim = ARCHITECTURES[arch](*input_shape)
    return Classifier(arch, body, feature_dim, num_classes, input_shape, mean, std)


# --------------------------------------------------------------------------- prediction

@torch.no_grad()
def logits_of(model: Callable, x: torch.Tensor, batch_size: int = 512) -> torch.Tensor:
    if isinstance(model, nn.Module):
        model.eval()
    out = [model(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    return torch.cat(out) if out else torch.empty(0)


def argmax_lowest(logits: torch.Tensor) -> np.ndarray:
    # numpy argmax returns the first maximal index, which is the tie rule we need
    return np.argmax(logits.detach().cpu().numpy(), axis=1)


def predict(model: Callable, x: torch.Tensor, mode: str = "hard", batch_size: int = 512):
    """Soft mode returns float64 softmax rows (torch); hard mode returns label ids (numpy)."""
    logits = logits_of(model, x, batch_size)
    if mode == "soft":
        return F.softmax(logits.double(), dim=1)
    if mode == "hard":
        return argmax_lowest(logits)
    raise ValueError(f"unknown prediction mode {mode!r}")


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(model: Classifier, path: str | os.PathLike) -> Path:
    """Write ``model`` as magic + version + JSON header + raw tensor bytes."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = dict(model.spec(), meta=model.meta, tensors=entries,
                  payload_sha256=hashlib.sha256(payload).hexdigest())
    hbytes = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    return path


def load_checkpoint(path: str | os.PathLike) -> Classifier:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"corrupt checkpoint: {path} is truncated")
    magic, version, hlen = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"corrupt checkpoint: bad magic in {path}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")
    try:
        header = json.loads(raw[_HEADER.size:_HEADER.size + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: unreadable header in {path}") from exc
    payload = raw[_HEADER.size + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"corrupt checkpoint: payload hash mismatch in {path}")

    model = build_model(header["arch"], header["num_classes"], tuple(header["input_shape"]))
    state = {}
    for e in header["tensors"]:
        arr = np.frombuffer(payload, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.meta = header["meta"]
    return model


def parameters_equal(a: nn.Module, b: nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
