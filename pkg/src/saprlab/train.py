"""SGD-with-momentum training and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTagError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractError,
    NumericError,
    TrainingError,
)
from .models import ARCHITECTURES, Module, ViTModel, build_model, cross_entropy_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"SAPRCKPT"
FORMAT_VERSION = 1


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float


def forward(model: Module, x) -> Tensor:
    # restructuring is an attack-time device; training always runs the plain network
    if isinstance(model, ViTModel):
        return model.forward(x, None)
    return model.forward(x)


def evaluate_accuracy(model: Module, dataset: Dataset, batch_size=256) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float((model.predict(dataset.images, batch_size) == dataset.labels).mean())


def train_model(model: Module, dataset: Dataset, epochs=10, lr=0.05, seed=0, batch_size=64, momentum=0.9,
                weight_decay=0.0, grad_clip=None, ema=None, callback=None) -> List[EpochStats]:
    """Mini-batch SGD with heavy-ball momentum on the mean cross-entropy.

    ``grad_clip`` rescales the whole gradient when its global L2 norm exceeds
    it. With ``ema`` set, an exponential moving average of the weights
    (decay ``ema`` per step) is kept and loaded into the model at the end.
    Returns one ``EpochStats`` per epoch with the running train loss and
    accuracy of the live weights. Raises ``TrainingError`` on a non-finite loss.
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    if ema is not None and not 0.0 <= ema < 1.0:
        raise ContractError(f"ema decay must lie in [0, 1), got {ema}")
    rng = np.random.default_rng(seed)
    model.requires_grad_(True)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    shadow = [p.data.copy() for p in params] if ema is not None else None
    history = []
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            model.zero_grad()
            try:
                logits = forward(model, Tensor(dataset.images[idx]))
                loss = cross_entropy_loss(logits, dataset.labels[idx])
            except NumericError as exc:
                raise TrainingError(f"diverged in epoch {epoch}: {exc}") from None
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss became {value} in epoch {epoch}")
            T.backward(loss)
            scale = 1.0
            if grad_clip is not None:
                norm = np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
                if norm > grad_clip:
                    scale = grad_clip / norm
            for p, v in zip(params, velocity):
                g = p.grad * scale if scale != 1.0 else p.grad
                if weight_decay:
                    g = g + weight_decay * p.data
                v *= momentum
                v += g
                p.data = p.data - lr * v
            if shadow is not None:
                for p, avg in zip(params, shadow):
                    avg *= ema
                    avg += (1.0 - ema) * p.data
            total_loss += value * len(idx)
            correct += int((np.argmax(logits.data, axis=-1) == dataset.labels[idx]).sum())
        stats = EpochStats(epoch, total_loss / n, correct / n)
        history.append(stats)
        log.info("epoch %d loss %.4f acc %.3f", epoch, stats.loss, stats.accuracy)
        if callback is not None:
            callback(stats)
    if shadow is not None:
        for p, avg in zip(params, shadow):
            p.data = avg
    model.requires_grad_(False)
    return history


# ---------------------------------------------------------------------------
# Checkpoints
#
# layout (all integers little-endian u32):
#   "SAPRCKPT" | version | len(tag) tag | len(config_json) config_json | count |
#   count x ( len(name) name | ndim | dims... | float64 LE payload )
# ---------------------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def checkpoint_bytes(model: Module) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(model.arch)]
    parts.append(_pack_str(json.dumps(model.config_dict(), sort_keys=True)))
    parts.append(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", p.data.ndim))
        parts.append(struct.pack("<" + "I" * p.data.ndim, *p.data.shape))
        parts.append(p.data.astype("<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Module, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"truncated while reading {what} at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what):
        return self.take(self.u32(what), what).decode("utf-8")


def load_checkpoint(path, expected_arch: Optional[str] = None) -> Module:
    """Rebuild a model from a checkpoint, checking magic, version and tag."""
    return checkpoint_from_bytes(Path(path).read_bytes(), expected_arch)


def checkpoint_from_bytes(raw: bytes, expected_arch: Optional[str] = None) -> Module:
    r = _Reader(raw)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointMagicError("not a saprlab checkpoint (bad magic)")
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    arch = r.string("architecture tag")
    if arch not in ARCHITECTURES:
        raise CheckpointTagError(f"unknown architecture tag {arch!r}")
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointTagError(f"expected a {expected_arch!r} checkpoint, found {arch!r}")
    try:
        config = json.loads(r.string("config"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt config record: {exc}") from None
    model = build_model(arch, config)
    state = {}
    for _ in range(r.u32("parameter count")):
        name = r.string("parameter name")
        ndim = r.u32("ndim")
        shape = struct.unpack("<" + "I" * ndim, r.take(4 * ndim, "shape"))
        count = int(np.prod(shape)) if ndim else 1
        payload = r.take(8 * count, f"payload of {name}")
        state[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after parameters")
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    model.requires_grad_(False)
    return model
