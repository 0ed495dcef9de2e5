"""
Per-layer gate sampling and patch-token restructuring.

On every forward pass each attention layer draws a value ``p`` and, when
``p <= threshold``, reorders the patch tokens entering its attention sublayer
with a fresh uniform permutation. Token 0 (the class token) never moves.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, gather_rows

GATE_MODES = ("uniform", "gaussian")

# Stream tags keep the gate RNG independent of other per-image randomness
# (DIM transforms), so enabling one never shifts the other's draws.
STREAM_GATES = 0
STREAM_DIM = 1


def counter_rng(seed: int, *counter: int) -> np.random.Generator:
    """Independent generator for a (seed, counter...) tuple."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, *(int(c) for c in counter)])


@dataclass
class RestructurePolicy:
    threshold: float
    num_layers: int
    gate_mode: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be positive")
        if self.gate_mode == "uniform" and not (0.0 <= self.threshold <= 1.0):
            raise ConfigError(f"threshold must lie in [0, 1] in uniform mode, got {self.threshold}")
        if not np.isfinite(self.threshold):
            raise ConfigError("threshold must be finite")


@dataclass
class GateSample:
    """Gates for one image on one forward pass."""

    values: np.ndarray
    open: np.ndarray
    permutations: List[Optional[np.ndarray]] = field(default_factory=list)

    @property
    def num_open(self) -> int:
        return int(self.open.sum())


def _draw_values(rng, policy: RestructurePolicy):
    if policy.gate_mode == "uniform":
        return rng.random(policy.num_layers)
    return rng.standard_normal(policy.num_layers)


def sample_gates(policy: RestructurePolicy, num_patches: int, counter: Sequence[int] = ()) -> GateSample:
    """Draw per-layer gate values and permutations for the open layers.

    Permutations are arrays of length ``num_patches + 1`` over token indices,
    with index 0 fixed and a uniform shuffle of ``1..num_patches`` after it.
    """
    rng = counter_rng(policy.seed, STREAM_GATES, *counter)
    values = _draw_values(rng, policy)
    is_open = values <= policy.threshold
    perms: List[Optional[np.ndarray]] = []
    for layer_open in is_open:
        if layer_open:
            perms.append(np.concatenate(([0], rng.permutation(num_patches) + 1)))
        else:
            perms.append(None)
    return GateSample(values, is_open, perms)


@dataclass
class BatchGates:
    """Gates for a batch of images on one forward pass, stacked per layer.

    ``layer_index[l]`` is ``None`` when no image in the batch opened layer
    ``l``; otherwise a ``[B, N+1]`` index array where closed images carry the
    identity.
    """

    samples: List[GateSample]
    layer_index: List[Optional[np.ndarray]]
    layer_inverse: List[Optional[np.ndarray]]

    @classmethod
    def stack(cls, samples: Sequence[GateSample], num_tokens: int) -> "BatchGates":
        num_layers = len(samples[0].open) if samples else 0
        identity = np.arange(num_tokens)
        index, inverse = [], []
        for layer in range(num_layers):
            if not any(s.open[layer] for s in samples):
                index.append(None)
                inverse.append(None)
                continue
            rows = np.stack([s.permutations[layer] if s.open[layer] else identity for s in samples])
            index.append(rows)
            inverse.append(np.argsort(rows, axis=-1))
        return cls(list(samples), index, inverse)

    def for_layer(self, layer: int):
        if layer >= len(self.layer_index):
            return None, None
        return self.layer_index[layer], self.layer_inverse[layer]


def sample_batch_gates(policy, num_patches, image_ids, iteration, pass_index) -> BatchGates:
    samples = [sample_gates(policy, num_patches, (i, iteration, pass_index)) for i in image_ids]
    return BatchGates.stack(samples, num_patches + 1)


def check_permutation(permutation, num_tokens: int) -> np.ndarray:
    """Validate a token permutation: a bijection on ``0..num_tokens-1`` fixing 0."""
    perm = np.asarray(permutation)
    if perm.ndim < 1 or perm.shape[-1] != num_tokens:
        raise ContractError(f"permutation length {perm.shape[-1:]} does not match {num_tokens} tokens")
    if not np.issubdtype(perm.dtype, np.integer):
        raise ContractError("permutation must contain integers")
    rows = perm.reshape(-1, num_tokens)
    if (rows[:, 0] != 0).any():
        raise ContractError("permutation must keep the class token (index 0) in place")
    if (np.sort(rows, axis=-1) != np.arange(num_tokens)).any():
        raise ContractError("permutation is not a bijection on token indices")
    return perm


def restructure(tokens: Tensor, permutation, inverse=None, validate=True) -> Tensor:
    """Reorder patch rows: ``out[..., i, :] = tokens[..., permutation[i], :]``.

    ``permutation`` may be a full token permutation (length N+1, first entry
    0) or a patch permutation over ``1..N`` (length N), which is extended with
    the fixed class token.
    """
    num_tokens = tokens.shape[-2]
    perm = np.asarray(permutation)
    if perm.shape[-1] == num_tokens - 1:
        perm = np.concatenate([np.zeros(perm.shape[:-1] + (1,), dtype=perm.dtype), perm], axis=-1)
    if validate:
        check_permutation(perm, num_tokens)
    if inverse is None:
        inverse = np.argsort(perm, axis=-1)
    return gather_rows(tokens, perm, inverse=inverse)
