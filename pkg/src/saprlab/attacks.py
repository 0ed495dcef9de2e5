"""
Momentum-based transfer attacks (MIM, DIM, SIM) with optional patch
restructuring inside the white-box ViT.

Images live on the 0-255 scale; ``epsilon`` and ``alpha`` are in pixel units.
Every random decision is drawn from a counter-based stream keyed by
``(seed, image_id, iteration, ...)``, so results do not depend on how images
are batched or distributed over workers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .models import ViTModel, cross_entropy_loss, vit_forward
from .sapr import STREAM_DIM, RestructurePolicy, counter_rng, sample_batch_gates
from .tensor import Tensor

METHODS = ("MIM", "DIM", "SIM")
PIXEL_MIN, PIXEL_MAX = 0.0, 255.0


@dataclass
class AttackConfig:
    epsilon: float = 16.0
    alpha: Optional[float] = None  # defaults to epsilon / iterations
    iterations: int = 50
    method: str = "MIM"
    sapr_enabled: bool = False
    threshold: float = 0.0
    gate_mode: str = "uniform"
    decay: float = 1.0
    dim_prob: float = 0.5
    dim_min_ratio: float = 0.9
    sim_scales: int = 5
    use_sign: bool = True
    seed: int = 0

    def __post_init__(self):
        self.method = self.method.upper()
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError("alpha must be positive")
        if self.sim_scales < 1:
            raise ConfigError("sim_scales must be at least 1")
        if not 0.0 <= self.dim_prob <= 1.0:
            raise ConfigError("dim_prob must lie in [0, 1]")
        if not 0.0 < self.dim_min_ratio <= 1.0:
            raise ConfigError("dim_min_ratio must lie in (0, 1]")
        if self.sapr_enabled:
            # validates threshold against gate_mode
            RestructurePolicy(self.threshold, 1, self.gate_mode, self.seed)

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return float(self.alpha)
        return self.epsilon / self.iterations if self.iterations else self.epsilon

    @property
    def label(self) -> str:
        return self.method + ("+SAPR" if self.sapr_enabled else "")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdversarialExample:
    image_id: int
    x: np.ndarray
    x_adv: np.ndarray
    label: int
    clean_prediction: int
    prediction: int
    budget_violations: int = 0
    loss_trace: Optional[List[float]] = None

    @property
    def delta(self) -> np.ndarray:
        return self.x_adv - self.x

    @property
    def fooled(self) -> bool:
        return self.prediction != self.label


# ---------------------------------------------------------------------------
# Elementary steps
# ---------------------------------------------------------------------------


def clip_to_budget(x_adv, x, epsilon) -> np.ndarray:
    """Project onto the L-infinity ball around ``x`` intersected with [0, 255]."""
    x_adv, x = np.asarray(x_adv, dtype=np.float64), np.asarray(x, dtype=np.float64)
    if x_adv.shape != x.shape:
        raise DimensionError(f"clip_to_budget: {x_adv.shape} vs {x.shape}")
    lo = np.maximum(x - epsilon, PIXEL_MIN)
    hi = np.minimum(x + epsilon, PIXEL_MAX)
    return np.minimum(np.maximum(x_adv, lo), hi)


def budget_violations(x_adv, x, epsilon, atol=1e-9) -> int:
    """Number of images breaking the L-infinity or pixel-range constraint."""
    x_adv, x = np.asarray(x_adv), np.asarray(x)
    if x.ndim == 3:
        x_adv, x = x_adv[None], x[None]
    axes = tuple(range(1, x.ndim))
    over = np.abs(x_adv - x).max(axis=axes) > epsilon + atol
    out_of_range = (x_adv.min(axis=axes) < PIXEL_MIN - atol) | (x_adv.max(axis=axes) > PIXEL_MAX + atol)
    return int((over | out_of_range).sum())


def l1_normalize(grad: np.ndarray) -> np.ndarray:
    """Divide each image's gradient by its L1 norm; all-zero gradients stay zero."""
    grad = np.asarray(grad, dtype=np.float64)
    batched = grad.reshape(grad.shape[0], -1) if grad.ndim == 4 else grad.reshape(1, -1)
    norms = np.abs(batched).sum(axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    out = batched / safe[:, None]
    return out.reshape(grad.shape)


def mim_step(momentum, grad, decay, alpha, x_adv, x, epsilon, use_sign=True):
    """One momentum update: ``g <- decay*g + grad/|grad|_1``, step along sign(g), project."""
    new_momentum = decay * np.asarray(momentum, dtype=np.float64) + l1_normalize(grad)
    direction = np.sign(new_momentum) if use_sign else new_momentum
    return new_momentum, clip_to_budget(np.asarray(x_adv) + alpha * direction, x, epsilon)


# ---------------------------------------------------------------------------
# Input transforms
# ---------------------------------------------------------------------------


@dataclass
class DiversityDraw:
    applied: bool
    size: int
    top: int
    left: int


def draw_diversity(rng: np.random.Generator, image_size: int, prob: float, min_ratio: float = 0.9) -> DiversityDraw:
    """Random resize/pad parameters; the rescaled size is drawn from [ceil(min_ratio*S), S]."""
    applied = bool(rng.random() < prob)
    if not applied:
        return DiversityDraw(False, image_size, 0, 0)
    low = int(math.ceil(min_ratio * image_size))
    size = int(rng.integers(low, image_size + 1))
    room = image_size - size
    top = int(rng.integers(0, room + 1))
    left = int(rng.integers(0, room + 1))
    return DiversityDraw(True, size, top, left)


def diversity_index(draw: DiversityDraw, image_size: int):
    """Flat source index and validity mask for a resize-then-pad transform."""
    S = image_size
    if not draw.applied:
        idx = np.arange(S * S)
        return idx, np.ones(S * S, dtype=bool)
    src = (np.arange(draw.size) * S) // draw.size  # nearest-neighbour source coordinate
    rows = np.full(S, -1)
    cols = np.full(S, -1)
    rows[draw.top : draw.top + draw.size] = src
    cols[draw.left : draw.left + draw.size] = src
    mask = (rows[:, None] >= 0) & (cols[None, :] >= 0)
    idx = np.where(mask, rows[:, None] * S + cols[None, :], 0)
    return idx.reshape(-1), mask.reshape(-1)


def apply_diversity(x: Tensor, draws: Sequence[DiversityDraw]) -> Tensor:
    """Apply per-image resize/pad draws to a ``[B, C, S, S]`` batch, differentiably."""
    B, C, S, _ = x.shape
    if len(draws) != B:
        raise DimensionError(f"{len(draws)} diversity draws for batch of {B}")
    if not any(d.applied for d in draws):
        return x
    pairs = [diversity_index(d, S) for d in draws]
    index = np.stack([p[0] for p in pairs])
    mask = np.stack([p[1] for p in pairs])
    flat = x.reshape(B, C, S * S)
    return T.masked_gather(flat, index, mask).reshape(B, C, S, S)


def dim_transform(x, prob: float, rng: np.random.Generator, min_ratio: float = 0.9) -> Tensor:
    """Single-image diverse-input transform (``[C, S, S]`` in and out)."""
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[1] != x.shape[2]:
        raise DimensionError(f"dim_transform expects [C x S x S], got {x.shape}")
    draw = draw_diversity(rng, x.shape[-1], prob, min_ratio)
    out = apply_diversity(x.reshape((1,) + x.shape), [draw])
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------


class _GateSource:
    """Samples per-image gates for each forward pass of an attack."""

    def __init__(self, cfg: AttackConfig, model: ViTModel, image_ids):
        self.policy = None
        if cfg.sapr_enabled:
            self.policy = RestructurePolicy(cfg.threshold, model.config.num_blocks, cfg.gate_mode, cfg.seed)
        self.num_patches = model.config.num_patches
        self.image_ids = list(image_ids)

    def __call__(self, iteration, pass_index):
        if self.policy is None:
            return None
        return sample_batch_gates(self.policy, self.num_patches, self.image_ids, iteration, pass_index)


def _loss_and_grad(model, x_in: np.ndarray, labels, gates, transform=None):
    xt = Tensor(x_in, requires_grad=True)
    inp = transform(xt) if transform is not None else xt
    logits = vit_forward(inp, model, gates)
    loss = cross_entropy_loss(logits, labels, reduction="sum")
    T.backward(loss)
    return loss.item(), xt.grad


def input_gradient(model, x_adv, labels, gates=None) -> np.ndarray:
    """Gradient of the summed cross-entropy with respect to the input batch."""
    return _loss_and_grad(model, x_adv, labels, gates)[1]


def sim_gradient(x_adv, y, model, gate_source=None, scales: int = 5, iteration: int = 0) -> np.ndarray:
    """Average input gradient over copies scaled by ``1/2**i``, ``i < scales``.

    ``gate_source(iteration, pass_index)`` returns fresh gates for each scaled
    copy (or ``None`` for the plain network).
    """
    if scales < 1:
        raise ContractError("scales must be at least 1")
    x_adv = np.asarray(x_adv, dtype=np.float64)
    total = np.zeros_like(x_adv)
    for i in range(scales):
        gates = gate_source(iteration, i) if gate_source is not None else None
        factor = 1.0 / 2**i
        _, g = _loss_and_grad(model, x_adv, y, gates, transform=lambda t, f=factor: t * f)
        total += g
    return total / scales


def _dim_draws(cfg, image_ids, iteration, image_size):
    return [
        draw_diversity(counter_rng(cfg.seed, STREAM_DIM, i, iteration), image_size, cfg.dim_prob, cfg.dim_min_ratio)
        for i in image_ids
    ]


def attack_gradient(cfg: AttackConfig, model, x_adv, labels, image_ids, iteration, gate_source=None):
    """Method-specific gradient for one iteration; returns ``(loss, grad)``."""
    gate_source = gate_source or _GateSource(cfg, model, image_ids)
    if cfg.method == "SIM":
        grad = sim_gradient(x_adv, labels, model, gate_source, cfg.sim_scales, iteration)
        return float("nan"), grad
    gates = gate_source(iteration, 0)
    transform = None
    if cfg.method == "DIM":
        draws = _dim_draws(cfg, image_ids, iteration, model.config.image_size)
        transform = lambda t: apply_diversity(t, draws)  # noqa: E731
    return _loss_and_grad(model, x_adv, labels, gates, transform)


# ---------------------------------------------------------------------------
# Attack loop
# ---------------------------------------------------------------------------


def attack_batch(x, y, model: ViTModel, cfg: AttackConfig, image_ids=None, debug=False,
                 track_loss=False) -> List[AdversarialExample]:
    """Run the configured attack on a batch ``[B, C, S, S]`` of clean images.

    With ``debug`` the budget is checked after every iteration and violations
    are counted per image. With ``track_loss`` the clean-gate cross-entropy of
    each image is recorded before the first and after every iteration.
    """
    x = np.array(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    B = x.shape[0]
    if len(y) != B:
        raise DimensionError(f"{len(y)} labels for {B} images")
    image_ids = list(range(B)) if image_ids is None else [int(i) for i in image_ids]

    model.requires_grad_(False)
    gate_source = _GateSource(cfg, model, image_ids)
    alpha = cfg.step_size
    x_adv = x.copy()
    momentum = np.zeros_like(x)
    violations = np.zeros(B, dtype=np.int64)
    traces = [[] for _ in range(B)] if track_loss else None
    if track_loss:
        _record_losses(model, x_adv, y, traces)

    for it in range(cfg.iterations):
        _, grad = attack_gradient(cfg, model, x_adv, y, image_ids, it, gate_source)
        momentum, x_adv = mim_step(momentum, grad, cfg.decay, alpha, x_adv, x, cfg.epsilon, cfg.use_sign)
        if debug:
            for b in range(B):
                violations[b] += budget_violations(x_adv[b], x[b], cfg.epsilon)
        if track_loss:
            _record_losses(model, x_adv, y, traces)

    clean_pred = model.predict(x)
    adv_pred = model.predict(x_adv)
    return [
        AdversarialExample(
            image_id=image_ids[b],
            x=x[b],
            x_adv=x_adv[b],
            label=int(y[b]),
            clean_prediction=int(clean_pred[b]),
            prediction=int(adv_pred[b]),
            budget_violations=int(violations[b]),
            loss_trace=traces[b] if track_loss else None,
        )
        for b in range(B)
    ]


def _record_losses(model, x_adv, y, traces):
    logp = T.log_softmax(vit_forward(Tensor(x_adv), model)).data
    for b, trace in enumerate(traces):
        trace.append(float(-logp[b, y[b]]))


def run_attack(x, y, model: ViTModel, cfg: AttackConfig, image_id: int = 0, debug=False) -> AdversarialExample:
    """Attack a single ``[C, S, S]`` image."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"run_attack expects one [C x S x S] image, got {x.shape}")
    return attack_batch(x[None], [y], model, cfg, [image_id], debug=debug)[0]


def _attack_chunk(args):
    x, y, ids, state, model_config, cfg, debug = args
    model = ViTModel(model_config)
    model.load_state_dict(state)
    return attack_batch(x, y, model, cfg, ids, debug=debug)


def attack_dataset(images, labels, model: ViTModel, cfg: AttackConfig, image_ids=None, chunk_size=50,
                   workers=1, debug=False) -> List[AdversarialExample]:
    """Attack many images in fixed-size chunks, optionally across worker processes.

    Chunk boundaries depend only on ``chunk_size``, so the output is the same
    for any worker count.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    ids = np.arange(len(images)) if image_ids is None else np.asarray(image_ids)
    chunks = [slice(s, s + chunk_size) for s in range(0, len(images), chunk_size)]
    if workers <= 1 or len(chunks) <= 1:
        out = []
        for sl in chunks:
            out.extend(attack_batch(images[sl], labels[sl], model, cfg, ids[sl], debug=debug))
        return out
    from concurrent.futures import ProcessPoolExecutor

    state = model.state_dict()
    jobs = [(images[sl], labels[sl], ids[sl], state, model.config, cfg, debug) for sl in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_attack_chunk, jobs))
    return [ex for chunk in results for ex in chunk]


def with_threshold(cfg: AttackConfig, threshold: float) -> AttackConfig:
    return replace(cfg, sapr_enabled=True, threshold=float(threshold))
