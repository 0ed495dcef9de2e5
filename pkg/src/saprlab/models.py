"""
Desk-scale classifiers: a ViT whose attention sublayers accept a restructuring
hook, plus a small CNN and an MLP-Mixer style network used as black-box
transfer targets.

All models take images on the 0-255 scale shaped ``[C, S, S]`` or
``[B, C, S, S]`` and apply a fixed affine normalisation internally.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .sapr import BatchGates, restructure
from .tensor import Tensor


def normalize_pixels(x: Tensor) -> Tensor:
    """Map 0..255 pixels to [-1, 1]."""
    return x * (1.0 / 127.5) - 1.0


def trunc_normal(rng, shape, std, bound=2.0):
    """Normal samples truncated to +-``bound`` standard deviations (by resampling)."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class Module:
    """Named parameter container shared by all model types."""

    arch = "module"

    def __init__(self):
        self.params: Dict[str, Tensor] = {}

    def _param(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)
        return self.params[name]

    def parameters(self):
        return list(self.params.values())

    def requires_grad_(self, flag: bool = True):
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None
        return self

    @contextmanager
    def inference(self):
        """Temporarily stop parameters from recording graph nodes."""
        flags = [(p, p.requires_grad) for p in self.params.values()]
        for p, _ in flags:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in flags:
                p.requires_grad = flag

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) ^ set(state)
        if missing:
            raise ContractError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DimensionError(f"{k}: expected {self.params[k].shape}, got {v.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def config_dict(self) -> dict:
        return asdict(self.config)

    def predict(self, images, batch_size=256) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        preds = []
        with self.inference():
            for start in range(0, len(images), batch_size):
                logits = self.forward(Tensor(images[start : start + batch_size]))
                preds.append(np.argmax(logits.data, axis=-1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _batched(image: Tensor, channels, size):
    if image.ndim == 3:
        image = image.reshape((1,) + image.shape)
        squeeze = True
    else:
        squeeze = False
    if image.ndim != 4 or image.shape[1:] != (channels, size, size):
        raise DimensionError(f"expected image of shape [{channels}x{size}x{size}] (optionally batched), got {image.shape}")
    return image, squeeze


def patchify(x: Tensor, patch: int) -> Tensor:
    """``[B, C, S, S]`` -> ``[B, N, C*patch*patch]`` with patches in row-major order."""
    B, C, S, _ = x.shape
    g = S // patch
    x = x.reshape(B, C, g, patch, g, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, g * g, C * patch * patch)


# ---------------------------------------------------------------------------
# Vision transformer
# ---------------------------------------------------------------------------


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    in_channels: int = 3
    embed_dim: int = 64
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: int = 4
    num_classes: int = 8
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} does not divide image_size {self.image_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} does not divide embed_dim {self.embed_dim}")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads


class ViTModel(Module):
    arch = "vit"

    def __init__(self, config: Optional[ViTConfig] = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or ViTConfig()
        rng = np.random.default_rng(seed)
        d, hidden = cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
        patch_dim = cfg.in_channels * cfg.patch_size**2
        self._param("patch_w", trunc_normal(rng, (patch_dim, d), 0.02))
        self._param("patch_b", np.zeros(d))
        self._param("cls_token", trunc_normal(rng, (1, d), 0.02))
        self._param("pos_embed", trunc_normal(rng, (cfg.num_patches + 1, d), 0.02))
        for i in range(cfg.num_blocks):
            p = f"blocks.{i}."
            self._param(p + "ln1_g", np.ones(d))
            self._param(p + "ln1_b", np.zeros(d))
            self._param(p + "qkv_w", trunc_normal(rng, (d, 3 * d), 0.02))
            self._param(p + "qkv_b", np.zeros(3 * d))
            self._param(p + "proj_w", trunc_normal(rng, (d, d), 0.02))
            self._param(p + "proj_b", np.zeros(d))
            self._param(p + "ln2_g", np.ones(d))
            self._param(p + "ln2_b", np.zeros(d))
            self._param(p + "fc1_w", trunc_normal(rng, (d, hidden), 0.02))
            self._param(p + "fc1_b", np.zeros(hidden))
            self._param(p + "fc2_w", trunc_normal(rng, (hidden, d), 0.02))
            self._param(p + "fc2_b", np.zeros(d))
        self._param("norm_g", np.ones(d))
        self._param("norm_b", np.zeros(d))
        self._param("head_w", trunc_normal(rng, (d, cfg.num_classes), 0.02))
        self._param("head_b", np.zeros(cfg.num_classes))

    def block_weights(self, i: int) -> Dict[str, Tensor]:
        prefix = f"blocks.{i}."
        return {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)}

    def forward(self, image, gates: Optional[BatchGates] = None) -> Tensor:
        return vit_forward(image, self, gates)


def patch_embed(image, model: ViTModel) -> Tensor:
    """Embed an image into ``[(N+1), d]`` tokens (``[B, N+1, d]`` when batched)."""
    cfg = model.config
    x, squeeze = _batched(T.as_tensor(image), cfg.in_channels, cfg.image_size)
    p = model.params
    tokens = patchify(normalize_pixels(x), cfg.patch_size) @ p["patch_w"] + p["patch_b"]
    B = x.shape[0]
    cls = p["cls_token"].reshape(1, 1, cfg.embed_dim) + np.zeros((B, 1, cfg.embed_dim))
    out = T.concat([cls, tokens], axis=1) + p["pos_embed"]
    return out.reshape(out.shape[1:]) if squeeze else out


def attention_forward(tokens: Tensor, weights: Dict[str, Tensor], num_heads: int, permutation=None,
                      inverse=None, return_attention=False):
    """Multi-head self-attention over ``[..., T, d]`` tokens.

    With ``permutation`` set (the gate is open) the patch rows are reordered
    before the Q/K/V projection and the attention runs on the restructured
    sequence. The output rows follow the restructured order.
    """
    if permutation is not None:
        tokens = restructure(tokens, permutation, inverse=inverse, validate=inverse is None)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.reshape((1,) + tokens.shape)
    B, n_tok, d = tokens.shape
    dk = d // num_heads
    qkv = tokens @ weights["qkv_w"] + weights["qkv_b"]
    qkv = qkv.reshape(B, n_tok, 3, num_heads, dk).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ T.swap_last(k)) * (1.0 / math.sqrt(dk))
    attn = T.softmax_rows(scores)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, n_tok, d)
    out = ctx @ weights["proj_w"] + weights["proj_b"]
    if squeeze:
        out = out.reshape(out.shape[1:])
    if return_attention:
        return out, attn
    return out


def transformer_block(x: Tensor, w: Dict[str, Tensor], cfg: ViTConfig, permutation=None, inverse=None) -> Tensor:
    """Pre-norm block. The restructuring hook sits on the attention input only;
    the residual branch keeps the original token order."""
    h = T.layer_norm(x, w["ln1_g"], w["ln1_b"], cfg.ln_eps)
    x = x + attention_forward(h, w, cfg.num_heads, permutation, inverse)
    h = T.layer_norm(x, w["ln2_g"], w["ln2_b"], cfg.ln_eps)
    h = T.gelu(h @ w["fc1_w"] + w["fc1_b"]) @ w["fc2_w"] + w["fc2_b"]
    return x + h


def vit_forward(image, model: ViTModel, gates: Optional[BatchGates] = None) -> Tensor:
    """Logits ``[K]`` for one image or ``[B, K]`` for a batch.

    ``gates`` carries this pass's sampled restructuring decisions; ``None``
    runs the plain network.
    """
    cfg = model.config
    image = T.as_tensor(image)
    squeeze = image.ndim == 3
    x = patch_embed(image, model)
    if squeeze:
        x = x.reshape((1,) + x.shape)
    for i in range(cfg.num_blocks):
        perm, inv = gates.for_layer(i) if gates is not None else (None, None)
        if perm is not None and perm.shape[0] != x.shape[0]:
            raise DimensionError(f"gates for {perm.shape[0]} images, batch has {x.shape[0]}")
        x = transformer_block(x, model.block_weights(i), cfg, perm, inv)
    x = T.layer_norm(x, model.params["norm_g"], model.params["norm_b"], cfg.ln_eps)
    logits = x[:, 0, :] @ model.params["head_w"] + model.params["head_b"]
    return logits.reshape((cfg.num_classes,)) if squeeze else logits


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def cross_entropy_loss(logits: Tensor, label, reduction: str = "mean") -> Tensor:
    """``-log softmax(logits)[label]``; batched logits reduce by ``mean`` or ``sum``."""
    logits = T.as_tensor(logits)
    k = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if not np.issubdtype(labels.dtype, np.integer):
        raise ContractError("labels must be integer class indices")
    if (labels < 0).any() or (labels >= k).any():
        raise ContractError(f"label out of range for {k} classes: {labels.tolist()}")
    logp = T.log_softmax(logits)
    if logits.ndim == 1:
        return -logp[int(labels[0])]
    if len(labels) != logits.shape[0]:
        raise DimensionError(f"{len(labels)} labels for {logits.shape[0]} rows")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = (logp * onehot).sum()
    if reduction == "sum":
        return -picked
    if reduction == "mean":
        return picked * (-1.0 / len(labels))
    raise ContractError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# Transfer targets
# ---------------------------------------------------------------------------


@dataclass
class CNNConfig:
    image_size: int = 32
    in_channels: int = 3
    channels1: int = 16
    channels2: int = 32
    kernel_size: int = 3
    hidden: int = 64
    num_classes: int = 8


class CNNModel(Module):
    """conv-relu-pool x2, then two dense layers."""

    arch = "cnn"

    def __init__(self, config: Optional[CNNConfig] = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or CNNConfig()
        if cfg.image_size % 4:
            raise ConfigError("CNN image_size must be divisible by 4")
        rng = np.random.default_rng(seed)
        k = cfg.kernel_size
        fan1, fan2 = cfg.in_channels * k * k, cfg.channels1 * k * k
        flat = cfg.channels2 * (cfg.image_size // 4) ** 2
        self._param("conv1_w", trunc_normal(rng, (cfg.channels1, cfg.in_channels, k, k), math.sqrt(2.0 / fan1)))
        self._param("conv1_b", np.zeros(cfg.channels1))
        self._param("conv2_w", trunc_normal(rng, (cfg.channels2, cfg.channels1, k, k), math.sqrt(2.0 / fan2)))
        self._param("conv2_b", np.zeros(cfg.channels2))
        self._param("fc1_w", trunc_normal(rng, (flat, cfg.hidden), math.sqrt(2.0 / flat)))
        self._param("fc1_b", np.zeros(cfg.hidden))
        self._param("fc2_w", trunc_normal(rng, (cfg.hidden, cfg.num_classes), math.sqrt(1.0 / cfg.hidden)))
        self._param("fc2_b", np.zeros(cfg.num_classes))

    def forward(self, image) -> Tensor:
        cfg, p = self.config, self.params
        x, squeeze = _batched(T.as_tensor(image), cfg.in_channels, cfg.image_size)
        pad = cfg.kernel_size // 2
        h = T.avg_pool2d(T.relu(T.conv2d(normalize_pixels(x), p["conv1_w"], p["conv1_b"], pad)))
        h = T.avg_pool2d(T.relu(T.conv2d(h, p["conv2_w"], p["conv2_b"], pad)))
        h = h.reshape(h.shape[0], -1)
        h = T.relu(h @ p["fc1_w"] + p["fc1_b"])
        out = h @ p["fc2_w"] + p["fc2_b"]
        return out.reshape((cfg.num_classes,)) if squeeze else out


@dataclass
class MLPConfig:
    image_size: int = 32
    in_channels: int = 3
    patch_size: int = 4
    hidden: int = 64
    num_classes: int = 8


class MLPModel(Module):
    """Patch embedding, one token-mixing and one channel-mixing dense layer, linear head."""

    arch = "mlp"

    def __init__(self, config: Optional[MLPConfig] = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or MLPConfig()
        if cfg.image_size % cfg.patch_size:
            raise ConfigError("MLP patch_size must divide image_size")
        rng = np.random.default_rng(seed)
        n = (cfg.image_size // cfg.patch_size) ** 2
        patch_dim = cfg.in_channels * cfg.patch_size**2
        h = cfg.hidden
        self._param("embed_w", trunc_normal(rng, (patch_dim, h), math.sqrt(2.0 / patch_dim)))
        self._param("embed_b", np.zeros(h))
        self._param("token_w", trunc_normal(rng, (n, n), math.sqrt(1.0 / n)))
        self._param("token_b", np.zeros((n, 1)))
        self._param("channel_w", trunc_normal(rng, (h, h), math.sqrt(2.0 / h)))
        self._param("channel_b", np.zeros(h))
        self._param("head_w", trunc_normal(rng, (h, cfg.num_classes), math.sqrt(1.0 / h)))
        self._param("head_b", np.zeros(cfg.num_classes))

    def forward(self, image) -> Tensor:
        cfg, p = self.config, self.params
        x, squeeze = _batched(T.as_tensor(image), cfg.in_channels, cfg.image_size)
        h = T.gelu(patchify(normalize_pixels(x), cfg.patch_size) @ p["embed_w"] + p["embed_b"])  # [B, N, h]
        h = h + T.gelu(p["token_w"] @ h + p["token_b"])  # mixes across tokens
        h = h + T.gelu(h @ p["channel_w"] + p["channel_b"])  # mixes across channels
        out = h.mean(axis=1) @ p["head_w"] + p["head_b"]
        return out.reshape((cfg.num_classes,)) if squeeze else out


TransferModel = (CNNModel, MLPModel)

ARCHITECTURES = {"vit": (ViTModel, ViTConfig), "cnn": (CNNModel, CNNConfig), "mlp": (MLPModel, MLPConfig)}


def build_model(arch: str, config: Optional[dict] = None, seed: int = 0) -> Module:
    try:
        cls, cfg_cls = ARCHITECTURES[arch]
    except KeyError:
        raise ConfigError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHITECTURES)}") from None
    try:
        cfg = cfg_cls(**(config or {}))
    except TypeError as exc:
        raise ConfigError(f"{arch} config: {exc}") from None
    return cls(cfg, seed=seed)


def transfer_forward(image, model: Module) -> Tensor:
    """Inference-only logits of a black-box target (no restructuring hook)."""
    x = Tensor(T.as_tensor(image).data)
    with model.inference():
        if isinstance(model, ViTModel):
            return vit_forward(x, model, None)
        return model.forward(x)
