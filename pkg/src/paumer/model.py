"""Segmenter-style encoder/decoder on top of :mod:`paumer.numerics`.

Parameters live in a plain ``dict[str, Tensor]`` whose insertion order is the
canonical order used by checkpoints:

    embed.weight (3P^2, D), embed.bias (D), pos_embed (N, D)
    enc.{i}.{ln1.weight, ln1.bias, attn.q.weight, attn.q.bias, attn.k.weight,
             attn.k.bias, attn.v.weight, attn.v.bias, attn.o.weight, attn.o.bias,
             ln2.weight, ln2.bias, ffn.fc1.weight, ffn.fc1.bias,
             ffn.fc2.weight, ffn.fc2.bias}            for i = 1..L
    aux.weight (D, K), aux.bias (K)
    linear decoder:  dec.weight (D, K), dec.bias (K)
    mask decoder:    dec.cls_emb (K, D), dec.{j}.<layer keys above> for j = 1..M

Only the configured decoder's tensors are allocated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import ContractError, Tensor

Params = dict[str, Tensor]

LAYER_KEYS = (
    "ln1.weight", "ln1.bias",
    "attn.q.weight", "attn.q.bias", "attn.k.weight", "attn.k.bias",
    "attn.v.weight", "attn.v.bias", "attn.o.weight", "attn.o.bias",
    "ln2.weight", "ln2.bias",
    "ffn.fc1.weight", "ffn.fc1.bias", "ffn.fc2.weight", "ffn.fc2.bias",
)

DECODER_KINDS = ("linear", "mask_transformer")


class ConfigError(ValueError):
    """An invalid model, pause or training configuration."""


@dataclass(frozen=True)
class ModelConfig:
    image_height: int
    image_width: int
    patch_size: int
    embed_dim: int
    num_layers: int
    num_heads: int
    num_classes: int
    ffn_hidden: int | None = None
    decoder_kind: str = "mask_transformer"
    mask_decoder_layers: int = 2

    def __post_init__(self):
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.embed_dim)
        p = self.patch_size
        if p < 1 or self.image_height % p or self.image_width % p:
            raise ConfigError(
                f"image {self.image_height}x{self.image_width} is not divisible by patch size {p}")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        # Pausing starts at layer 3 during training; that bound is enforced on the
        # training layer set, so shallow models remain usable for unit checks.
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.decoder_kind not in DECODER_KINDS:
            raise ConfigError(f"decoder_kind must be one of {DECODER_KINDS}, got {self.decoder_kind!r}")
        if self.decoder_kind == "mask_transformer" and self.mask_decoder_layers < 0:
            raise ConfigError("mask_decoder_layers must be >= 0")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


# -- parameter layout -------------------------------------------------------


def _layer_shapes(d: int, hidden: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for key in LAYER_KEYS:
        if key.startswith("ln"):
            shapes[key] = (d,)
        elif key.startswith("attn"):
            shapes[key] = (d, d) if key.endswith("weight") else (d,)
    shapes["ffn.fc1.weight"] = (d, hidden)
    shapes["ffn.fc1.bias"] = (hidden,)
    shapes["ffn.fc2.weight"] = (hidden, d)
    shapes["ffn.fc2.bias"] = (d,)
    return {k: shapes[k] for k in LAYER_KEYS}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in canonical order."""
    d, k, p = config.embed_dim, config.num_classes, config.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "embed.weight": (3 * p * p, d),
        "embed.bias": (d,),
        "pos_embed": (config.num_tokens, d),
    }
    layer = _layer_shapes(d, config.ffn_hidden)
    for i in range(1, config.num_layers + 1):
        shapes.update({f"enc.{i}.{key}": s for key, s in layer.items()})
    shapes["aux.weight"] = (d, k)
    shapes["aux.bias"] = (k,)
    if config.decoder_kind == "linear":
        shapes["dec.weight"] = (d, k)
        shapes["dec.bias"] = (k,)
    else:
        shapes["dec.cls_emb"] = (k, d)
        for j in range(1, config.mask_decoder_layers + 1):
            shapes.update({f"dec.{j}.{key}": s for key, s in layer.items()})
    return shapes


def count_parameters(config: ModelConfig, *, include_aux: bool = True,
                     include_decoder: bool = True) -> int:
    """Analytic parameter count; nothing is allocated."""
    total = 0
    for name, shape in param_shapes(config).items():
        if name.startswith("aux.") and not include_aux:
            continue
        if name.startswith("dec.") and not include_decoder:
            continue
        total += int(np.prod(shape))
    return total


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(config: ModelConfig, rng: np.random.Generator | int = 0) -> Params:
    """Truncated-normal weights (std 0.02), zero biases, unit layernorm gains."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("bias") or name == "pos_embed":
            data = np.zeros(shape)
        elif ".ln" in name and name.endswith("weight"):
            data = np.ones(shape)
        else:
            data = _trunc_normal(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def layer_params(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {key: params[f"{prefix}.{key}"] for key in LAYER_KEYS}


# -- forward pieces ---------------------------------------------------------


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W, 3)`` -> ``(B, N, 3P^2)``; tokens row-major over the grid, pixels (y, x, c) within."""
    b, h, w, c = image.shape
    gh, gw = h // patch, w // patch
    x = image.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


def patch_embed(image, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if image.ndim != 4 or image.shape[1:] != (config.image_height, config.image_width, 3):
        raise ConfigError(
            f"image shape {image.shape[1:]} does not match config "
            f"({config.image_height}, {config.image_width}, 3)")
    patches = patchify(image, config.patch_size)
    x = nx.linear(patches, params["embed.weight"], params["embed.bias"])
    return nx.add(x, params["pos_embed"])


def attention(h: Tensor, lp: Mapping[str, Tensor], num_heads: int) -> Tensor:
    q = nx.linear(h, lp["attn.q.weight"], lp["attn.q.bias"])
    k = nx.linear(h, lp["attn.k.weight"], lp["attn.k.bias"])
    v = nx.linear(h, lp["attn.v.weight"], lp["attn.v.bias"])
    return nx.linear(nx.attention_heads(q, k, v, num_heads), lp["attn.o.weight"], lp["attn.o.bias"])


def feed_forward(h: Tensor, lp: Mapping[str, Tensor]) -> Tensor:
    h = nx.gelu(nx.linear(h, lp["ffn.fc1.weight"], lp["ffn.fc1.bias"]))
    return nx.linear(h, lp["ffn.fc2.weight"], lp["ffn.fc2.bias"])


def encoder_layer(x: Tensor, lp: Mapping[str, Tensor], num_heads: int) -> Tensor:
    """Pre-norm residual block: ``x + MHSA(LN(x))`` then ``+ FFN(LN(.))``.

    Works for any number of active tokens ``n >= 1``.
    """
    if x.ndim != 3 or x.shape[1] < 1:
        raise ContractError(f"encoder_layer expects (B, n>=1, D), got {x.shape}")
    x = nx.add(x, attention(nx.layernorm(x, lp["ln1.weight"], lp["ln1.bias"]), lp, num_heads))
    return nx.add(x, feed_forward(nx.layernorm(x, lp["ln2.weight"], lp["ln2.bias"]), lp))


def aux_decode(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Shared per-token affine map D -> K (a 1x1 convolution over the token grid)."""
    return nx.linear(x, params["aux.weight"], params["aux.bias"])


def decode_tokens(x: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Per-token main-decoder logits ``(B, n, K)`` for whatever tokens are given.

    The mask transformer appends the K class embeddings, runs its layers over
    the joint sequence and scores each token against each processed class
    embedding, scaled by ``D ** -0.5``.
    """
    if config.decoder_kind == "linear":
        return nx.linear(x, params["dec.weight"], params["dec.bias"])
    b, n, d = x.shape
    k = config.num_classes
    cls = nx.add(Tensor(np.zeros((b, k, d))), params["dec.cls_emb"])
    z = nx.concat([x, cls], axis=1)
    for j in range(1, config.mask_decoder_layers + 1):
        z = encoder_layer(z, layer_params(params, f"dec.{j}"), config.num_heads)
    feats = nx.narrow(z, 1, 0, n)
    cls_out = nx.narrow(z, 1, n, k)
    return nx.scale(nx.matmul(feats, nx.transpose(cls_out, (0, 2, 1))), d ** -0.5)


def upsample_token_logits(token_logits: Tensor, config: ModelConfig) -> Tensor:
    b = token_logits.shape[0]
    gh, gw = config.grid
    grid = nx.reshape(token_logits, (b, gh, gw, token_logits.shape[-1]))
    return nx.upsample_bilinear(grid, config.image_height, config.image_width)


def _decode(x: Tensor, params, config: ModelConfig) -> Tensor:
    if x.shape[1] != config.num_tokens:
        raise ContractError(f"decoder needs all {config.num_tokens} tokens, got {x.shape[1]}")
    return upsample_token_logits(decode_tokens(x, params, config), config)


def decode_linear(x: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    if config.decoder_kind != "linear":
        raise ConfigError("model is not configured with a linear decoder")
    return _decode(x, params, config)


def decode_mask_transformer(x: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    if config.decoder_kind != "mask_transformer":
        raise ConfigError("model is not configured with a mask-transformer decoder")
    return _decode(x, params, config)


def decode(x: Tensor, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    return _decode(x, params, config)


def forward_full(image, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Unpaused forward pass: ``(B, H, W, 3)`` -> logits ``(B, H, W, K)``."""
    x = patch_embed(image, params, config)
    for i in range(1, config.num_layers + 1):
        x = encoder_layer(x, layer_params(params, f"enc.{i}"), config.num_heads)
    return decode(x, params, config)
