"""Entropy-ranked patch pausing, reassembly, and the early-exit variant.

A pause stage after layer ``l`` decodes the active tokens with the shared
auxiliary head, keeps the ``n - floor(tau * n)`` tokens with the highest
prediction entropy and freezes the rest. ``tau`` is always relative to the
tokens still active at that stage. The frozen tokens rejoin the processed
ones in ``assemble`` before the main decoder runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .model import (ConfigError, ModelConfig, aux_decode, decode, decode_tokens, encoder_layer,
                    layer_params, patch_embed, upsample_token_logits)
from .numerics import ContractError, Tensor

SELECTIONS = ("entropy", "random")


@dataclass(frozen=True)
class PauseConfig:
    """Ordered ``(layer, tau)`` pairs; layers are 1-based and strictly increasing."""

    stages: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        stages = tuple((int(l), float(t)) for l, t in self.stages)
        object.__setattr__(self, "stages", stages)
        prev = 0
        for layer, tau in stages:
            if layer <= prev:
                raise ConfigError(f"pause layers must be strictly increasing and >= 1: {stages}")
            if not 0.0 <= tau < 1.0:
                raise ConfigError(f"pause proportion {tau} at layer {layer} is outside [0, 1)")
            prev = layer

    @classmethod
    def of(cls, mapping: Mapping[int, float] | None = None) -> "PauseConfig":
        return cls(tuple(sorted((mapping or {}).items())))

    def validate(self, num_layers: int) -> "PauseConfig":
        for layer, _ in self.stages:
            if layer > num_layers:
                raise ConfigError(f"pause layer {layer} exceeds model depth {num_layers}")
        return self

    def as_dict(self) -> dict[int, float]:
        return dict(self.stages)

    @property
    def config_id(self) -> str:
        if not self.stages:
            return "none"
        return "+".join(f"{l}:{t:g}" for l, t in self.stages)

    def to_json_obj(self) -> list[dict]:
        return [{"layer": l, "tau": t} for l, t in self.stages]

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj())

    @classmethod
    def from_json_obj(cls, obj) -> "PauseConfig":
        if not isinstance(obj, list):
            raise ConfigError("a pause configuration must be a JSON list of {layer, tau} objects")
        stages = []
        for item in obj:
            if not isinstance(item, dict) or set(item) != {"layer", "tau"}:
                raise ConfigError(f"bad pause stage {item!r}; expected keys 'layer' and 'tau'")
            stages.append((item["layer"], item["tau"]))
        return cls(tuple(stages))

    @classmethod
    def from_json(cls, text: str) -> "PauseConfig":
        return cls.from_json_obj(json.loads(text))


def kept_count(n: int, tau: float) -> int:
    """Tokens still active after pausing a proportion ``tau`` of ``n``."""
    return n - int(math.floor(tau * n))


@dataclass
class PauseStage:
    layer: int
    snapshot: Tensor            # (B, n, D) active tokens before the split
    keep: np.ndarray            # (B, n') ascending indices into the snapshot
    aux_logits: Tensor | None   # (B, n, K) aux head output on the snapshot


@dataclass
class PauseState:
    num_tokens: int
    stages: list[PauseStage] = field(default_factory=list)

    @property
    def active_count(self) -> int:
        return self.stages[-1].keep.shape[1] if self.stages else self.num_tokens

    def original_indices(self) -> list[np.ndarray]:
        """Original token index of every snapshot row, per stage, plus the final active set."""
        if not self.stages:
            return []
        b = self.stages[0].keep.shape[0]
        cur = np.broadcast_to(np.arange(self.num_tokens), (b, self.num_tokens))
        out = []
        for stage in self.stages:
            out.append(cur)
            cur = np.take_along_axis(cur, stage.keep, axis=1)
        out.append(cur)
        return out


@dataclass
class PauseStats:
    per_layer_active: list[int]

    @property
    def token_layer_products(self) -> int:
        return int(sum(self.per_layer_active))

    def to_json_obj(self) -> dict:
        return {"per_layer_active": list(self.per_layer_active),
                "token_layer_products": self.token_layer_products}


def token_entropy(logits) -> np.ndarray:
    """Per-token entropy in nats of ``softmax(logits)`` over the last axis."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    safe = np.where(p < nx.LOG_FLOOR, 1.0, p)
    return -(p * np.log(safe)).sum(axis=-1)


def select_keep(entropy: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the ``keep`` highest-entropy tokens per row, ascending.

    The paused set is the ``n - keep`` smallest entropies, ties resolved toward
    lower token index. Runs as a partial selection (k-th order statistic) plus a
    tie pass rather than a full sort.
    """
    entropy = np.asarray(entropy, dtype=np.float64)
    if np.isnan(entropy).any():
        # Non-finite predictions stay active; the loss check reports them.
        entropy = np.where(np.isnan(entropy), np.inf, entropy)
    b, n = entropy.shape
    n_pause = n - keep
    if n_pause <= 0:
        return np.broadcast_to(np.arange(n), (b, n)).copy()
    kth = np.partition(entropy, n_pause - 1, axis=1)[:, n_pause - 1:n_pause]
    below = entropy < kth
    tied = entropy == kth
    need = n_pause - below.sum(axis=1, keepdims=True)
    paused = below | (tied & (np.cumsum(tied, axis=1) <= need))
    return np.nonzero(~paused)[1].reshape(b, keep)


def random_keep(rng: np.random.Generator, batch: int, n: int, keep: int) -> np.ndarray:
    """Uniformly random kept set per image, ascending."""
    return np.sort(np.stack([rng.permutation(n)[:keep] for _ in range(batch)]), axis=1)


def pause_step(x: Tensor, tau: float, params: Mapping[str, Tensor], state: PauseState,
               layer: int = 0, *, selection: str = "entropy",
               rng: np.random.Generator | None = None, keep: np.ndarray | None = None,
               keep_aux: bool = False) -> Tensor:
    """Pause a proportion ``tau`` of the active tokens and record the stage.

    ``keep`` overrides the selection with precomputed indices (used to hold the
    discrete choice fixed, e.g. during finite-difference checks). Aux logits are
    stored on the stage whenever they are computed; ``keep_aux`` forces that
    under random selection.
    """
    if not 0.0 <= tau < 1.0:
        raise ConfigError(f"pause proportion {tau} is outside [0, 1)")
    if selection not in SELECTIONS:
        raise ConfigError(f"selection must be one of {SELECTIONS}, got {selection!r}")
    b, n, _ = x.shape
    n_keep = kept_count(n, tau)
    aux = aux_decode(x, params) if selection == "entropy" or keep_aux else None
    if keep is None:
        if selection == "entropy":
            keep = select_keep(token_entropy(aux), n_keep)
        else:
            if rng is None:
                raise ConfigError("random selection needs an rng")
            keep = random_keep(rng, b, n, n_keep)
    keep = np.asarray(keep, dtype=np.int64)
    if keep.shape != (b, n_keep):
        raise ContractError(f"keep indices shape {keep.shape} != {(b, n_keep)}")
    state.stages.append(PauseStage(layer, x, keep, aux))
    return nx.gather_rows(x, keep)


def assemble(x_final: Tensor, state: PauseState) -> Tensor:
    """Write processed tokens back over each stage snapshot, last stage first."""
    if x_final.shape[1] != state.active_count:
        raise ContractError(
            f"assemble: {x_final.shape[1]} tokens given, state expects {state.active_count}")
    x = x_final
    for stage in reversed(state.stages):
        x = nx.scatter_rows(stage.snapshot, stage.keep, x)
    if x.shape[1] != state.num_tokens:
        raise ContractError(f"assembled width {x.shape[1]} != {state.num_tokens}")
    return x


def encode_with_pausing(image, params: Mapping[str, Tensor], config: ModelConfig,
                        pause_config: PauseConfig | Mapping[int, float] | None = None, *,
                        selection: str = "entropy", rng: np.random.Generator | None = None,
                        keep: Sequence[np.ndarray] | None = None, keep_aux: bool = False):
    """Embed and run the encoder with pausing. Returns ``(X_L, state, stats)``.

    ``X_L`` holds only the tokens that stayed active through the last layer.
    """
    if not isinstance(pause_config, PauseConfig):
        pause_config = PauseConfig.of(pause_config)
    pause_config.validate(config.num_layers)
    taus = pause_config.as_dict()
    x = patch_embed(image, params, config)
    state = PauseState(num_tokens=x.shape[1])
    active = []
    for i in range(1, config.num_layers + 1):
        active.append(x.shape[1])
        x = encoder_layer(x, layer_params(params, f"enc.{i}"), config.num_heads)
        if i in taus:
            fixed = None if keep is None else keep[len(state.stages)]
            x = pause_step(x, taus[i], params, state, i, selection=selection, rng=rng,
                           keep=fixed, keep_aux=keep_aux)
    return x, state, PauseStats(active)


def forward_with_pausing(image, params: Mapping[str, Tensor], config: ModelConfig,
                         pause_config: PauseConfig | Mapping[int, float] | None = None, *,
                         selection: str = "entropy", rng: np.random.Generator | None = None,
                         return_state: bool = False):
    """Paused forward pass -> ``(logits (B, H, W, K), PauseStats)``.

    With ``return_state=True`` the ``PauseState`` is appended to the result.
    """
    x, state, stats = encode_with_pausing(image, params, config, pause_config,
                                          selection=selection, rng=rng)
    logits = decode(assemble(x, state), params, config)
    if return_state:
        return logits, stats, state
    return logits, stats


def early_exit_token_logits(image, params: Mapping[str, Tensor], config: ModelConfig,
                            pause_config: PauseConfig | Mapping[int, float] | None = None, *,
                            selection: str = "entropy",
                            rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
    """Per-token logits ``(B, N, K)`` under early exit, plus each token's exit layer.

    Paused tokens keep the aux logits from their pause layer; tokens that reach
    the end are scored by the main decoder, which sees only those tokens.
    Exit layer 0 marks tokens decoded by the main decoder.
    """
    x, state, _ = encode_with_pausing(image, params, config, pause_config,
                                      selection=selection, rng=rng, keep_aux=True)
    b = x.shape[0]
    main = decode_tokens(x, params, config)
    out = Tensor(np.zeros((b, state.num_tokens, config.num_classes)))
    exit_layer = np.zeros((b, state.num_tokens), dtype=np.int64)
    origin = state.original_indices()
    for stage, orig in zip(state.stages, origin):
        n = stage.snapshot.shape[1]
        paused_mask = np.ones((b, n), dtype=bool)
        np.put_along_axis(paused_mask, stage.keep, False, axis=1)
        local = np.nonzero(paused_mask)[1].reshape(b, -1)
        if local.shape[1] == 0:
            continue
        where = np.take_along_axis(orig, local, axis=1)
        out = nx.scatter_rows(out, where, nx.gather_rows(stage.aux_logits, local))
        np.put_along_axis(exit_layer, where, stage.layer, axis=1)
    final = origin[-1] if origin else np.broadcast_to(np.arange(state.num_tokens), (b, state.num_tokens))
    out = nx.scatter_rows(out, final, main)
    return out, exit_layer


def forward_early_exit(image, params: Mapping[str, Tensor], config: ModelConfig,
                       pause_config: PauseConfig | Mapping[int, float] | None = None, *,
                       selection: str = "entropy",
                       rng: np.random.Generator | None = None) -> Tensor:
    token_logits, _ = early_exit_token_logits(image, params, config, pause_config,
                                              selection=selection, rng=rng)
    return upsample_token_logits(token_logits, config)
