"""Randomised-pause training, optimisers and checkpoints.

Each step draws one pause event ``(layer, tau)``, runs a single-stage paused
forward pass and minimises ``CE(main) + lambda * CE(aux at layer)``. The aux
term covers every token active at the pause layer, upsampled to pixels the
same way as the main logits. Token selection is discrete and carries no
gradient.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping

import numpy as np

from . import numerics as nx
from .model import ConfigError, ModelConfig, Params, decode, init_params, param_shapes
from .numerics import Tensor
from .pausing import PauseConfig, assemble, encode_with_pausing
from .model import upsample_token_logits

log = logging.getLogger(__name__)

IGNORE_INDEX = 255
BASELINE_MODES = ("entropy", "random_pausing", "no_pausing")
OPTIMIZERS = ("adam", "sgd_poly")

CKPT_MAGIC = b"PMCKPT1\x00"
CKPT_VERSION = 1


class NumericError(FloatingPointError):
    """Training produced a non-finite loss."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is malformed; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    aux_weight: float = 0.1
    pause_layers: tuple[int, ...] = (3, 4, 5, 6, 7, 8, 9)
    tau_range: tuple[float, float] = (0.2, 0.8)
    seed: int = 0
    checkpoint_every: int = 0
    baseline_mode: str = "entropy"

    def __post_init__(self):
        object.__setattr__(self, "pause_layers", tuple(int(l) for l in self.pause_layers))
        object.__setattr__(self, "tau_range", tuple(float(t) for t in self.tau_range))
        lo, hi = self.tau_range
        if not 0.0 <= lo <= hi < 1.0:
            raise ConfigError(f"tau range {self.tau_range} must satisfy 0 <= lo <= hi < 1")
        if self.aux_weight < 0:
            raise ConfigError("aux_weight (lambda) must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.baseline_mode not in BASELINE_MODES:
            raise ConfigError(f"baseline_mode must be one of {BASELINE_MODES}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")

    def check_model(self, config: ModelConfig) -> None:
        if self.baseline_mode == "no_pausing":
            return
        if not self.pause_layers:
            raise ConfigError("pause layer set is empty")
        bad = [l for l in self.pause_layers if not 3 <= l <= config.num_layers]
        if bad:
            raise ConfigError(f"pause layers {bad} outside [3, {config.num_layers}]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pause_layers"] = list(self.pause_layers)
        d["tau_range"] = list(self.tau_range)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_defaults_for(self, config: ModelConfig) -> "TrainConfig":
        """Clip the default layer set to the model depth."""
        layers = tuple(l for l in self.pause_layers if l <= config.num_layers)
        return TrainConfig(**{**self.to_dict(), "pause_layers": layers})


def sample_pause_event(rng: np.random.Generator, config: TrainConfig) -> tuple[int, float]:
    if not config.pause_layers:
        raise ConfigError("pause layer set is empty")
    layers = sorted(config.pause_layers)
    layer = layers[int(rng.integers(len(layers)))]
    lo, hi = config.tau_range
    return layer, float(rng.uniform(lo, hi))


@dataclass
class LossReport:
    step: int
    loss: float
    loss_main: float
    loss_aux: float | None
    layer: int | None
    tau: float | None

    def to_json_obj(self) -> dict:
        return {"step": self.step, "loss": self.loss, "loss_main": self.loss_main,
                "loss_aux": self.loss_aux, "layer": self.layer, "tau": self.tau}


def pixel_ce(logits: Tensor, labels: np.ndarray) -> Tensor:
    k = logits.shape[-1]
    return nx.cross_entropy(nx.reshape(logits, (-1, k)), np.asarray(labels).reshape(-1),
                            ignore_index=IGNORE_INDEX)


def compute_losses(params: Mapping[str, Tensor], config: ModelConfig, images, labels,
                   event: tuple[int, float] | None, *, aux_weight: float = 0.1,
                   selection: str = "entropy", rng: np.random.Generator | None = None,
                   keep: np.ndarray | None = None):
    """Forward pass for one training batch.

    Returns ``(total, main, aux, keep)``; ``aux`` is None without a pause event.
    ``keep`` pins the pause selection (shape ``(B, n')``) instead of choosing it.
    """
    pause = PauseConfig(((event[0], event[1]),)) if event is not None else PauseConfig()
    x, state, _ = encode_with_pausing(images, params, config, pause, selection=selection, rng=rng,
                                      keep=None if keep is None else [keep], keep_aux=True)
    main = pixel_ce(decode(assemble(x, state), params, config), labels)
    if event is None:
        return main, main, None, None
    stage = state.stages[0]
    aux = pixel_ce(upsample_token_logits(stage.aux_logits, config), labels)
    total = nx.add(main, nx.scale(aux, aux_weight))
    return total, main, aux, stage.keep


# -- optimisers -------------------------------------------------------------


class Adam:
    def __init__(self, params: Params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: Params) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data = p.data - (self.lr / c1) * m / denom

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.m:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=np.float64)


class SGDPoly:
    """SGD with momentum 0.9 and ``lr * (1 - t/T) ** 0.9`` decay."""

    def __init__(self, params: Params, lr: float, total_steps: int, momentum: float = 0.9,
                 power: float = 0.9):
        self.lr, self.total, self.momentum, self.power = lr, max(total_steps, 1), momentum, power
        self.t = 0
        self.buf = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: Params) -> None:
        lr = self.lr * max(1.0 - self.t / self.total, 0.0) ** self.power
        self.t += 1
        for k, p in params.items():
            if p.grad is None:
                continue
            self.buf[k] = self.momentum * self.buf[k] + p.grad
            p.data = p.data - lr * self.buf[k]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"sgd.buf.{k}": v for k, v in self.buf.items()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], t: int) -> None:
        self.t = t
        for k in self.buf:
            self.buf[k] = np.array(arrays[f"sgd.buf.{k}"], dtype=np.float64)


def make_optimizer(params: Params, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(params, lr=config.learning_rate)
    return SGDPoly(params, lr=config.learning_rate, total_steps=config.steps)


def zero_grads(params: Params) -> None:
    for p in params.values():
        p.grad = None


def train_step(batch, params: Params, model_config: ModelConfig, train_config: TrainConfig,
               rng: np.random.Generator, optimizer, step: int = 0) -> LossReport:
    """One randomised-pause update in place on ``params``."""
    images, labels = batch
    if train_config.baseline_mode == "no_pausing":
        event, selection = None, "entropy"
    else:
        event = sample_pause_event(rng, train_config)
        selection = "random" if train_config.baseline_mode == "random_pausing" else "entropy"
    zero_grads(params)
    total, main, aux, _ = compute_losses(params, model_config, images, labels, event,
                                         aux_weight=train_config.aux_weight,
                                         selection=selection, rng=rng)
    value = total.item()
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss {value} at step {step} with pause event {event}")
    nx.backward(total)
    optimizer.step(params)
    return LossReport(step=step, loss=value, loss_main=main.item(),
                      loss_aux=None if aux is None else aux.item(),
                      layer=None if event is None else event[0],
                      tau=None if event is None else event[1])


# -- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig | None
    params: Params
    step: int = 0
    rng_state: dict | None = None
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_t: int = 0


def _tensor_table(arrays: Mapping[str, np.ndarray]) -> list[list]:
    return [[name, list(a.shape)] for name, a in arrays.items()]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``ckpt`` to ``path``.

    Layout: 8-byte magic ``PMCKPT1\\0``, u32 version, u32 header length, a UTF-8
    JSON header (model/train configs, step, RNG state, tensor tables), then the
    parameter arrays followed by the optimiser arrays, each as little-endian
    float32 in header-table order.
    """
    params = {k: p.data for k, p in ckpt.params.items()}
    header = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": None if ckpt.train_config is None else ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "optimizer_t": ckpt.optimizer_t,
        "params": _tensor_table(params),
        "optimizer": _tensor_table(ckpt.optimizer_state),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        for arrays in (params, ckpt.optimizer_state):
            for a in arrays.values():
                f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    tmp.replace(path)


def _read_arrays(buf: bytes, offset: int, table) -> tuple[dict[str, np.ndarray], int]:
    out = {}
    for name, shape in table:
        n = int(np.prod(shape)) * 4
        if offset + n > len(buf):
            raise CheckpointFormatError(f"truncated data for tensor {name!r}", offset)
        out[name] = np.frombuffer(buf, dtype="<f4", count=n // 4, offset=offset).astype(np.float64).reshape(shape)
        offset += n
    return out, offset


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise CheckpointFormatError("file too short for header", len(buf))
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 8)
    if 16 + hlen > len(buf):
        raise CheckpointFormatError("truncated header", len(buf))
    try:
        header = json.loads(buf[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt header ({exc})", 16) from None
    offset = 16 + hlen
    model_config = ModelConfig.from_dict(header["model_config"])
    shapes = param_shapes(expected or model_config)
    table = header["params"]
    if [n for n, _ in table] != list(shapes):
        missing = sorted(set(shapes) ^ {n for n, _ in table})
        raise ShapeMismatchError(f"checkpoint tensor set differs from model: {missing[:5]}")
    for name, shape in table:
        if tuple(shape) != shapes[name]:
            raise ShapeMismatchError(f"tensor {name!r}: checkpoint {tuple(shape)} vs model {shapes[name]}")
    params, offset = _read_arrays(buf, offset, table)
    opt, offset = _read_arrays(buf, offset, header["optimizer"])
    if offset != len(buf):
        raise CheckpointFormatError(f"{len(buf) - offset} trailing bytes", offset)
    tc = header["train_config"]
    return Checkpoint(
        model_config=model_config,
        train_config=None if tc is None else TrainConfig.from_dict(tc),
        params={k: Tensor(v, requires_grad=True) for k, v in params.items()},
        step=header["step"],
        rng_state=header["rng_state"],
        optimizer_state=opt,
        optimizer_t=header["optimizer_t"],
    )


# -- training loop ----------------------------------------------------------


BatchFn = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]


def dataset_batches(images: np.ndarray, labels: np.ndarray) -> BatchFn:
    """Sample batches uniformly with replacement from in-memory arrays."""

    def fn(rng: np.random.Generator, batch_size: int):
        idx = rng.integers(0, len(images), size=batch_size)
        return images[idx].astype(np.float64), labels[idx]

    return fn


class Trainer:
    """Owns params, optimiser and RNG; resumable from a checkpoint.

    Weights are initialised from ``seed``; the training RNG (batches, pause
    events, random-pausing indices) is a separate stream derived from it.
    """

    def __init__(self, model_config: ModelConfig, train_config: TrainConfig,
                 batches: BatchFn, params: Params | None = None):
        train_config.check_model(model_config)
        self.model_config = model_config
        self.train_config = train_config
        self.batches = batches
        self.params = params if params is not None else init_params(model_config, train_config.seed)
        self.rng = np.random.default_rng([train_config.seed, 1])
        self.optimizer = make_optimizer(self.params, train_config)
        self.step = 0
        self.history: list[LossReport] = []

    @classmethod
    def resume(cls, ckpt: Checkpoint, batches: BatchFn,
               train_config: TrainConfig | None = None) -> "Trainer":
        tc = train_config or ckpt.train_config
        t = cls(ckpt.model_config, tc, batches, params=ckpt.params)
        t.step = ckpt.step
        if ckpt.rng_state is not None:
            t.rng.bit_generator.state = ckpt.rng_state
        if ckpt.optimizer_state:
            t.optimizer.load_state_arrays(ckpt.optimizer_state, ckpt.optimizer_t)
        return t

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.model_config, self.train_config, self.params, self.step,
                          self.rng.bit_generator.state, self.optimizer.state_arrays(),
                          self.optimizer.t)

    def iter_steps(self, until: int | None = None) -> Iterator[LossReport]:
        until = self.train_config.steps if until is None else until
        while self.step < until:
            batch = self.batches(self.rng, self.train_config.batch_size)
            report = train_step(batch, self.params, self.model_config, self.train_config,
                                self.rng, self.optimizer, step=self.step + 1)
            self.step += 1
            self.history.append(report)
            yield report

    def run(self, until: int | None = None, log_path=None, checkpoint_path=None) -> list[LossReport]:
        every = self.train_config.checkpoint_every
        log_file = open(log_path, "a") if log_path else None
        try:
            reports = []
            for report in self.iter_steps(until):
                reports.append(report)
                if log_file:
                    log_file.write(json.dumps(report.to_json_obj()) + "\n")
                if checkpoint_path and every and self.step % every == 0:
                    save_checkpoint(checkpoint_path, self.checkpoint())
                if self.step % 100 == 0:
                    log.info("step %d loss %.4f", self.step, report.loss)
            if checkpoint_path:
                save_checkpoint(checkpoint_path, self.checkpoint())
            return reports
        finally:
            if log_file:
                log_file.close()
