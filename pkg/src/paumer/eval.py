"""mIoU, throughput and cost accounting, sweeps, skylines and entropy export."""

from __future__ import annotations

import csv
import json
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .model import ConfigError, ModelConfig, aux_decode, encoder_layer, layer_params, patch_embed
from .numerics import InvalidLabelError
from .pausing import PauseConfig, forward_early_exit, forward_with_pausing, kept_count, token_entropy

IGNORE_INDEX = 255

TABLE1_CONFIGS: tuple[PauseConfig, ...] = tuple(PauseConfig.of(d) for d in (
    {3: 0.2}, {3: 0.4}, {3: 0.6},
    {5: 0.2}, {5: 0.4}, {5: 0.6}, {5: 0.8},
    {3: 0.2, 5: 0.2}, {3: 0.3, 5: 0.3}, {3: 0.4, 5: 0.4},
    {3: 0.2, 5: 0.2, 7: 0.2}, {3: 0.3, 5: 0.3, 7: 0.3}, {3: 0.4, 5: 0.4, 7: 0.4},
))

TRADEOFF_FIELDS = ("config_id", "throughput_ips", "token_layer_products", "miou")
ENTROPY_FIELDS = ("layer", "entropy_nats", "correct", "class_id")


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("PAUMER_THREADS", "1")))
    except ValueError:
        return 1


# -- mIoU -------------------------------------------------------------------


class MIoU(NamedTuple):
    per_class: list[float | None]   # None for classes absent from both prediction and truth
    miou: float | None              # None when no pixel was evaluated

    @property
    def no_evaluated_pixels(self) -> bool:
        return self.miou is None


class ConfusionMatrix:
    """K x K pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, ignore_index: int | None = IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, preds, labels) -> "ConfusionMatrix":
        preds = np.asarray(preds).reshape(-1).astype(np.int64)
        labels = np.asarray(labels).reshape(-1).astype(np.int64)
        if preds.shape != labels.shape:
            raise nx.DimensionError(f"prediction size {preds.size} != label size {labels.size}")
        k = self.num_classes
        valid = labels != self.ignore_index if self.ignore_index is not None else np.ones_like(labels, bool)
        bad = valid & ((labels < 0) | (labels >= k))
        if bad.any():
            raise InvalidLabelError(f"label {int(labels[bad][0])} outside [0, {k})")
        if ((preds[valid] < 0) | (preds[valid] >= k)).any():
            raise InvalidLabelError(f"prediction outside [0, {k})")
        self.counts += np.bincount(labels[valid] * k + preds[valid], minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def result(self) -> MIoU:
        tp = np.diag(self.counts).astype(np.float64)
        denom = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        per_class = [float(t / d) if d > 0 else None for t, d in zip(tp, denom)]
        present = [v for v in per_class if v is not None]
        return MIoU(per_class, float(np.mean(present)) if present else None)


def miou(preds, labels, num_classes: int, ignore_index: int | None = IGNORE_INDEX) -> MIoU:
    return ConfusionMatrix(num_classes, ignore_index).update(preds, labels).result()


# -- cost accounting --------------------------------------------------------


@dataclass(frozen=True)
class CostModel:
    """Relative compute proxy: ``12 n D^2 + 2 n^2 D`` per encoder layer on ``n`` tokens.

    Used only to rank configurations; it is not a FLOP-exact hardware model.
    """

    embed_dim: int
    num_layers: int
    num_tokens: int

    @classmethod
    def for_model(cls, config: ModelConfig) -> "CostModel":
        return cls(config.embed_dim, config.num_layers, config.num_tokens)

    def layer_cost(self, n: int) -> int:
        d = self.embed_dim
        return 12 * n * d * d + 2 * n * n * d

    def active_counts(self, pause_config: PauseConfig | Mapping[int, float] | None = None) -> list[int]:
        if not isinstance(pause_config, PauseConfig):
            pause_config = PauseConfig.of(pause_config)
        taus = pause_config.validate(self.num_layers).as_dict()
        n, counts = self.num_tokens, []
        for layer in range(1, self.num_layers + 1):
            counts.append(n)
            if layer in taus:
                n = kept_count(n, taus[layer])
        return counts

    def token_layer_products(self, pause_config=None) -> int:
        return sum(self.active_counts(pause_config))

    def encoder_cost(self, pause_config=None) -> int:
        return sum(self.layer_cost(n) for n in self.active_counts(pause_config))

    def total_cost(self, pause_config=None) -> int:
        """Encoder cost plus one decoder-layer cost on all ``N`` tokens."""
        return self.encoder_cost(pause_config) + self.layer_cost(self.num_tokens)


# -- prediction helpers -----------------------------------------------------


def predict(params, config: ModelConfig, images, pause_config=None, *, selection: str = "entropy",
            rng: np.random.Generator | None = None, early_exit: bool = False,
            batch_size: int = 16) -> np.ndarray:
    """Argmax class maps ``(B, H, W)`` under a pause configuration."""
    preds = []
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = np.asarray(images[start:start + batch_size], dtype=np.float64)
            if early_exit:
                logits = forward_early_exit(chunk, params, config, pause_config,
                                            selection=selection, rng=rng)
            else:
                logits, _ = forward_with_pausing(chunk, params, config, pause_config,
                                                 selection=selection, rng=rng)
            preds.append(logits.data.argmax(axis=-1))
    if not preds:
        return np.zeros((0, config.image_height, config.image_width), dtype=np.int64)
    return np.concatenate(preds)


def evaluate_miou(params, config: ModelConfig, images, labels, pause_config=None, *,
                  selection: str = "entropy", seed: int = 0, early_exit: bool = False,
                  threads: int | None = None, batch_size: int = 16) -> MIoU:
    """mIoU over an eval set; shards run on a thread pool and merge confusion matrices.

    Random selection draws from a per-shard generator seeded from ``seed`` and the
    shard index, so results do not depend on the thread count.
    """
    threads = threads or eval_threads()
    n = len(images)
    bounds = list(range(0, n, batch_size)) or [0]

    def shard(i_start):
        i, start = i_start
        rng = np.random.default_rng([seed, i]) if selection == "random" else None
        cm = ConfusionMatrix(config.num_classes)
        if start < n:
            p = predict(params, config, images[start:start + batch_size], pause_config,
                        selection=selection, rng=rng, early_exit=early_exit, batch_size=batch_size)
            cm.update(p, labels[start:start + batch_size])
        return cm

    if threads == 1:
        mats = [shard(x) for x in enumerate(bounds)]
    else:
        with ThreadPoolExecutor(threads) as pool:
            mats = list(pool.map(shard, enumerate(bounds)))
    total = ConfusionMatrix(config.num_classes)
    for m in mats:
        total = total.merge(m)
    return total.result()


# -- throughput -------------------------------------------------------------


@dataclass
class BenchResult:
    images_per_second: float
    median_seconds: float
    token_layer_products: int
    times: list[float]


def bench_throughput(params, config: ModelConfig, pause_config=None, *, batch_size: int = 8,
                     warmup: int = 2, iters: int = 5, seed: int = 0,
                     images: np.ndarray | None = None) -> BenchResult:
    """Median wall-clock images/second over ``iters`` timed forward passes."""
    if iters < 3:
        raise ConfigError("bench_throughput needs iters >= 3")
    if images is None:
        images = np.random.default_rng(seed).random((batch_size, config.image_height, config.image_width, 3))
    times = []
    with nx.no_grad():
        for i in range(warmup + iters):
            t0 = time.perf_counter()
            _, stats = forward_with_pausing(images, params, config, pause_config)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
    med = statistics.median(times)
    return BenchResult(len(images) / med, med, stats.token_layer_products, times)


# -- sweeps and skylines ----------------------------------------------------


@dataclass(frozen=True)
class TradeoffPoint:
    config_id: str
    throughput: float
    token_layer_products: int
    miou: float | None

    def row(self) -> dict:
        return {"config_id": self.config_id, "throughput_ips": f"{self.throughput:.6g}",
                "token_layer_products": self.token_layer_products,
                "miou": "" if self.miou is None else f"{self.miou:.6f}"}


def sweep(params, config: ModelConfig, configs: Iterable[PauseConfig] | None, images, labels, *,
          selection: str = "entropy", seed: int = 0, early_exit: bool = False,
          bench: Mapping | None = None, threads: int | None = None) -> list[TradeoffPoint]:
    """One trade-off point per configuration (default: the thirteen standard configs)."""
    configs = TABLE1_CONFIGS if configs is None else list(configs)
    bench = dict(bench or {})
    cost = CostModel.for_model(config)
    points = []
    for pc in configs:
        pc = pc if isinstance(pc, PauseConfig) else PauseConfig.of(pc)
        pc.validate(config.num_layers)
        m = evaluate_miou(params, config, images, labels, pc, selection=selection, seed=seed,
                          early_exit=early_exit, threads=threads)
        b = bench_throughput(params, config, pc, **bench)
        points.append(TradeoffPoint(pc.config_id, b.images_per_second,
                                    cost.token_layer_products(pc), m.miou))
    return points


def _dominates(a: TradeoffPoint, b: TradeoffPoint) -> bool:
    am, bm = (-1.0 if a.miou is None else a.miou), (-1.0 if b.miou is None else b.miou)
    return (a.throughput >= b.throughput and am >= bm
            and (a.throughput > b.throughput or am > bm))


def skyline(points: Sequence[TradeoffPoint]) -> list[TradeoffPoint]:
    """Points not dominated in (throughput, mIoU); input order preserved.

    Sort by throughput descending and sweep, tracking the best mIoU seen among
    strictly faster points plus the best among equally fast ones.
    """
    idx = sorted(range(len(points)), key=lambda i: -points[i].throughput)
    keep = [False] * len(points)
    best_faster = -np.inf
    i = 0
    while i < len(idx):
        j = i
        tp = points[idx[i]].throughput
        while j < len(idx) and points[idx[j]].throughput == tp:
            j += 1
        group = idx[i:j]
        score = {g: (-1.0 if points[g].miou is None else points[g].miou) for g in group}
        top = max(score.values())
        for g in group:
            # Dominated by a faster point with >= mIoU, or an equally fast one with > mIoU.
            keep[g] = score[g] > best_faster and score[g] >= top
        best_faster = max(best_faster, top)
        i = j
    return [p for p, k in zip(points, keep) if k]


def write_tradeoff_csv(points: Iterable[TradeoffPoint], path, echo: Mapping | None = None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRADEOFF_FIELDS)
        w.writeheader()
        for p in points:
            w.writerow(p.row())
    if echo is not None:
        with open(str(path).rsplit(".", 1)[0] + ".json", "w") as f:
            json.dump(echo, f, indent=2, sort_keys=True)


# -- entropy export ---------------------------------------------------------


def token_labels(labels: np.ndarray, patch: int) -> np.ndarray:
    """Centre-pixel label of every patch: ``(B, H, W)`` -> ``(B, N)``, row-major."""
    labels = np.asarray(labels)
    c = patch // 2
    return labels[:, c::patch, c::patch].reshape(labels.shape[0], -1)


def entropy_rows(params, config: ModelConfig, images, labels, layers: Sequence[int], *,
                 batch_size: int = 16):
    """Yield ``(layer, entropy_nats, correct, class_id)`` for every token of every image.

    Tokens are probed on the unpaused forward pass with the shared aux head.
    """
    layers = sorted(set(int(l) for l in layers))
    for l in layers:
        if not 1 <= l <= config.num_layers:
            raise ConfigError(f"entropy layer {l} outside [1, {config.num_layers}]")
    wanted = set(layers)
    with nx.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = np.asarray(images[start:start + batch_size], dtype=np.float64)
            truth = token_labels(labels[start:start + batch_size], config.patch_size)
            x = patch_embed(chunk, params, config)
            per_layer = {}
            for i in range(1, max(layers) + 1):
                x = encoder_layer(x, layer_params(params, f"enc.{i}"), config.num_heads)
                if i in wanted:
                    logits = aux_decode(x, params).data
                    per_layer[i] = (token_entropy(logits), logits.argmax(axis=-1))
            for l in layers:
                ent, pred = per_layer[l]
                for e_row, p_row, t_row in zip(ent, pred, truth):
                    for e, p, t in zip(e_row, p_row, t_row):
                        yield l, float(e), bool(p == t), int(t)


def entropy_report(params, config: ModelConfig, images, labels, layers: Sequence[int],
                   path=None, echo: Mapping | None = None) -> list[tuple]:
    """Collect entropy rows; optionally stream them to ``path`` as CSV."""
    rows = []
    f = open(path, "w", newline="") if path else None
    try:
        w = csv.writer(f) if f else None
        if w:
            w.writerow(ENTROPY_FIELDS)
        for row in entropy_rows(params, config, images, labels, layers):
            rows.append(row)
            if w:
                w.writerow((row[0], f"{row[1]:.9g}", "true" if row[2] else "false", row[3]))
    finally:
        if f:
            f.close()
    if path and echo is not None:
        with open(str(path).rsplit(".", 1)[0] + ".json", "w") as g:
            json.dump(echo, g, indent=2, sort_keys=True)
    return rows


def default_entropy_layers(num_layers: int) -> list[int]:
    return list(range(2, num_layers + 1, 2))
