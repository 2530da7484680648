"""``paumer`` command line: dataset generation, training, sweeps, benchmarks, reports.

Every subcommand exits 0 on success, 2 on a configuration error, 3 when training
hits a non-finite loss and 4 on I/O or file-format errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from .data import (DatasetFormatError, SyntheticTaskConfig, convert_png_dir, generate_dataset,
                   load_arrays, write_dataset)
from .eval import (TABLE1_CONFIGS, TradeoffPoint, bench_throughput, default_entropy_layers,
                   entropy_report, skyline, sweep, write_tradeoff_csv)
from .model import ConfigError, ModelConfig, init_params
from .pausing import PauseConfig
from .training import (CheckpointFormatError, NumericError, ShapeMismatchError, TrainConfig, Trainer,
                       dataset_batches, load_checkpoint)

log = logging.getLogger("paumer")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

_int = {"type": "integer"}
_pos = {"type": "integer", "minimum": 1}
_num = {"type": "number"}
_pair = {"type": "array", "items": _int, "minItems": 2, "maxItems": 2}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False}


RUN_CONFIG_SCHEMA = _obj({
    "model": _obj({
        "image_height": _pos, "image_width": _pos, "patch_size": _pos, "embed_dim": _pos,
        "num_layers": _pos, "num_heads": _pos, "num_classes": _pos,
        "ffn_hidden": {"type": ["integer", "null"], "minimum": 1},
        "decoder_kind": {"enum": ["linear", "mask_transformer"]},
        "mask_decoder_layers": {"type": "integer", "minimum": 0},
    }, required=("image_height", "image_width", "patch_size", "embed_dim", "num_layers",
                 "num_heads", "num_classes")),
    "train": _obj({
        "steps": {"type": "integer", "minimum": 0}, "batch_size": _pos, "learning_rate": _num,
        "optimizer": {"enum": ["adam", "sgd_poly"]}, "aux_weight": _num,
        "pause_layers": {"type": "array", "items": _int},
        "tau_range": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        "seed": _int, "checkpoint_every": {"type": "integer", "minimum": 0},
        "baseline_mode": {"enum": ["entropy", "random_pausing", "no_pausing"]},
    }),
    "data": _obj({
        "task": _obj({
            "noise": _num, "palette_seed": _int, "small_fraction": _num, "shapes": _pair,
            "large_size": _pair, "small_size": _pair, "brightness_jitter": _num,
            "occluders": _pair, "occluder_size": _pair,
        }),
        "train_count": {"type": "integer", "minimum": 0},
        "eval_count": {"type": "integer", "minimum": 0},
        "seed": _int,
        "train_path": {"type": "string"},
        "eval_path": {"type": "string"},
    }),
    "eval": _obj({
        "selection": {"enum": ["entropy", "random"]}, "early_exit": {"type": "boolean"},
        "seed": _int, "batch_size": _pos, "warmup": {"type": "integer", "minimum": 0},
        "iters": {"type": "integer", "minimum": 3},
        "layers": {"type": "array", "items": _pos},
    }),
    "output_dir": {"type": "string"},
}, required=("model",))


class RunConfig:
    """Validated run document with typed views of its sections."""

    def __init__(self, doc: dict, base: Path | None = None):
        try:
            jsonschema.validate(doc, RUN_CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"run config invalid at {where}: {exc.message}") from None
        self.doc = doc
        base = base or Path.cwd()
        self.output_dir = base / doc.get("output_dir", ".")
        self.model = ModelConfig.from_dict(doc["model"])
        self.train = TrainConfig.from_dict(doc.get("train", {})).with_defaults_for(self.model)
        data = doc.get("data", {})
        self.task = SyntheticTaskConfig.from_dict({
            "height": self.model.image_height, "width": self.model.image_width,
            "num_classes": self.model.num_classes, **data.get("task", {})})
        self.train_count = data.get("train_count", 1000)
        self.eval_count = data.get("eval_count", 200)
        self.data_seed = data.get("seed", 0)
        self.train_path = self.output_dir / data.get("train_path", "train.pmseg")
        self.eval_path = self.output_dir / data.get("eval_path", "eval.pmseg")
        self.eval = {"selection": "entropy", "early_exit": False, "seed": 0, "batch_size": 8,
                     "warmup": 2, "iters": 5, **doc.get("eval", {})}

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls(doc, base=path.parent)

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / "checkpoint.pmck"

    @property
    def log_path(self) -> Path:
        return self.output_dir / "train_log.jsonl"


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _pause_configs(args, num_layers: int) -> list[PauseConfig]:
    if args.table1:
        configs = list(TABLE1_CONFIGS)
    elif args.configs is not None:
        text = args.configs
        if not text.lstrip().startswith("["):
            text = Path(text).read_text()
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--configs is not valid JSON ({exc})") from None
        if not isinstance(obj, list):
            raise ConfigError("--configs must be a JSON list of pause configurations")
        configs = [PauseConfig.from_json_obj(c) for c in obj]
    else:
        configs = [PauseConfig()]
    for pc in configs:
        pc.validate(num_layers)
    return configs


# -- subcommands ------------------------------------------------------------


def cmd_gen(args) -> int:
    rc = RunConfig.load(args.config)
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(rc.train_path, rc.train_count if args.count is None else args.count, 0),
            (rc.eval_path, rc.eval_count if args.eval_count is None else args.eval_count, 1)]
    for path, count, stream in jobs:
        samples = generate_dataset(np.random.default_rng([rc.data_seed, stream]), rc.task, count)
        write_dataset(samples, path, height=rc.task.height, width=rc.task.width,
                      num_classes=rc.task.num_classes)
        print(f"{path}\tcount={count}\tsha256={_file_digest(path)}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = RunConfig.load(args.config)
    overrides = {}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.baseline is not None:
        overrides["baseline_mode"] = args.baseline
    tc = TrainConfig.from_dict({**rc.train.to_dict(), **overrides})
    data_path = Path(args.data) if args.data else rc.train_path
    images, labels, hdr = load_arrays(data_path)
    if (hdr.height, hdr.width) != (rc.model.image_height, rc.model.image_width):
        raise ConfigError(f"dataset is {hdr.height}x{hdr.width}, model expects "
                          f"{rc.model.image_height}x{rc.model.image_width}")
    if hdr.count == 0:
        raise ConfigError(f"{data_path} holds no samples")
    batches = dataset_batches(images, labels)
    if args.resume:
        ckpt = load_checkpoint(args.resume, expected=rc.model)
        trainer = Trainer.resume(ckpt, batches, train_config=tc)
    else:
        trainer = Trainer(rc.model, tc, batches)
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    if not args.resume and rc.log_path.exists():
        rc.log_path.unlink()
    reports = trainer.run(log_path=rc.log_path, checkpoint_path=rc.checkpoint_path)
    final = reports[-1].loss if reports else float("nan")
    print(f"steps={trainer.step}\tfinal_loss={final!r}\tcheckpoint={rc.checkpoint_path}")
    return EXIT_OK


def _sweep_echo(args, configs, extra: dict) -> dict:
    return {"checkpoint": str(args.checkpoint), "data": str(getattr(args, "data", "")),
            "configs": [pc.to_json_obj() for pc in configs], **extra}


def cmd_sweep(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    mc = ckpt.model_config
    configs = _pause_configs(args, mc.num_layers)
    images, labels, _ = load_arrays(args.data)
    bench = {"batch_size": args.batch_size, "warmup": args.warmup, "iters": args.iters}
    points = sweep(ckpt.params, mc, configs, images, labels, selection=args.selection,
                   seed=args.seed, early_exit=args.early_exit, bench=bench)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    echo = _sweep_echo(args, configs, {"selection": args.selection, "seed": args.seed,
                                       "early_exit": args.early_exit, "bench": bench})
    write_tradeoff_csv(points, out, echo=echo)
    for p in points:
        print(f"{p.config_id}\t{p.throughput:.2f} img/s\t{p.token_layer_products}\t{p.miou}")
    if args.skyline:
        sky_path = out.with_name(out.stem + "_skyline.csv")
        write_tradeoff_csv(skyline(points), sky_path)
        print(f"skyline -> {sky_path}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        mc, params = ckpt.model_config, ckpt.params
    elif args.config:
        rc = RunConfig.load(args.config)
        mc, params = rc.model, init_params(rc.model, args.seed)
    else:
        raise ConfigError("bench needs --checkpoint or --config")
    configs = [PauseConfig()] + [pc for pc in _pause_configs(args, mc.num_layers) if pc.stages]
    points = []
    for pc in configs:
        r = bench_throughput(params, mc, pc, batch_size=args.batch_size, warmup=args.warmup,
                             iters=args.iters, seed=args.seed)
        points.append(TradeoffPoint(pc.config_id, r.images_per_second, r.token_layer_products, None))
        print(f"{pc.config_id}\t{r.images_per_second:.2f} img/s\tmedian {r.median_seconds * 1e3:.1f} ms"
              f"\t{r.token_layer_products} token-layers")
    if args.out:
        write_tradeoff_csv(points, args.out, echo=_sweep_echo(args, configs, {
            "batch_size": args.batch_size, "warmup": args.warmup, "iters": args.iters}))
    return EXIT_OK


def cmd_report_entropy(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    mc = ckpt.model_config
    if args.layers:
        try:
            layers = [int(v) for v in args.layers.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--layers must be comma-separated integers, got {args.layers!r}") from None
    else:
        layers = default_entropy_layers(mc.num_layers)
    for l in layers:
        if not 1 <= l <= mc.num_layers:
            raise ConfigError(f"entropy layer {l} outside [1, {mc.num_layers}]")
    images, labels, _ = load_arrays(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = entropy_report(ckpt.params, mc, images, labels, layers, path=out,
                          echo={"checkpoint": str(args.checkpoint), "data": str(args.data),
                                "layers": layers})
    print(f"{len(rows)} rows -> {out}")
    return EXIT_OK


def cmd_convert(args) -> int:
    n = convert_png_dir(args.input, args.out, args.num_classes)
    print(f"{args.out}\tcount={n}\tsha256={_file_digest(args.out)}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def _add_config_selection(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--configs", help="JSON list of pause configs (inline or a file path); "
                   "each config is a list of {\"layer\", \"tau\"} objects")
    g.add_argument("--table1", action="store_true", help="use the thirteen standard configurations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paumer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic train/eval datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--count", type=int, help="override data.train_count")
    p.add_argument("--eval-count", type=int, help="override data.eval_count")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train with randomised pausing")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="PMSEG1 training file (default: data.train_path)")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--baseline", choices=["entropy", "random_pausing", "no_pausing"],
                   help="override train.baseline_mode")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="mIoU and throughput for pause configurations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="PMSEG1 evaluation file")
    _add_config_selection(p)
    p.add_argument("--out", default="tradeoff.csv")
    p.add_argument("--skyline", action="store_true", help="also write <out>_skyline.csv")
    p.add_argument("--selection", choices=["entropy", "random"], default="entropy")
    p.add_argument("--early-exit", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=5)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="wall-clock throughput per pause configuration")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--config", help="benchmark a freshly initialised model from a run config")
    _add_config_selection(p)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=5)
    p.set_defaults(func=cmd_bench)

    for name in ("report-entropy", "report"):
        p = sub.add_parser(name, help="per-token aux entropy CSV")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--layers", help="comma-separated layers (default: every second layer)")
        p.add_argument("--out", default="entropy.csv")
        p.set_defaults(func=cmd_report_entropy)

    p = sub.add_parser("convert", help="pack <stem>_image.png/<stem>_label.png pairs into PMSEG1")
    p.add_argument("--input", required=True, help="directory of PNG pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int, required=True)
    p.set_defaults(func=cmd_convert)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, CheckpointFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
