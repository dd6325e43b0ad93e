"""Command-line entry point: train, eval, bench, and viz.

Exit codes are a stable scripting contract: 0 on success, 1 on a runtime
failure, 2 on a usage or validation problem. Validation always precedes
work, so a rejected invocation leaves no partial outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import parallel
from .checkpoint import apply_checkpoint, load_checkpoint, save_checkpoint
from .config import TrainPlan, build_model, load_plan
from .dataio import Dataset, load_idx_pair, split
from .engine import (
    EventKind,
    HebbianTrainer,
    SupervisedTrainer,
    evaluate,
)
from .errors import ConfigError, FormatError, GeometryError, HebbError
from .layers import Model, linear
from .optim import LocalOptimizer
from .rules import KrotovRule
from .tensorcore import RngState
from .viz import (
    LayerStatsCsvHandler,
    MetricsCsvHandler,
    WeightGridSpec,
    export_weight_grid,
)


@dataclass
class BenchReport:
    """Timing of repeated local-learning epochs; the first epoch warms up
    caches and is excluded from the mean."""

    units: int
    batch_size: int
    threads: int
    epochs: int
    warmup_seconds: float
    epoch_seconds: list[float]

    @property
    def mean_seconds(self) -> float:
        return sum(self.epoch_seconds) / len(self.epoch_seconds)


def _load_datasets(plan: TrainPlan):
    paths = {
        "train_images": plan.resolve_path(plan.data.train_images),
        "train_labels": plan.resolve_path(plan.data.train_labels),
        "test_images": plan.resolve_path(plan.data.test_images),
        "test_labels": plan.resolve_path(plan.data.test_labels),
    }
    for key, p in paths.items():
        if not p.exists():
            raise ConfigError(f"data.{key}: file not found: {p}")
    train = load_idx_pair(paths["train_images"], paths["train_labels"])
    test = load_idx_pair(paths["test_images"], paths["test_labels"])
    return train, test


def _subset(dataset: Dataset, count: int, rng: RngState) -> Dataset:
    if count >= dataset.count:
        return dataset
    chosen = np.sort(rng.permutation(dataset.count)[:count])
    return dataset.subset(chosen)


def cmd_train(args) -> int:
    plan = load_plan(args.config)
    if args.seed is not None:
        plan.seed = args.seed
    if args.threads is not None:
        plan.threads = args.threads
    if plan.supervised is None:
        raise ConfigError("supervised: section is required by the train command")
    train_data, test_data = _load_datasets(plan)

    parallel.set_threads(plan.threads or parallel.threads())
    root = RngState(plan.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if plan.data.train_subset:
        train_data = _subset(train_data, plan.data.train_subset, root.child(3))
    eval_data = test_data
    if plan.data.holdout_fraction > 0:
        train_data, eval_data = split(train_data, plan.data.holdout_fraction,
                                      root.child(4))

    model = build_model(plan, root.child(0))
    for stale in ("metrics.csv", "layer_stats.csv"):
        (out / stale).unlink(missing_ok=True)
    metrics_csv = MetricsCsvHandler(out / "metrics.csv")
    stats_csv = (LayerStatsCsvHandler(out / "layer_stats.csv", "hebbian")
                 if plan.outputs.layer_stats else None)

    if plan.hebbian and plan.hebbian.rules and plan.hebbian.epochs > 0:
        hconf = plan.hebbian
        rules = {name: KrotovRule(params) for name, params in hconf.rules.items()}
        optimizer = LocalOptimizer({name: hconf.lr for name in rules},
                                   hconf.epochs)
        trainer = HebbianTrainer(model, rules, optimizer)
        metrics_csv.attach(trainer)
        if stats_csv:
            stats_csv.attach(trainer)
        grid = plan.outputs.weight_grid
        if grid and grid.every > 0:
            def write_grid(event, grid=grid):
                if (event.epoch + 1) % grid.every:
                    return
                layer = model.layer(grid.layer)
                weights = layer.params["weight"]
                shape = _unit_shape_for(weights, None)
                spec = WeightGridSpec(shape, grid.rows, grid.cols, grid.count,
                                      root.child(5 + event.epoch))
                export_weight_grid(
                    weights.reshape(weights.shape[0], -1), spec,
                    out / f"weights_{grid.layer}_epoch{event.epoch + 1:04d}.pgm",
                )
            trainer.register_handler(EventKind.EPOCH_COMPLETED, write_grid)
        trainer.run(train_data, epochs=hconf.epochs,
                    batch_size=hconf.batch_size, rng=root.child(1))
        if hconf.freeze_after:
            for name in rules:
                model.layer(name).frozen = True
        save_checkpoint(model, out / "hebbian.ckpt")

    sup = SupervisedTrainer(model, plan.supervised)
    metrics_csv.attach(sup)
    if stats_csv:
        sup_stats = LayerStatsCsvHandler(out / "layer_stats.csv", "supervised",
                                         header=False)
        sup_stats.attach(sup)
    sup.run(train_data, eval_data, rng=root.child(2))
    save_checkpoint(model, out / "final.ckpt")
    (out / "run_meta.json").write_text(json.dumps({
        "config": str(Path(args.config).resolve()),
        "seed": plan.seed,
        "threads": parallel.threads(),
        "train_samples": train_data.count,
        "eval_samples": eval_data.count,
    }, indent=2) + "\n")

    train_metrics = evaluate(model, train_data)
    test_metrics = evaluate(model, test_data)
    print(f"train loss {train_metrics['loss']:.6f} "
          f"accuracy {train_metrics['accuracy']:.6f}")
    print(f"test loss {test_metrics['loss']:.6f} "
          f"accuracy {test_metrics['accuracy']:.6f}")
    return 0


def cmd_eval(args) -> int:
    plan = load_plan(args.config)
    if args.threads is not None:
        plan.threads = args.threads
    parallel.set_threads(plan.threads or parallel.threads())
    tensors = load_checkpoint(args.checkpoint)
    model = build_model(plan, RngState(plan.seed))
    apply_checkpoint(model, tensors)
    if args.images and args.labels:
        dataset = load_idx_pair(args.images, args.labels)
    else:
        _, dataset = _load_datasets(plan)
    metrics = evaluate(model, dataset)
    print(f"loss {metrics['loss']:.6f} accuracy {metrics['accuracy']:.6f}")
    return 0


def _bench_dataset(args) -> Dataset:
    if args.images and args.labels:
        return load_idx_pair(args.images, args.labels)
    root = os.environ.get("HEBB_DATA_DIR")
    if not root:
        raise ConfigError(
            "bench needs --images/--labels or HEBB_DATA_DIR with "
            "train-images-idx3-ubyte(.gz) and train-labels-idx1-ubyte(.gz)"
        )
    for suffix in (".gz", ""):
        images = Path(root) / f"train-images-idx3-ubyte{suffix}"
        labels = Path(root) / f"train-labels-idx1-ubyte{suffix}"
        if images.exists() and labels.exists():
            return load_idx_pair(images, labels)
    raise ConfigError(f"no MNIST train pair found under {root}")


def cmd_bench(args) -> int:
    dataset = _bench_dataset(args)
    threads = args.threads or parallel.threads()
    parallel.set_threads(threads)
    rng = RngState(args.seed)
    features = int(np.prod(dataset.images.shape[1:]))
    model = Model([linear("hidden", features, args.units, bias=False, rng=rng)],
                  dataset.images.shape[1:], dataset.num_classes)
    trainer = HebbianTrainer(
        model, {"hidden": KrotovRule()},
        LocalOptimizer({"hidden": 0.04}, args.epochs + 1),
    )
    record = trainer.run(dataset, epochs=args.epochs + 1,
                         batch_size=args.batch_size, rng=rng)
    if args.weights_out:
        save_checkpoint(model, args.weights_out)
    seconds = [row.seconds for row in record.rows]
    report = BenchReport(args.units, args.batch_size, threads, args.epochs,
                         seconds[0], seconds[1:])
    print(f"units {report.units}  batch {report.batch_size}  "
          f"threads {report.threads}  epochs {report.epochs} (+1 warm-up)")
    print(f"warm-up {report.warmup_seconds:.3f} s (excluded)")
    for i, s in enumerate(report.epoch_seconds):
        print(f"epoch {i + 1}: {s:.3f} s")
    print(f"mean seconds/epoch: {report.mean_seconds:.3f}")
    if args.out:
        with open(args.out, "w") as f:
            f.write("units,batch_size,threads,epoch,seconds\n")
            for i, s in enumerate(report.epoch_seconds):
                f.write(f"{report.units},{report.batch_size},"
                        f"{report.threads},{i + 1},{s!r}\n")
            f.write(f"{report.units},{report.batch_size},"
                    f"{report.threads},mean,{report.mean_seconds!r}\n")
    return 0


def _unit_shape_for(weights: np.ndarray, override: str | None):
    if override:
        try:
            h, w = (int(t) for t in override.lower().split("x"))
        except ValueError:
            raise ConfigError(f"--unit-shape must look like 28x28, got {override}")
        return (h, w)
    if weights.ndim == 4:
        f, c, kh, kw = weights.shape
        return (kh, kw) if c == 1 else (c, kh, kw)
    side = int(round(weights.shape[1] ** 0.5))
    if side * side != weights.shape[1]:
        raise ConfigError(
            f"cannot infer a square unit shape from width {weights.shape[1]}; "
            f"pass --unit-shape HxW"
        )
    return (side, side)


def cmd_viz(args) -> int:
    tensors = load_checkpoint(args.checkpoint)
    key = f"{args.layer}.weight"
    if key not in tensors:
        raise ConfigError(
            f"checkpoint has no tensor '{key}' (available: "
            f"{sorted(tensors)})"
        )
    weights = tensors[key]
    try:
        rows, cols = (int(t) for t in args.grid.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--grid must look like 5x5, got {args.grid}")
    shape = _unit_shape_for(weights, args.unit_shape)
    flat = weights.reshape(weights.shape[0], -1)
    count = args.count or min(rows * cols, flat.shape[0])
    spec = WeightGridSpec(shape, rows, cols, count, RngState(args.seed))
    export_weight_grid(flat, spec, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hebb",
        description="Layer-wise local learning with a supervised head.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the two training phases")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--threads", type=int)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--images")
    p_eval.add_argument("--labels")
    p_eval.add_argument("--threads", type=int)
    p_eval.set_defaults(fn=cmd_eval)

    p_bench = sub.add_parser("bench", help="time local-learning epochs")
    p_bench.add_argument("--units", type=int, default=2000)
    p_bench.add_argument("--batch-size", type=int, default=1024)
    p_bench.add_argument("--epochs", type=int, default=10)
    p_bench.add_argument("--threads", type=int)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--images")
    p_bench.add_argument("--labels")
    p_bench.add_argument("--out")
    p_bench.add_argument("--weights-out")
    p_bench.set_defaults(fn=cmd_bench)

    p_viz = sub.add_parser("viz", help="render a weight grid image")
    p_viz.add_argument("--checkpoint", required=True)
    p_viz.add_argument("--layer", required=True)
    p_viz.add_argument("--grid", default="5x5")
    p_viz.add_argument("--count", type=int)
    p_viz.add_argument("--unit-shape")
    p_viz.add_argument("--seed", type=int, default=0)
    p_viz.add_argument("--out", default="weights.pgm")
    p_viz.set_defaults(fn=cmd_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, GeometryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (HebbError, OSError) as e:
        if os.environ.get("HEBB_DEBUG"):
            raise
        print(f"runtime error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
