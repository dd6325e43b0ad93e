"""Training engines and the event system that ties handlers to them.

Two execution flows share one event vocabulary:

* the Hebbian flow: an outer epoch loop and an inner loop over the
  rule-trainable layers, each fed by a layer-specific preprocessing step
  and updated through the Local optimizer; no gradient is ever computed;
* the supervised flow: a conventional train/evaluate loop over the
  layers from ``supervised_from`` onward, with Adam, a plateau schedule,
  and early stopping; everything before that point runs frozen in eval
  mode.

Handlers are synchronous and run in registration order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from . import layers as L
from . import parallel
from .dataio import BatchPlan, Dataset, batches
from .errors import ConfigError
from .optim import (
    Adam,
    EarlyStopConfig,
    EarlyStopping,
    LocalOptimizer,
    PlateauConfig,
    ReduceLROnPlateau,
)
from .rules import LearningRule, rule_for_layer
from .tensorcore import RngState


class EventKind(Enum):
    STARTED = "started"
    EPOCH_STARTED = "epoch_started"
    ITERATION_COMPLETED = "iteration_completed"
    EPOCH_COMPLETED = "epoch_completed"
    COMPLETED = "completed"


@dataclass
class Event:
    kind: EventKind
    epoch: int | None = None
    iteration: int | None = None
    metrics: dict = field(default_factory=dict)


@dataclass
class MetricsRow:
    phase: str
    epoch: int
    lr: float
    loss: float | None
    accuracy: float | None
    seconds: float


@dataclass
class RunRecord:
    """Per-epoch metric rows plus the artifact paths a run emitted.

    `meta` echoes the reproducibility inputs (seed, thread count) so a
    record is self-describing.
    """

    rows: list[MetricsRow] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


class _EventSource:
    def __init__(self):
        self._handlers: dict[EventKind, list[Callable[[Event], None]]] = {
            kind: [] for kind in EventKind
        }

    def register_handler(self, kind: EventKind,
                         handler: Callable[[Event], None]) -> None:
        self._handlers[kind].append(handler)

    def _fire(self, event: Event) -> None:
        for handler in self._handlers[event.kind]:
            handler(event)


def register_handler(trainer: _EventSource, kind: EventKind,
                     handler: Callable[[Event], None]) -> None:
    """Attach `handler` to fire synchronously on `kind` events of `trainer`."""
    trainer.register_handler(kind, handler)


def preprocess_for_layer(layer: L.LayerNode, batch_images: np.ndarray,
                         model: L.Model) -> np.ndarray:
    """Rule inputs for one layer: propagate the batch through everything
    before it (eval mode), then reshape to (samples, d).

    Linear layers see flattened activations; convolutions see one row per
    kernel position (the patch matrix), so the rule can treat each filter
    exactly like a dense hidden unit.
    """
    if not rule_for_layer(layer):
        raise ConfigError(f"layer '{layer.name}' is not trainable by a local rule")
    x = batch_images
    for prior in model.layers[: model.index(layer.name)]:
        x, _ = L.forward(prior, x, "eval")
    if layer.kind == "linear":
        flat = x.reshape(x.shape[0], -1)
        expected = layer.params["weight"].shape[1]
        if flat.shape[1] != expected:
            raise ConfigError(
                f"layer '{layer.name}' expects {expected} inputs, "
                f"got {flat.shape[1]}"
            )
        return flat
    kh, kw = layer.hyper["kernel"]
    return L.extract_patches(x, kh, kw, layer.hyper["stride"])


def _chunk_rows(array: np.ndarray, size: int):
    for start in range(0, array.shape[0], size):
        yield array[start:start + size]


def _rule_weight_view(layer: L.LayerNode) -> np.ndarray:
    """2-D (units, inputs) view sharing memory with the layer's weight, so
    in-place optimizer steps reach the real parameters."""
    weight = layer.params["weight"]
    if layer.kind == "conv2d":
        return weight.reshape(weight.shape[0], -1)
    return weight


class HebbianTrainer(_EventSource):
    """Layer-wise local training: per batch, each registered layer is
    preprocessed and updated in model order, so later layers always see
    the earlier layers' weights as already updated in this iteration."""

    def __init__(self, model: L.Model, rules: dict[str, LearningRule],
                 optimizer: LocalOptimizer):
        super().__init__()
        self.model = model
        self.rules = dict(rules)
        self.optimizer = optimizer
        for name in self.rules:
            layer = model.layer(name)  # raises ConfigError for unknown names
            if layer.kind not in ("linear", "conv2d"):
                raise ConfigError(
                    f"layer '{name}' ({layer.kind}) cannot be rule-trained"
                )

    def _trained_layers(self) -> list[L.LayerNode]:
        return [l for l in self.model.layers
                if l.name in self.rules and rule_for_layer(l)]

    def run(self, dataset: Dataset, *, epochs: int, batch_size: int,
            rng: RngState, shuffle: bool = True) -> RunRecord:
        trained = self._trained_layers()
        if not trained:
            raise ConfigError("no unfrozen rule-trainable layers to train")
        record = RunRecord(meta={"phase": "hebbian", "seed": rng.seed,
                                 "threads": parallel.threads()})
        self._fire(Event(EventKind.STARTED))
        for epoch in range(epochs):
            t0 = time.perf_counter()
            lr_now = self.optimizer.lr(trained[0].name, epoch)
            self._fire(Event(EventKind.EPOCH_STARTED, epoch=epoch))
            plan = BatchPlan(batch_size, shuffle=shuffle, rng=rng if shuffle else None)
            for iteration, (images, _) in enumerate(batches(dataset, plan)):
                for layer in trained:
                    inputs = preprocess_for_layer(layer, images, self.model)
                    weight = _rule_weight_view(layer)
                    for chunk in _chunk_rows(inputs, batch_size):
                        update = self.rules[layer.name].update(weight, chunk)
                        self.optimizer.step(layer.name, weight,
                                            update.delta_w, epoch)
                self._fire(Event(EventKind.ITERATION_COMPLETED,
                                 epoch=epoch, iteration=iteration))
            seconds = time.perf_counter() - t0
            row = MetricsRow("hebbian", epoch, lr_now, None, None, seconds)
            record.rows.append(row)
            self._fire(Event(EventKind.EPOCH_COMPLETED, epoch=epoch,
                             metrics={"row": row, "model": self.model}))
        self._fire(Event(EventKind.COMPLETED))
        return record


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = len(labels)
    rows = np.arange(n)
    losses = -shifted[rows, labels] + np.log(exp.sum(axis=1))
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    return float(losses.mean()), grad / n


def evaluate(model: L.Model, dataset: Dataset,
             batch_size: int = 256) -> dict[str, float]:
    """Eval-mode metrics: mean cross-entropy and argmax accuracy."""
    total_loss = 0.0
    correct = 0
    plan = BatchPlan(batch_size)
    for images, labels in batches(dataset, plan):
        x = images
        for layer in model.layers:
            x, _ = L.forward(layer, x, "eval")
        loss, _ = softmax_cross_entropy(x, labels)
        total_loss += loss * len(labels)
        correct += int(np.count_nonzero(np.argmax(x, axis=1) == labels))
    return {"loss": total_loss / dataset.count,
            "accuracy": correct / dataset.count}


@dataclass
class SupervisedSettings:
    """Everything the supervised phase needs besides the data."""

    supervised_from: str | None = None
    freeze_layers: tuple[str, ...] = ()
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 256
    plateau: PlateauConfig | None = field(default_factory=PlateauConfig)
    early_stop: EarlyStopConfig | None = field(default_factory=EarlyStopConfig)
    monitor: str = "loss"  # evaluation-set loss ('min') or accuracy ('max')


_TRAINABLE_PARAMS = {"linear": ("weight", "bias"), "batchnorm2d": ("gamma", "beta")}


class SupervisedTrainer(_EventSource):
    """Backprop training of the layers from `supervised_from` onward.

    Layers before that point, and any frozen or explicitly excluded layer,
    never change; gradients still flow through excluded layers inside the
    head, but stop at the head boundary.
    """

    def __init__(self, model: L.Model, settings: SupervisedSettings):
        super().__init__()
        self.model = model
        self.settings = settings
        self.start = (model.index(settings.supervised_from)
                      if settings.supervised_from else 0)
        for name in settings.freeze_layers:
            model.index(name)  # validate
        if settings.monitor not in ("loss", "accuracy"):
            raise ConfigError(
                f"monitor must be 'loss' or 'accuracy', got {settings.monitor!r}"
            )

    def trainable_params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.model.layers[self.start:]:
            if layer.frozen or layer.name in self.settings.freeze_layers:
                continue
            for pname in _TRAINABLE_PARAMS.get(layer.kind, ()):
                if pname in layer.params:
                    out[f"{layer.name}.{pname}"] = layer.params[pname]
        return out

    def _train_batch(self, images, labels, adam, trainable):
        x = images
        for layer in self.model.layers[: self.start]:
            x, _ = L.forward(layer, x, "eval")
        caches = []
        for layer in self.model.layers[self.start:]:
            x, cache = L.forward(layer, x, "train")
            caches.append(cache)
        loss, grad = softmax_cross_entropy(x, labels)
        predictions = np.argmax(x, axis=1)
        grads: dict[str, np.ndarray] = {}
        for layer, cache in zip(reversed(self.model.layers[self.start:]),
                                reversed(caches)):
            grad, param_grads = L.backward(layer, cache, grad)
            for pname, g in param_grads.items():
                qualified = f"{layer.name}.{pname}"
                if qualified in trainable:
                    grads[qualified] = g
        adam.step(grads)
        return loss, int(np.count_nonzero(predictions == labels))

    def run(self, train_data: Dataset, eval_data: Dataset, *,
            rng: RngState) -> RunRecord:
        s = self.settings
        trainable = self.trainable_params()
        if not trainable:
            raise ConfigError("the supervised head has no trainable parameters")
        adam = Adam(trainable, lr=s.lr)
        mode = "min" if s.monitor == "loss" else "max"
        plateau = (ReduceLROnPlateau(replace(s.plateau, mode=mode))
                   if s.plateau else None)
        early = (EarlyStopping(replace(s.early_stop, mode=mode))
                 if s.early_stop else None)

        record = RunRecord(meta={"phase": "supervised", "seed": rng.seed,
                                 "threads": parallel.threads()})
        self._fire(Event(EventKind.STARTED))
        for epoch in range(s.epochs):
            t0 = time.perf_counter()
            lr_now = adam.lr
            self._fire(Event(EventKind.EPOCH_STARTED, epoch=epoch))
            plan = BatchPlan(s.batch_size, shuffle=True, rng=rng)
            train_loss = 0.0
            train_correct = 0
            for iteration, (images, labels) in enumerate(batches(train_data, plan)):
                loss, correct = self._train_batch(images, labels, adam, trainable)
                train_loss += loss * len(labels)
                train_correct += correct
                self._fire(Event(EventKind.ITERATION_COMPLETED, epoch=epoch,
                                 iteration=iteration, metrics={"loss": loss}))
            metrics = evaluate(self.model, eval_data, batch_size=s.batch_size)
            seconds = time.perf_counter() - t0
            row = MetricsRow("supervised", epoch, lr_now,
                             metrics["loss"], metrics["accuracy"], seconds)
            record.rows.append(row)
            self._fire(Event(EventKind.EPOCH_COMPLETED, epoch=epoch, metrics={
                "row": row, "model": self.model,
                "train_loss": train_loss / train_data.count,
                "train_accuracy": train_correct / train_data.count,
            }))
            monitored = metrics[s.monitor]
            if plateau:
                adam.lr = plateau.step(monitored, adam.lr)
            if early and early.step(monitored, self.model):
                break
        self._fire(Event(EventKind.COMPLETED))
        return record


def reinit_head(model: L.Model, start: int, rng: RngState) -> None:
    """Fresh parameters for the non-frozen layers from `start` onward.

    Linear weights are standard normal scaled by 1/sqrt(fan_in) with zero
    bias; batch norm resets to the identity transform with fresh running
    statistics.
    """
    for layer in model.layers[start:]:
        if layer.frozen:
            continue
        if layer.kind == "linear":
            w = layer.params["weight"]
            w[...] = rng.normal(w.shape) / np.sqrt(w.shape[1])
            if "bias" in layer.params:
                layer.params["bias"][...] = 0.0
        elif layer.kind == "batchnorm2d":
            layer.params["gamma"][...] = 1.0
            layer.params["beta"][...] = 0.0
            layer.params["running_mean"][...] = 0.0
            layer.params["running_var"][...] = 1.0


def hebbian_evaluate(model: L.Model, train_data: Dataset, eval_data: Dataset,
                     settings: SupervisedSettings, rng: RngState,
                     ) -> dict[str, float]:
    """Score the current local features: train a fresh supervised head to
    completion, evaluate, then restore the model bit-exactly."""
    snapshot = model.snapshot()
    try:
        trainer = SupervisedTrainer(model, settings)
        reinit_head(model, trainer.start, rng.child(1))
        trainer.run(train_data, eval_data, rng=rng.child(2))
        return evaluate(model, eval_data, batch_size=settings.batch_size)
    finally:
        model.restore(snapshot)
