"""Optimizers and schedulers.

The Local optimizer serves the layer-wise phase: it addresses exactly one
layer's weights per step and anneals the learning rate linearly to zero at
the final epoch. The supervised phase uses Adam with the canonical
constants, a reduce-on-plateau learning-rate schedule, and early stopping
with best-weights restoration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


class LocalOptimizer:
    """Per-layer stepper: W += lr0 * (1 - epoch/total) * delta_w.

    Only layers registered in `layer_lrs` may be stepped; everything else
    is untouchable through this object, which is what makes layer-wise
    training safe.
    """

    def __init__(self, layer_lrs: dict[str, float], total_epochs: int):
        if total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {total_epochs}")
        for name, lr in layer_lrs.items():
            if lr <= 0:
                raise ConfigError(f"learning rate for '{name}' must be > 0, got {lr}")
        self.layer_lrs = dict(layer_lrs)
        self.total_epochs = total_epochs

    def lr(self, layer_name: str, epoch: int) -> float:
        """Effective rate at a 0-based epoch; affine, exactly 0 at total_epochs."""
        if layer_name not in self.layer_lrs:
            raise ConfigError(f"layer '{layer_name}' is not registered")
        factor = max(0.0, 1.0 - epoch / self.total_epochs)
        return self.layer_lrs[layer_name] * factor

    def step(self, layer_name: str, weights: np.ndarray, delta_w: np.ndarray,
             epoch: int) -> np.ndarray:
        if weights.shape != delta_w.shape:
            raise DimensionError(
                f"delta_w {delta_w.shape} does not match weights {weights.shape}"
            )
        weights += self.lr(layer_name, epoch) * delta_w
        return weights


class Adam:
    """Adam with bias correction; parameters are updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3, *,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = self.params[name]
            if g.shape != p.shape:
                raise DimensionError(
                    f"grad {g.shape} does not match param '{name}' {p.shape}"
                )
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class PlateauConfig:
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 0.0
    min_delta: float = 0.0
    mode: str = "min"


class ReduceLROnPlateau:
    """Multiply the lr by `factor` after `patience` consecutive stagnant steps."""

    def __init__(self, config: PlateauConfig | None = None):
        self.config = config or PlateauConfig()
        if self.config.mode not in ("min", "max"):
            raise ConfigError(f"mode must be 'min' or 'max', got {self.config.mode}")
        if not 0.0 < self.config.factor < 1.0:
            raise ConfigError(f"factor must be in (0,1), got {self.config.factor}")
        self.best: float | None = None
        self.stagnant = 0

    def _improved(self, value: float) -> bool:
        if self.best is None:
            return True
        if self.config.mode == "min":
            return value < self.best - self.config.min_delta
        return value > self.best + self.config.min_delta

    def step(self, metric_value: float, current_lr: float) -> float:
        if self._improved(metric_value):
            self.best = metric_value
            self.stagnant = 0
            return current_lr
        self.stagnant += 1
        if self.stagnant >= self.config.patience:
            self.stagnant = 0
            return max(current_lr * self.config.factor, self.config.min_lr)
        return current_lr


@dataclass
class EarlyStopConfig:
    patience: int = 10
    min_delta: float = 0.0
    mode: str = "min"


class EarlyStopping:
    """Stop after `patience` stagnant epochs and restore the best weights."""

    def __init__(self, config: EarlyStopConfig | None = None):
        self.config = config or EarlyStopConfig()
        if self.config.mode not in ("min", "max"):
            raise ConfigError(f"mode must be 'min' or 'max', got {self.config.mode}")
        self.best: float | None = None
        self.best_snapshot: dict[str, np.ndarray] | None = None
        self.stagnant = 0
        self.stopped = False

    def _improved(self, value: float) -> bool:
        if self.best is None:
            return True
        if self.config.mode == "min":
            return value < self.best - self.config.min_delta
        return value > self.best + self.config.min_delta

    def step(self, metric_value: float, model) -> bool:
        """Returns True when training should stop; the model is then already
        restored to its best snapshot."""
        if self.stopped:
            return True
        if self._improved(metric_value):
            self.best = metric_value
            self.best_snapshot = model.snapshot()
            self.stagnant = 0
            return False
        self.stagnant += 1
        if self.stagnant >= self.config.patience:
            self.stopped = True
            if self.best_snapshot is not None:
                model.restore(self.best_snapshot)
            return True
        return False
