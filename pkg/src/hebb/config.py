"""Experiment configuration: a JSON file mirroring the train plan.

Every hyperparameter has an explicit slot so a config file fully
determines a run; field-level validation errors name the offending key.
Relative dataset paths resolve against HEBB_DATA_DIR when set, otherwise
against the directory containing the config file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from . import layers as L
from .engine import SupervisedSettings
from .errors import ConfigError
from .optim import EarlyStopConfig, PlateauConfig
from .rules import KrotovParams
from .tensorcore import RngState


_REQUIRED = object()


def _get(cfg: dict, key: str, kind, where: str, default=_REQUIRED):
    if key not in cfg:
        if default is not _REQUIRED:
            return default
        raise ConfigError(f"{where}.{key}: required field is missing")
    value = cfg[key]
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"{where}.{key}: expected {kinds[0].__name__}, got bool")
    if not isinstance(value, kind):
        raise ConfigError(
            f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}"
        )
    return value


def _no_extras(cfg: dict, allowed: set[str], where: str) -> None:
    extras = set(cfg) - allowed
    if extras:
        raise ConfigError(f"{where}: unknown field(s) {sorted(extras)}")


@dataclass
class DataConfig:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str
    holdout_fraction: float = 0.0
    train_subset: int | None = None


@dataclass
class HebbianConfig:
    rules: dict[str, KrotovParams]
    lr: float = 0.04
    epochs: int = 100
    batch_size: int = 1000
    freeze_after: bool = True


@dataclass
class WeightGridConfig:
    layer: str
    every: int = 0  # epochs between images; 0 disables
    rows: int = 5
    cols: int = 5
    count: int = 25


@dataclass
class OutputsConfig:
    weight_grid: WeightGridConfig | None = None
    layer_stats: bool = False


@dataclass
class TrainPlan:
    """Full experiment description (see configs/ for worked examples)."""

    seed: int
    threads: int | None
    data: DataConfig
    input_shape: tuple[int, ...]
    num_classes: int
    layer_configs: list[dict]
    hebbian: HebbianConfig | None
    supervised: SupervisedSettings | None
    outputs: OutputsConfig = field(default_factory=OutputsConfig)
    base_dir: Path = Path(".")

    def resolve_path(self, name: str) -> Path:
        p = Path(name)
        if p.is_absolute():
            return p
        root = os.environ.get("HEBB_DATA_DIR")
        return (Path(root) if root else self.base_dir) / p


def _parse_layer(cfg: dict, index: int) -> dict:
    where = f"model.layers[{index}]"
    kind = _get(cfg, "kind", str, where)
    name = _get(cfg, "name", str, where)
    known = {
        "linear": {"kind", "name", "units", "bias"},
        "conv2d": {"kind", "name", "filters", "kernel", "stride"},
        "batchnorm2d": {"kind", "name", "eps", "momentum"},
        "repu": {"kind", "name", "power"},
        "maxpool2d": {"kind", "name", "kernel", "stride"},
        "flatten": {"kind", "name"},
    }
    if kind not in known:
        raise ConfigError(f"{where}.kind: unknown layer kind '{kind}'")
    _no_extras(cfg, known[kind], where)
    out = dict(cfg)
    out["name"] = name
    if kind == "linear":
        out["units"] = _get(cfg, "units", int, where)
        out["bias"] = _get(cfg, "bias", bool, where, True)
    elif kind == "conv2d":
        out["filters"] = _get(cfg, "filters", int, where)
        out["kernel"] = _kernel(cfg, where)
        out["stride"] = _get(cfg, "stride", int, where, 1)
    elif kind == "batchnorm2d":
        out["eps"] = _get(cfg, "eps", float, where, 1e-5)
        out["momentum"] = _get(cfg, "momentum", float, where, 0.1)
    elif kind == "repu":
        out["power"] = _get(cfg, "power", (int, float), where, 1)
    elif kind == "maxpool2d":
        out["kernel"] = _kernel(cfg, where)
        out["stride"] = _get(cfg, "stride", int, where)
    return out


def _kernel(cfg: dict, where: str) -> tuple[int, int]:
    raw = _get(cfg, "kernel", (int, list), where)
    if isinstance(raw, int):
        return (raw, raw)
    if len(raw) != 2 or not all(isinstance(v, int) for v in raw):
        raise ConfigError(f"{where}.kernel: expected an int or [kh, kw]")
    return (raw[0], raw[1])


def _parse_hebbian(cfg: dict | None) -> HebbianConfig | None:
    if cfg is None:
        return None
    where = "hebbian"
    _no_extras(cfg, {"rules", "lr", "epochs", "batch_size", "freeze_after"}, where)
    rules_cfg = _get(cfg, "rules", dict, where)
    rules = {}
    for layer_name, params in rules_cfg.items():
        pw = f"{where}.rules.{layer_name}"
        _no_extras(params, {"p", "k", "delta", "precision"}, pw)
        try:
            rules[layer_name] = KrotovParams(
                p=_get(params, "p", float, pw, 4.0),
                k=_get(params, "k", int, pw, 4),
                delta=_get(params, "delta", float, pw, 0.4),
                precision=_get(params, "precision", float, pw, 1e-30),
            )
        except ConfigError as e:
            raise ConfigError(f"{pw}: {e}") from None
    return HebbianConfig(
        rules=rules,
        lr=_get(cfg, "lr", float, where, 0.04),
        epochs=_get(cfg, "epochs", int, where, 100),
        batch_size=_get(cfg, "batch_size", int, where, 1000),
        freeze_after=_get(cfg, "freeze_after", bool, where, True),
    )


def _parse_supervised(cfg: dict | None) -> SupervisedSettings | None:
    if cfg is None:
        return None
    where = "supervised"
    _no_extras(cfg, {"supervised_from", "freeze_layers", "lr", "epochs",
                     "batch_size", "plateau", "early_stop", "monitor"}, where)
    plateau_cfg = _get(cfg, "plateau", (dict, type(None)), where, {})
    plateau = None
    if plateau_cfg is not None:
        pw = f"{where}.plateau"
        _no_extras(plateau_cfg, {"factor", "patience", "min_lr", "min_delta"}, pw)
        plateau = PlateauConfig(
            factor=_get(plateau_cfg, "factor", float, pw, 0.5),
            patience=_get(plateau_cfg, "patience", int, pw, 5),
            min_lr=_get(plateau_cfg, "min_lr", float, pw, 0.0),
            min_delta=_get(plateau_cfg, "min_delta", float, pw, 0.0),
        )
    early_cfg = _get(cfg, "early_stop", (dict, type(None)), where, {})
    early = None
    if early_cfg is not None:
        ew = f"{where}.early_stop"
        _no_extras(early_cfg, {"patience", "min_delta"}, ew)
        early = EarlyStopConfig(
            patience=_get(early_cfg, "patience", int, ew, 10),
            min_delta=_get(early_cfg, "min_delta", float, ew, 0.0),
        )
    monitor = _get(cfg, "monitor", str, where, "loss")
    if monitor not in ("loss", "accuracy"):
        raise ConfigError(f"{where}.monitor: must be 'loss' or 'accuracy'")
    freeze = _get(cfg, "freeze_layers", list, where, [])
    return SupervisedSettings(
        supervised_from=_get(cfg, "supervised_from", (str, type(None)), where, None),
        freeze_layers=tuple(freeze),
        lr=_get(cfg, "lr", float, where, 0.001),
        epochs=_get(cfg, "epochs", int, where, 100),
        batch_size=_get(cfg, "batch_size", int, where, 256),
        plateau=plateau,
        early_stop=early,
        monitor=monitor,
    )


def load_plan(path) -> TrainPlan:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_plan(raw, base_dir=path.parent)


def parse_plan(raw: dict, base_dir=Path(".")) -> TrainPlan:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    _no_extras(raw, {"seed", "threads", "data", "model", "hebbian",
                     "supervised", "outputs"}, "config")

    data_cfg = _get(raw, "data", dict, "config")
    _no_extras(data_cfg, {"train_images", "train_labels", "test_images",
                          "test_labels", "holdout_fraction", "train_subset"},
               "data")
    data = DataConfig(
        train_images=_get(data_cfg, "train_images", str, "data"),
        train_labels=_get(data_cfg, "train_labels", str, "data"),
        test_images=_get(data_cfg, "test_images", str, "data"),
        test_labels=_get(data_cfg, "test_labels", str, "data"),
        holdout_fraction=_get(data_cfg, "holdout_fraction", float, "data", 0.0),
        train_subset=_get(data_cfg, "train_subset", (int, type(None)), "data", None),
    )
    if not 0.0 <= data.holdout_fraction < 1.0:
        raise ConfigError("data.holdout_fraction: must lie in [0, 1)")

    model_cfg = _get(raw, "model", dict, "config")
    _no_extras(model_cfg, {"input_shape", "num_classes", "layers"}, "model")
    input_shape = _get(model_cfg, "input_shape", list, "model")
    if len(input_shape) != 3 or not all(isinstance(v, int) for v in input_shape):
        raise ConfigError("model.input_shape: expected [channels, height, width]")
    layer_list = _get(model_cfg, "layers", list, "model")
    if not layer_list:
        raise ConfigError("model.layers: at least one layer is required")
    layer_configs = [_parse_layer(cfg, i) for i, cfg in enumerate(layer_list)]

    hebbian = _parse_hebbian(_get(raw, "hebbian", (dict, type(None)), "config", None))
    supervised = _parse_supervised(
        _get(raw, "supervised", (dict, type(None)), "config", None)
    )

    outputs_cfg = _get(raw, "outputs", dict, "config", {})
    _no_extras(outputs_cfg, {"weight_grid", "layer_stats"}, "outputs")
    grid_cfg = _get(outputs_cfg, "weight_grid", (dict, type(None)), "outputs", None)
    grid = None
    if grid_cfg is not None:
        gw = "outputs.weight_grid"
        _no_extras(grid_cfg, {"layer", "every", "rows", "cols", "count"}, gw)
        grid = WeightGridConfig(
            layer=_get(grid_cfg, "layer", str, gw),
            every=_get(grid_cfg, "every", int, gw, 0),
            rows=_get(grid_cfg, "rows", int, gw, 5),
            cols=_get(grid_cfg, "cols", int, gw, 5),
            count=_get(grid_cfg, "count", int, gw, 25),
        )
    outputs = OutputsConfig(
        weight_grid=grid,
        layer_stats=_get(outputs_cfg, "layer_stats", bool, "outputs", False),
    )

    plan = TrainPlan(
        seed=_get(raw, "seed", int, "config", 0),
        threads=_get(raw, "threads", (int, type(None)), "config", None),
        data=data,
        input_shape=tuple(input_shape),
        num_classes=_get(model_cfg, "num_classes", int, "model"),
        layer_configs=layer_configs,
        hebbian=hebbian,
        supervised=supervised,
        outputs=outputs,
        base_dir=Path(base_dir),
    )
    _cross_validate(plan)
    return plan


def _cross_validate(plan: TrainPlan) -> None:
    names = [cfg["name"] for cfg in plan.layer_configs]
    if len(set(names)) != len(names):
        raise ConfigError(f"model.layers: duplicate layer names in {names}")
    kinds = {cfg["name"]: cfg["kind"] for cfg in plan.layer_configs}
    if plan.hebbian:
        if plan.hebbian.epochs < 0 or plan.hebbian.batch_size < 1:
            raise ConfigError("hebbian: epochs must be >= 0, batch_size >= 1")
        for layer_name in plan.hebbian.rules:
            if layer_name not in kinds:
                raise ConfigError(f"hebbian.rules: no layer named '{layer_name}'")
            if kinds[layer_name] not in ("linear", "conv2d"):
                raise ConfigError(
                    f"hebbian.rules: layer '{layer_name}' "
                    f"({kinds[layer_name]}) cannot be rule-trained"
                )
    if plan.supervised:
        sf = plan.supervised.supervised_from
        if sf is not None and sf not in kinds:
            raise ConfigError(f"supervised.supervised_from: no layer named '{sf}'")
        for fl in plan.supervised.freeze_layers:
            if fl not in kinds:
                raise ConfigError(f"supervised.freeze_layers: no layer named '{fl}'")
    if plan.outputs.weight_grid and plan.outputs.weight_grid.layer not in kinds:
        raise ConfigError(
            f"outputs.weight_grid.layer: no layer named "
            f"'{plan.outputs.weight_grid.layer}'"
        )


def build_model(plan: TrainPlan, rng: RngState) -> L.Model:
    """Construct and initialize the model.

    Rule-trained layers start standard normal; backprop-trained linear
    layers start normal scaled by 1/sqrt(fan_in) to keep early logits
    tame. Initialization consumes `rng` in layer order.
    """
    hebbian_layers = set(plan.hebbian.rules) if plan.hebbian else set()
    nodes: list[L.LayerNode] = []
    shape = plan.input_shape
    for cfg in plan.layer_configs:
        kind = cfg["kind"]
        name = cfg["name"]
        if kind == "linear":
            fan_in = 1
            for extent in shape:
                fan_in *= extent
            scale = 1.0 if name in hebbian_layers else 1.0 / fan_in ** 0.5
            node = L.linear(name, fan_in, cfg["units"], bias=cfg["bias"],
                            rng=rng, scale=scale)
        elif kind == "conv2d":
            node = L.conv2d(name, shape[0], cfg["filters"], cfg["kernel"],
                            cfg["stride"], rng=rng)
        elif kind == "batchnorm2d":
            node = L.batchnorm2d(name, shape[0], eps=cfg["eps"],
                                 momentum=cfg["momentum"])
        elif kind == "repu":
            node = L.repu(name, cfg["power"])
        elif kind == "maxpool2d":
            node = L.maxpool2d(name, cfg["kernel"], cfg["stride"])
        else:
            node = L.flatten(name)
        shape = L.output_shape(node, shape)
        nodes.append(node)
    return L.Model(nodes, plan.input_shape, plan.num_classes)
