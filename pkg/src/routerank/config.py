"""Sectioned key = value config files mapped onto the config dataclasses."""

from __future__ import annotations

import configparser
import dataclasses

from .model import ModelConfig
from .roadnet import GraphConfig
from .training import TrainConfig
from .world import DatasetConfig


class ConfigError(ValueError):
    """Unparseable config file or unknown section/key."""


DEFAULT_CONFIG_TEXT = """\
[graph]
grid_w = 7
grid_h = 7
spacing_m = 500.0
diagonal_p = 0.25

[dataset]
n_samples = 22000
n_routes = 8
test_fraction = 0.0909090909090909
n_graphs = 36
p_dev = 0.1
penalty_factor = 1.4

[model]
k_blocks = 2
n_banks = 4
h1 = 64
h2 = 32
h3 = 16
lam = 0.1
use_ps = true
use_xc = true
use_cco = true
distill = true

[train]
lr = 0.001
batch_size = 32
epochs = 10
seed = 0

[ablate]
variants = pointwise sa no_xc full ps_plain ps_free
seeds = 0 1 2
"""


@dataclasses.dataclass
class AblateConfig:
    variants: tuple = ("pointwise", "sa", "no_xc", "full", "ps_plain", "ps_free")
    seeds: tuple = (0, 1, 2)


@dataclasses.dataclass
class RunConfig:
    graph: GraphConfig
    dataset: DatasetConfig
    model: ModelConfig
    train: TrainConfig
    ablate: AblateConfig


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is str:
        return value.strip()
    raise ConfigError(f"unsupported config value type {target_type}")


def _fill(cls, section: dict, skip=()):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        ftype = fields[key].type
        if isinstance(ftype, str):
            ftype = {"int": int, "float": float, "bool": bool, "str": str}.get(ftype, str)
        kwargs[key] = _coerce(raw, ftype)
    return kwargs


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config syntax: {exc}") from exc

    known = {"graph", "dataset", "model", "train", "ablate"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")

    graph = GraphConfig(**_fill(GraphConfig, dict(parser.items("graph")) if parser.has_section("graph") else {}))
    ds_kwargs = _fill(DatasetConfig, dict(parser.items("dataset")) if parser.has_section("dataset") else {},
                      skip=("graph",))
    dataset = DatasetConfig(graph=graph, **ds_kwargs)
    model_kwargs = _fill(ModelConfig, dict(parser.items("model")) if parser.has_section("model") else {},
                         skip=("field_cols",))
    model = ModelConfig(**model_kwargs)
    train = TrainConfig(**_fill(TrainConfig, dict(parser.items("train")) if parser.has_section("train") else {}))

    ablate = AblateConfig()
    if parser.has_section("ablate"):
        items = dict(parser.items("ablate"))
        variants = tuple(items.pop("variants", " ".join(ablate.variants)).split())
        seeds = tuple(int(s) for s in items.pop("seeds", "0 1 2").split())
        if items:
            raise ConfigError(f"unknown key {next(iter(items))!r} for AblateConfig")
        ablate = AblateConfig(variants=variants, seeds=seeds)
    return RunConfig(graph=graph, dataset=dataset, model=model, train=train, ablate=ablate)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return parse_config(DEFAULT_CONFIG_TEXT)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
