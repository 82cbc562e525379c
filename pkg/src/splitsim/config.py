"""Run configuration files: flat key=value text with sections.

The schema is versioned by [meta] schema and validated strictly: an unknown
key or section is an error naming it, so typos cannot silently fall back to
defaults. The same parser also reads benchmark manifests, which embed a base
run config plus the grid axes.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Optional

from . import nn
from .data import (
    Dataset,
    PartitionSpec,
    gaussian_mixture,
    linear_regression,
    load_idx_dataset,
    partition,
)
from .orchestrator import RunConfig
from .strategies import STRATEGIES, CycleConfig

SCHEMA_VERSION = 1

_SECTION_KEYS = {
    "meta": {"schema"},
    "data": {"kind", "n", "classes", "dim", "separation", "noise",
             "partition", "alpha", "shards_per_client", "images", "labels"},
    "model": {"hidden", "activation", "cut"},
    "run": {"strategy", "clients", "rounds", "batch_size", "attendance",
            "lr_client", "lr_server", "optimizer", "eval_every", "seed"},
    "cycle": {"server_epochs", "server_batch_size", "pass_mode"},
    "bench": {"strategies", "seeds", "alphas", "accuracy_threshold"},
}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "gaussian-mixture-classify"
    n: int = 4000
    classes: int = 4
    dim: int = 16
    separation: float = 3.0
    noise: float = 1.0
    partition: str = "iid"
    alpha: Optional[float] = None
    shards_per_client: int = 2
    images: Optional[str] = None
    labels: Optional[str] = None

    def build_dataset(self, seed: int) -> Dataset:
        if self.kind == "gaussian-mixture-classify":
            return gaussian_mixture(self.n, self.classes, self.dim, seed,
                                    separation=self.separation, noise=self.noise)
        if self.kind == "linear-regression":
            return linear_regression(self.n, self.dim, seed, noise=self.noise)
        if self.kind == "idx":
            if not self.images or not self.labels:
                raise ConfigError("data.kind=idx needs data.images and data.labels")
            return load_idx_dataset(self.images, self.labels)
        raise ConfigError(f"unknown data.kind {self.kind!r}")

    def partition_spec(self, n_clients: int, seed: int) -> PartitionSpec:
        return PartitionSpec(self.partition, n_clients, seed,
                             alpha=self.alpha,
                             shards_per_client=self.shards_per_client)


@dataclass
class ModelConfig:
    hidden: tuple = (32, 32)
    activation: str = nn.RELU
    cut: int = 2

    def build_layers(self, in_dim: int, out_dim: int, classify: bool) -> tuple:
        return nn.mlp_specs(in_dim, self.hidden, out_dim,
                            activation=self.activation, classifier=classify)


@dataclass
class BenchGrid:
    strategies: tuple = ("psl", "sflv1", "cycle-psl", "cycle-sfl")
    seeds: tuple = (0, 1, 2, 3, 4)
    alphas: tuple = (None,)
    accuracy_threshold: float = 0.6


@dataclass
class FullConfig:
    data: DataConfig
    model: ModelConfig
    run: RunConfig
    bench: Optional[BenchGrid] = None

    def build_clients(self):
        """Dataset + partition for this config's seed bundle."""
        dataset = self.data.build_dataset(self.run.seeds.data)
        spec = self.data.partition_spec(self.run.n_clients, self.run.seeds.data)
        return dataset, partition(dataset, spec, self.run.batch_size)


def _parse_scalar(section: str, key: str, raw: str, kind: type):
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from exc


def _int_list(raw: str) -> tuple:
    return tuple(int(v) for v in raw.replace(",", " ").split())


def _float_list(raw: str) -> tuple:
    return tuple(float(v) for v in raw.replace(",", " ").split())


def _str_list(raw: str) -> tuple:
    return tuple(v for v in raw.replace(",", " ").split())


def _read_ini(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(str(path))
    if not read:
        raise ConfigError(f"config file not found: {path}")
    return parser


def _check_keys(parser: configparser.ConfigParser, allow_bench: bool) -> None:
    for section in parser.sections():
        if section not in _SECTION_KEYS or (section == "bench" and not allow_bench):
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(f"unknown config key [{section}] {key}")
    if parser.has_section("meta"):
        schema = _parse_scalar("meta", "schema", parser["meta"].get("schema", "1"), int)
        if schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema version {schema}")


def load_config(path, seed_override: Optional[int] = None,
                allow_bench: bool = False) -> FullConfig:
    parser = _read_ini(path)
    _check_keys(parser, allow_bench)

    d = DataConfig()
    if parser.has_section("data"):
        sec = parser["data"]
        d.kind = sec.get("kind", d.kind)
        d.n = _parse_scalar("data", "n", sec.get("n", str(d.n)), int)
        d.classes = _parse_scalar("data", "classes", sec.get("classes", str(d.classes)), int)
        d.dim = _parse_scalar("data", "dim", sec.get("dim", str(d.dim)), int)
        d.separation = _parse_scalar("data", "separation",
                                     sec.get("separation", str(d.separation)), float)
        d.noise = _parse_scalar("data", "noise", sec.get("noise", str(d.noise)), float)
        d.partition = sec.get("partition", d.partition)
        if sec.get("alpha") is not None:
            d.alpha = _parse_scalar("data", "alpha", sec["alpha"], float)
        d.shards_per_client = _parse_scalar(
            "data", "shards_per_client",
            sec.get("shards_per_client", str(d.shards_per_client)), int)
        d.images = sec.get("images", None)
        d.labels = sec.get("labels", None)

    m = ModelConfig()
    if parser.has_section("model"):
        sec = parser["model"]
        if sec.get("hidden"):
            m.hidden = _int_list(sec["hidden"])
        m.activation = sec.get("activation", m.activation)
        m.cut = _parse_scalar("model", "cut", sec.get("cut", str(m.cut)), int)

    cycle = CycleConfig()
    if parser.has_section("cycle"):
        sec = parser["cycle"]
        cycle = CycleConfig(
            server_epochs=_parse_scalar("cycle", "server_epochs",
                                        sec.get("server_epochs", "1"), int),
            server_batch_size=_parse_scalar("cycle", "server_batch_size",
                                            sec.get("server_batch_size", "32"), int),
            pass_mode=sec.get("pass_mode", "epoch-passes"))

    if not parser.has_section("run"):
        raise ConfigError("missing required section [run]")
    sec = parser["run"]
    strategy = sec.get("strategy")
    if strategy is None:
        raise ConfigError("missing required key [run] strategy")
    if strategy not in STRATEGIES:
        raise ConfigError(f"[run] strategy: unknown strategy {strategy!r}")
    seed = seed_override if seed_override is not None else _parse_scalar(
        "run", "seed", sec.get("seed", "0"), int)

    classify = d.kind != "linear-regression"
    out_dim = d.classes if classify else 1
    layers = m.build_layers(d.dim, out_dim, classify)
    try:
        run_config = RunConfig(
            n_clients=_parse_scalar("run", "clients", sec.get("clients", "1"), int),
            rounds=_parse_scalar("run", "rounds", sec.get("rounds", "100"), int),
            strategy=strategy,
            layers=layers,
            cut_index=m.cut,
            loss_kind=nn.CROSS_ENTROPY if classify else nn.MSE,
            optimizer=sec.get("optimizer", nn.ADAM),
            lr_client=_parse_scalar("run", "lr_client", sec.get("lr_client", "3e-4"), float),
            lr_server=_parse_scalar("run", "lr_server", sec.get("lr_server", "3e-4"), float),
            batch_size=_parse_scalar("run", "batch_size", sec.get("batch_size", "32"), int),
            attendance=_parse_scalar("run", "attendance", sec.get("attendance", "1.0"), float),
            eval_every=_parse_scalar("run", "eval_every", sec.get("eval_every", "10"), int),
            cycle=cycle,
            seed=seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    bench = None
    if allow_bench and parser.has_section("bench"):
        sec = parser["bench"]
        bench = BenchGrid()
        if sec.get("strategies"):
            bench.strategies = _str_list(sec["strategies"])
            for s in bench.strategies:
                if s not in STRATEGIES:
                    raise ConfigError(f"[bench] strategies: unknown strategy {s!r}")
        if sec.get("seeds"):
            bench.seeds = _int_list(sec["seeds"])
        if sec.get("alphas"):
            bench.alphas = _float_list(sec["alphas"])
        if sec.get("accuracy_threshold"):
            bench.accuracy_threshold = _parse_scalar(
                "bench", "accuracy_threshold", sec["accuracy_threshold"], float)

    return FullConfig(d, m, run_config, bench)
