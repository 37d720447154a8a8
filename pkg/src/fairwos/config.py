"""Flat ``key = value`` run configuration.

One setting per line; ``#`` starts a comment. Recognized keys:

* every ``TrainConfig`` field (``alpha``, ``K``, ``finetune_epochs``, ...),
  including the ablation flags ``disable_encoder``, ``disable_fairness`` and
  ``disable_weight_update``; ``seed`` is ignored in favor of ``seeds``;
* ``synthetic.<field>`` for any ``SyntheticSpec`` field except ``seed`` (the
  graph seed follows the run seed);
* ``nodes_csv`` and ``edges_csv`` to train on files instead (relative paths
  resolve against the config file's directory);
* ``seeds`` as a comma list, default ``0,...,9``;
* ``out`` for the output directory.

Values are coerced to the declared field type; booleans accept
true/false/1/0/yes/no.
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .graph import Graph, SyntheticSpec, generate_synthetic, load_graph_csv
from .train import TrainConfig

DEFAULT_SEEDS = tuple(range(10))


class ConfigError(ValueError):
    pass


def _coerce(text: str, kind, key: str):
    text = text.strip()
    args = typing.get_args(kind)
    if args and type(None) in args:
        if text.lower() in ("", "none", "null"):
            return None
        kind = next(a for a in args if a is not type(None))
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {getattr(kind, '__name__', kind)}") from None


def _types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


TRAIN_TYPES = _types(TrainConfig)
SYNTH_TYPES = {k: v for k, v in _types(SyntheticSpec).items() if k != "seed"}


def parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"seeds: expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("seeds: empty list")
    return seeds


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: dict = field(default_factory=dict)
    nodes_csv: Path | None = None
    edges_csv: Path | None = None
    seeds: tuple = DEFAULT_SEEDS
    out: Path = Path("runs")

    def __post_init__(self):
        has_csv = self.nodes_csv is not None or self.edges_csv is not None
        if has_csv and self.synthetic:
            raise ConfigError("config names both a synthetic spec and CSV files; pick one")
        if has_csv and (self.nodes_csv is None or self.edges_csv is None):
            raise ConfigError("nodes_csv and edges_csv must be given together")
        SyntheticSpec(**self.synthetic)  # validate early

    @property
    def source(self) -> str:
        return "csv" if self.nodes_csv is not None else "synthetic"

    def train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)

    def load_graph(self, seed: int) -> Graph:
        if self.source == "csv":
            return load_graph_csv(self.nodes_csv, self.edges_csv)
        return generate_synthetic(SyntheticSpec(seed=seed, **self.synthetic))

    def with_overrides(self, **train_fields) -> RunConfig:
        return replace(self, train=replace(self.train, **train_fields))

    def echo(self) -> dict:
        """JSON-friendly view; run-specific seed omitted from the train block."""
        train = {k: getattr(self.train, k) for k in TrainConfig.field_names() if k != "seed"}
        data = ({"nodes_csv": str(self.nodes_csv), "edges_csv": str(self.edges_csv)}
                if self.source == "csv" else {"synthetic": dict(sorted(self.synthetic.items()))})
        return {"train": train, "data": data, "seeds": list(self.seeds)}


def parse_config_text(text: str, base_dir=None) -> RunConfig:
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    train, synth, extra = {}, {}, {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key.startswith("synthetic."):
            name = key[len("synthetic."):]
            if name not in SYNTH_TYPES:
                raise ConfigError(f"line {lineno}: unknown synthetic field {name!r}")
            synth[name] = _coerce(value, SYNTH_TYPES[name], key)
        elif key == "seed":
            continue
        elif key in TRAIN_TYPES:
            train[key] = _coerce(value, TRAIN_TYPES[key], key)
        elif key in ("nodes_csv", "edges_csv"):
            extra[key] = base / value
        elif key == "seeds":
            extra["seeds"] = parse_seeds(value)
        elif key == "out":
            extra["out"] = base / value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        tc = TrainConfig(**train)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    try:
        return RunConfig(train=tc, synthetic=synth, **extra)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config_text(path.read_text(), base_dir=path.parent)
