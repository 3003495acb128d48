"""Experiment configuration files (TOML)."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .nnmodel import ClassifierConfig
from .perturb import KINDS, PerturbationSpec
from .synthgen import SynthConfig
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    manifests: list[Path] = field(default_factory=list)
    synth: SynthConfig | None = None
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    side: int = 256


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ClassifierConfig = field(default_factory=ClassifierConfig)
    train_source: TrainConfig = field(default_factory=TrainConfig)
    train_target: TrainConfig = field(default_factory=TrainConfig)
    source_fraction: float = 1.0
    perturb: list[PerturbationSpec] = field(default_factory=lambda: [PerturbationSpec(k) for k in KINDS])

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Replace every seed in the experiment with ``seed``."""
        data = replace(self.data, seed=seed, synth=replace(self.data.synth, seed=seed) if self.data.synth else None)
        return replace(
            self,
            data=data,
            model=replace(self.model, init_seed=seed),
            train_source=replace(self.train_source, seed=seed),
            train_target=replace(self.train_target, seed=seed),
            perturb=[replace(p, seed=seed) for p in self.perturb],
        )


def _build(cls, table: dict, where: str, **extra):
    known = {f.name for f in fields(cls)}
    unknown = set(table) - known
    if unknown:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(sorted(unknown))}")
    try:
        return cls(**{**table, **extra})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def _train(table: dict, where: str) -> TrainConfig:
    table = dict(table)
    if table.get("class_weights") is not None:
        table["class_weights"] = tuple(float(w) for w in table["class_weights"])
    return _build(TrainConfig, table, where)


def parse_config(doc: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    unknown = set(doc) - {"data", "model", "train", "perturb"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    d = dict(doc.get("data", {}))
    synth = None
    if "synth" in d:
        s = dict(d.pop("synth"))
        if "n_per_class" in s:
            s["n_per_class"] = tuple(s["n_per_class"])
        synth = _build(SynthConfig, s, "data.synth")
        d.setdefault("side", synth.side)
    manifests = [Path(p) if Path(p).is_absolute() else base_dir / p for p in d.pop("manifests", [])]
    if synth is None and not manifests:
        raise ConfigError("[data] needs either `manifests` or a [data.synth] table")
    if "ratios" in d:
        d["ratios"] = tuple(float(r) for r in d["ratios"])
        if len(d["ratios"]) != 3 or abs(sum(d["ratios"]) - 1) > 1e-9 or min(d["ratios"]) <= 0:
            raise ConfigError("[data] ratios must be three positive fractions summing to 1")
    data = _build(DataSection, d, "data", manifests=manifests, synth=synth)
    model_table = dict(doc.get("model", {}))
    model_table.setdefault("input_side", data.side)
    model_table.setdefault("num_classes", 2)
    if model_table["input_side"] != data.side:
        raise ConfigError("[model] input_side must equal [data] side")
    model = _build(ClassifierConfig, model_table, "model")
    train = dict(doc.get("train", {}))
    source_fraction = float(train.pop("source_fraction", 1.0))
    if not 0 < source_fraction <= 1:
        raise ConfigError("[train] source_fraction must lie in (0, 1]")
    common = {k: v for k, v in train.items() if not isinstance(v, dict)}
    extra = set(train) - set(common) - {"source", "target"}
    if extra:
        raise ConfigError(f"[train] unknown sub-table(s): {', '.join(sorted(extra))}")
    train_source = _train({**common, **train.get("source", {})}, "train.source")
    train_target = _train({**common, **train.get("target", {})}, "train.target")
    perturb = []
    for i, item in enumerate(doc.get("perturb", [])):
        item = dict(item)
        try:
            kind = item.pop("kind")
            seed = int(item.pop("seed", 0))
            perturb.append(PerturbationSpec(kind, item, seed))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"[[perturb]] entry {i + 1}: {exc}") from exc
    cfg = ExperimentConfig(data, model, train_source, train_target, source_fraction)
    if perturb:
        cfg.perturb = perturb
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, path.parent)
