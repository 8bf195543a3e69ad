"""Experiment configuration: strict JSON parsing and component assembly.

The config file is a single JSON document with nested sections (model,
strategy, round, data).  Unknown keys are rejected with the offending
section and key named, so typos never silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import Dataset, PartitionPlan, dirichlet_partition, domain_partition, load_folder_dataset, synth_dataset
from .errors import ConfigurationError
from .federation import RoundConfig, derive_rng
from .model import ModelConfig
from .params import LayerTag
from .plugins import PluginSpec
from .strategies import Hyperparameters, Strategy, make_strategy


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"  # synth | folder
    partition: str = "dirichlet"  # dirichlet | domain
    alpha: float = 0.1
    test_fraction: float = 0.25
    classes: int = 8
    samples: int = 1600
    noise: float = 0.02
    domains: int = 1
    clients_per_domain: int | None = None
    folder: str | None = None
    min_per_client: int = 4

    def __post_init__(self):
        if self.source not in ("synth", "folder"):
            raise ConfigurationError("data.source must be 'synth' or 'folder'")
        if self.partition not in ("dirichlet", "domain"):
            raise ConfigurationError("data.partition must be 'dirichlet' or 'domain'")
        if self.source == "folder" and not self.folder:
            raise ConfigurationError("data.folder is required when data.source='folder'")
        if self.partition == "domain" and self.clients_per_domain is None:
            raise ConfigurationError(
                "data.clients_per_domain is required for the domain partition"
            )
        if self.alpha <= 0:
            raise ConfigurationError("data.alpha must be > 0")


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    strategy: Strategy
    round: RoundConfig
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/out"
    seed: int = 0
    uniform_weights: bool = False

    def to_dict(self) -> dict:
        strategy = {
            "name": self.strategy.name,
            "hyper": {f.name: getattr(self.strategy.hyper, f.name) for f in fields(Hyperparameters)},
        }
        if self.strategy.local_tags:
            strategy["local_tags"] = [t.name for t in self.strategy.local_tags]
        if self.strategy.include_head:
            strategy["include_head"] = True
        if self.strategy.plugin is not None:
            strategy["plugin"] = {
                f.name: getattr(self.strategy.plugin, f.name) for f in fields(PluginSpec)
            }
        return {
            "model": {f.name: getattr(self.model, f.name) for f in fields(ModelConfig)},
            "strategy": strategy,
            "round": {
                "total_rounds": self.round.total_rounds,
                "num_clients": self.round.num_clients,
                "participation_ratio": self.round.participation_ratio,
            },
            "data": {f.name: getattr(self.data, f.name) for f in fields(DataConfig)},
            "output_dir": self.output_dir,
            "seed": self.seed,
            "uniform_weights": self.uniform_weights,
        }

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()


def _take(section: dict, name: str, allowed: set[str]) -> dict:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) in {name!r} section: {', '.join(sorted(unknown))}"
        )
    return dict(section)


def config_from_dict(raw: dict) -> ExperimentConfig:
    top = _take(
        raw, "config",
        {"model", "strategy", "round", "data", "output_dir", "seed", "uniform_weights"},
    )
    if "model" not in top or "strategy" not in top or "round" not in top:
        raise ConfigurationError("config requires 'model', 'strategy', and 'round' sections")

    model_kwargs = _take(top["model"], "model", {f.name for f in fields(ModelConfig)})
    model = ModelConfig(**model_kwargs)

    strat_raw = _take(
        top["strategy"], "strategy",
        {"name", "hyper", "local_tags", "include_head", "plugin"},
    )
    if "name" not in strat_raw:
        raise ConfigurationError("strategy.name is required")
    hyper_kwargs = _take(
        strat_raw.get("hyper", {}), "strategy.hyper",
        {f.name for f in fields(Hyperparameters)},
    )
    hyper = Hyperparameters(**hyper_kwargs)
    local_tags = []
    for tag_name in strat_raw.get("local_tags", []):
        try:
            local_tags.append(LayerTag[tag_name])
        except KeyError:
            raise ConfigurationError(
                f"strategy.local_tags: unknown layer tag {tag_name!r}"
            ) from None
    plugin = None
    if "plugin" in strat_raw:
        plugin_kwargs = _take(
            strat_raw["plugin"], "strategy.plugin", {f.name for f in fields(PluginSpec)}
        )
        if "kind" not in plugin_kwargs:
            from .plugins import plugin_for_strategy

            kind = plugin_for_strategy(strat_raw["name"])
            if kind is None:
                raise ConfigurationError("strategy.plugin.kind is required here")
            plugin_kwargs["kind"] = kind
        plugin = PluginSpec(**plugin_kwargs)
    strategy = make_strategy(
        strat_raw["name"],
        hyper,
        local_tags=tuple(local_tags),
        include_head=bool(strat_raw.get("include_head", False)),
        plugin=plugin,
    )

    round_kwargs = _take(
        top["round"], "round",
        {"total_rounds", "num_clients", "participation_ratio", "seed"},
    )
    round_cfg = RoundConfig(**round_kwargs)

    data_kwargs = _take(
        top.get("data", {}), "data", {f.name for f in fields(DataConfig)}
    )
    data_cfg = DataConfig(**data_kwargs)

    cfg = ExperimentConfig(
        model=model,
        strategy=strategy,
        round=round_cfg,
        data=data_cfg,
        output_dir=str(top.get("output_dir", "runs/out")),
        seed=int(top.get("seed", 0)),
        uniform_weights=bool(top.get("uniform_weights", False)),
    )
    _check_referential(cfg)
    return cfg


def _check_referential(cfg: ExperimentConfig) -> None:
    if cfg.data.partition == "domain":
        if cfg.data.source == "synth" and cfg.data.domains < 2:
            raise ConfigurationError(
                "data.partition='domain' needs data.domains >= 2 for synthetic data"
            )
        if cfg.data.clients_per_domain is not None and cfg.data.source == "synth":
            expected = cfg.data.domains * cfg.data.clients_per_domain
            if expected != cfg.round.num_clients:
                raise ConfigurationError(
                    f"round.num_clients={cfg.round.num_clients} but domain partition "
                    f"yields {expected} clients (domains x clients_per_domain)"
                )


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return config_from_dict(raw)


def build_dataset_and_plan(cfg: ExperimentConfig) -> tuple[Dataset, PartitionPlan]:
    if cfg.data.source == "synth":
        dataset = synth_dataset(
            cfg.data.classes,
            cfg.data.samples,
            cfg.model.image_size,
            cfg.data.noise,
            cfg.data.domains,
            derive_rng(cfg.seed, "data"),
        )
    else:
        dataset = load_folder_dataset(cfg.data.folder, cfg.model.image_size)
    rng = derive_rng(cfg.seed, "partition")
    if cfg.data.partition == "dirichlet":
        plan = dirichlet_partition(
            dataset.labels,
            cfg.round.num_clients,
            cfg.data.alpha,
            rng,
            min_per_client=cfg.data.min_per_client,
        )
    else:
        if dataset.domains is None:
            raise ConfigurationError("domain partition requires domain-tagged data")
        domains = len(set(dataset.domains.tolist()))
        cpd = cfg.data.clients_per_domain
        if domains * cpd != cfg.round.num_clients:
            raise ConfigurationError(
                f"round.num_clients={cfg.round.num_clients} but data has {domains} domains "
                f"x {cpd} clients_per_domain"
            )
        plan = domain_partition(
            dataset, cpd, cfg.data.alpha, rng, min_per_client=cfg.data.min_per_client
        )
    return dataset, plan
