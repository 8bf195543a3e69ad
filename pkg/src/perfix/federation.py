"""Round-based client/server simulation with partial aggregation.

Every stream of randomness is derived from the master seed with a hash of
(label, round, client), so sampling, batch order, and therefore whole runs
are reproducible regardless of scheduling; client updates may run on a
thread pool and the result is identical to serial execution.
"""

from __future__ import annotations

import copy
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch

from . import metrics
from .data import Shard
from .errors import ConfigurationError, DataError, AggregationError, PerfixError
from .model import (
    ModelConfig,
    VisionTransformer,
    build_vit,
    load_parameter_set,
    named_tagged_parameters,
    parameter_set,
)
from .params import ParameterSet
from .plugins import init_plugin
from .strategies import (
    Partition,
    Strategy,
    TrainStats,
    apfl_update,
    local_update,
    partition,
    per_fedavg_update,
    pre_eval,
)

if TYPE_CHECKING:
    from .config import ExperimentConfig


@dataclass(frozen=True)
class RoundConfig:
    total_rounds: int
    num_clients: int
    participation_ratio: float
    seed: int = 0

    def __post_init__(self):
        if self.total_rounds < 1:
            raise ConfigurationError("total_rounds must be >= 1")
        if self.num_clients < 1:
            raise ConfigurationError("num_clients must be >= 1")
        if not 0.0 < self.participation_ratio <= 1.0:
            raise ConfigurationError("participation_ratio must lie in (0, 1]")
        if self.participation_ratio * self.num_clients < 1.0:
            raise ConfigurationError(
                "participation_ratio too small: no client would be sampled"
            )

    @property
    def sampled_count(self) -> int:
        return max(1, int(round(self.participation_ratio * self.num_clients)))


def derive_seed(master: int, *labels) -> int:
    """Deterministic 64-bit stream seed from the master seed and labels."""
    text = ":".join([str(master)] + [str(x) for x in labels])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def derive_rng(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))


def sample_clients(num_clients: int, ratio: float, rng: np.random.Generator) -> list[int]:
    """K = round(ratio * N) distinct client ids, uniformly without replacement."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigurationError("participation_ratio must lie in (0, 1]")
    if ratio * num_clients < 1.0:
        raise ConfigurationError("participation_ratio too small: round(r*N) < 1")
    k = int(round(ratio * num_clients))
    return [int(c) for c in rng.choice(num_clients, size=k, replace=False)]


def aggregate(params_list: Sequence[ParameterSet], weights: Sequence[int]) -> ParameterSet:
    """Sample-count-weighted mean per parameter id.

    Addends are sorted before reduction so any permutation of the inputs
    gives a bit-identical result, and each element is clamped to the convex
    hull of the client values, which also makes single-client and
    all-identical inputs exact fixed points.
    """
    if not params_list:
        raise AggregationError("nothing to aggregate")
    if len(params_list) != len(weights):
        raise AggregationError("one weight per parameter set required")
    if any(w <= 0 for w in weights):
        raise AggregationError("weights must be positive")
    schema = [(pid, tuple(params_list[0].value(pid).shape)) for pid in params_list[0].ids()]
    for ps in params_list[1:]:
        if [(pid, tuple(ps.value(pid).shape)) for pid in ps.ids()] != schema:
            raise AggregationError("parameter sets do not share an id/shape schema")
    total = float(sum(weights))
    out = ParameterSet()
    for pid, _ in schema:
        values = np.stack([ps.value(pid).numpy() for ps in params_list])
        addends = np.sort(values * np.asarray(weights, dtype=np.float64).reshape(
            (-1,) + (1,) * (values.ndim - 1)), axis=0)
        mean = np.add.reduce(addends, axis=0) / total
        mean = np.clip(mean, values.min(axis=0), values.max(axis=0))
        out.set(pid, torch.from_numpy(mean), params_list[0].tag(pid))
    return out


@dataclass
class MessageRecord:
    round_index: int
    client_id: int
    direction: str  # "down" | "up"
    ids: tuple[str, ...]
    element_count: int


@dataclass
class ClientState:
    client_id: int
    local: ParameterSet
    frozen: ParameterSet
    train: Shard
    test: Shard
    shadow: ParameterSet | None = None  # APFL personalized model
    alpha: float | None = None
    stats: TrainStats | None = None

    @property
    def sample_count(self) -> int:
        return len(self.train)


@dataclass
class ServerState:
    global_params: ParameterSet
    round_index: int = 0
    message_log: list[MessageRecord] = field(default_factory=list)


def evaluate(model: VisionTransformer, test_shard: Shard, plugins=()) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    logits = _batched_logits(model, plugins, test_shard.images)
    return _top1(logits, test_shard.labels)


def _batched_logits(model, plugins, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    if len(images) == 0:
        raise DataError("empty shard")
    outs = []
    with torch.no_grad():
        for start in range(0, len(images), chunk):
            x = torch.from_numpy(np.ascontiguousarray(images[start : start + chunk]))
            outs.append(model.forward_images(x, tuple(plugins)).numpy())
    return np.concatenate(outs)


def _top1(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class _ClientResult:
    client_id: int
    weight: int
    global_part: ParameterSet
    local_part: ParameterSet
    stats: TrainStats
    shadow: ParameterSet | None = None
    alpha: float | None = None


class Federation:
    """Holds the template model, per-client states, and the server."""

    def __init__(
        self,
        model_config: ModelConfig,
        strategy: Strategy,
        shards: list[tuple[Shard, Shard]],
        seed: int,
        jobs: int = 1,
        uniform_weights: bool = False,
    ):
        self.model_config = model_config
        self.strategy = strategy
        self.seed = seed
        self.jobs = max(1, jobs)
        self.uniform_weights = uniform_weights
        self.template_model = build_vit(model_config, derive_seed(seed, "model"))
        self.template_plugins: tuple = ()
        if strategy.plugin is not None:
            self.template_plugins = (
                init_plugin(strategy.plugin, model_config, derive_seed(seed, "plugin")),
            )
        self.partition: Partition = partition(
            strategy, self.template_model, self.template_plugins
        )
        full = parameter_set(self.template_model, self.template_plugins)
        self.server = ServerState(full.subset(self.partition.global_ids))
        self.clients: list[ClientState] = []
        for cid, (train, test) in enumerate(shards):
            self.clients.append(
                ClientState(
                    client_id=cid,
                    local=full.subset(self.partition.local_ids),
                    frozen=full.subset(self.partition.frozen_ids),
                    train=train,
                    test=test,
                    shadow=full.clone() if strategy.name == "apfl" else None,
                    alpha=strategy.hyper.apfl_alpha if strategy.name == "apfl" else None,
                )
            )

    # -- assembly ------------------------------------------------------------

    def _assemble(self, client: ClientState):
        model = copy.deepcopy(self.template_model)
        plugins = tuple(copy.deepcopy(p) for p in self.template_plugins)
        load_parameter_set(model, self.server.global_params, plugins)
        load_parameter_set(model, client.local, plugins)
        load_parameter_set(model, client.frozen, plugins)
        return model, plugins

    def _update_client(self, client: ClientState, round_index: int) -> _ClientResult:
        model, plugins = self._assemble(client)
        rng = derive_rng(self.seed, "client", round_index, client.client_id)
        shadow = None
        alpha = client.alpha
        if self.strategy.name == "apfl":
            personal = copy.deepcopy(self.template_model)
            load_parameter_set(personal, client.shadow)
            alpha, stats = apfl_update(
                model, personal, client.train, self.strategy.hyper, rng, alpha=alpha
            )
            shadow = parameter_set(personal)
        elif self.strategy.name == "per_fedavg":
            stats = per_fedavg_update(model, plugins, client.train, self.strategy.hyper, rng)
        else:
            stats = local_update(
                self.strategy, model, plugins, client.train, self.strategy.hyper, rng
            )
        snapshot = parameter_set(model, plugins)
        return _ClientResult(
            client_id=client.client_id,
            weight=1 if self.uniform_weights else client.sample_count,
            global_part=snapshot.subset(self.partition.global_ids),
            local_part=snapshot.subset(self.partition.local_ids),
            stats=stats,
            shadow=shadow,
            alpha=alpha,
        )

    # -- rounds ---------------------------------------------------------------

    def run_round(self, participation_ratio: float = 1.0) -> list[int]:
        """Sample, broadcast, train, aggregate; returns the sampled client ids."""
        t = self.server.round_index + 1
        sampled = sample_clients(
            len(self.clients),
            participation_ratio,
            derive_rng(self.seed, "sample", t),
        )
        order = sorted(sampled)
        self._log_messages(t, order, "down")
        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                results = list(
                    pool.map(lambda cid: self._update_client(self.clients[cid], t), order)
                )
        else:
            results = [self._update_client(self.clients[cid], t) for cid in order]
        results.sort(key=lambda r: r.client_id)
        self._log_messages(t, order, "up")
        if self.partition.global_ids:
            self.server.global_params = aggregate(
                [r.global_part for r in results], [r.weight for r in results]
            )
        for res in results:
            client = self.clients[res.client_id]
            client.local = res.local_part
            client.stats = res.stats
            if res.shadow is not None:
                client.shadow = res.shadow
            client.alpha = res.alpha if self.strategy.name == "apfl" else None
        self.server.round_index = t
        self._assert_privacy()
        return order

    def run(self, round_config: RoundConfig) -> None:
        if round_config.num_clients != len(self.clients):
            raise ConfigurationError("round config and shard count disagree on num_clients")
        for _ in range(round_config.total_rounds):
            self.run_round(round_config.participation_ratio)

    def _log_messages(self, round_index: int, client_ids, direction: str) -> None:
        ids = self.partition.global_ids
        if not ids:
            return
        count = self.server.global_params.element_count()
        for cid in client_ids:
            self.server.message_log.append(
                MessageRecord(round_index, cid, direction, ids, count)
            )

    def _assert_privacy(self) -> None:
        private = set(self.partition.local_ids) | set(self.partition.frozen_ids)
        for msg in self.server.message_log:
            leaked = private.intersection(msg.ids)
            if leaked:
                raise PerfixError(f"local parameter ids leaked into messages: {sorted(leaked)}")

    # -- evaluation -----------------------------------------------------------

    def final_accuracies(self) -> list[float]:
        """Broadcast the newest global parameters to every client, run any
        pre-evaluation step, and score Top-1 on each client's own test shard."""
        t = self.server.round_index + 1
        self._log_messages(t, [c.client_id for c in self.clients], "down")
        self._assert_privacy()
        accs = []
        for client in self.clients:
            model, plugins = self._assemble(client)
            rng = derive_rng(self.seed, "pre_eval", client.client_id)
            pre_eval(self.strategy, model, plugins, client.train, self.strategy.hyper, rng)
            if self.strategy.name == "apfl":
                personal = copy.deepcopy(self.template_model)
                load_parameter_set(personal, client.shadow)
                logits_g = _batched_logits(model, plugins, client.test.images)
                logits_p = _batched_logits(personal, (), client.test.images)
                a = client.alpha if client.alpha is not None else self.strategy.hyper.apfl_alpha
                accs.append(_top1(a * logits_p + (1.0 - a) * logits_g, client.test.labels))
            else:
                accs.append(evaluate(model, client.test, plugins))
        return accs


@dataclass
class Report:
    strategy: str
    seed: int
    config_hash: str
    client_ids: list[int]
    sample_counts: list[int]
    accuracies: list[float]
    mean_accuracy: float
    std_accuracy: float
    message_rounds: list[dict]
    total_down_elements: int
    total_up_elements: int
    resources: list[dict]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "clients": [
                {"client_id": c, "samples": m, "accuracy": a}
                for c, m, a in zip(self.client_ids, self.sample_counts, self.accuracies)
            ],
            "accuracy": {"mean": self.mean_accuracy, "std": self.std_accuracy},
            "messages": {
                "per_round": self.message_rounds,
                "total_down_elements": self.total_down_elements,
                "total_up_elements": self.total_up_elements,
            },
            "resources": self.resources,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _message_summary(log: list[MessageRecord]) -> tuple[list[dict], int, int]:
    rounds: dict[int, dict] = {}
    for msg in log:
        row = rounds.setdefault(
            msg.round_index, {"round": msg.round_index, "down": 0, "up": 0}
        )
        row[msg.direction] += msg.element_count
    per_round = [rounds[k] for k in sorted(rounds)]
    return (
        per_round,
        sum(r["down"] for r in per_round),
        sum(r["up"] for r in per_round),
    )


def build_shards(cfg: "ExperimentConfig") -> list[tuple[Shard, Shard]]:
    """Materialize the per-client (train, test) shards an experiment config describes."""
    from .config import build_dataset_and_plan  # local import; config imports this module

    dataset, plan = build_dataset_and_plan(cfg)
    from .data import split_per_client

    return split_per_client(
        plan, dataset, cfg.data.test_fraction, derive_rng(cfg.seed, "split")
    )


def run_experiment(cfg: "ExperimentConfig", jobs: int = 1) -> Report:
    """T federated rounds, final broadcast, per-client pre-eval and Top-1 scoring."""
    report, _ = run_experiment_with_state(cfg, jobs=jobs)
    return report


def run_experiment_with_state(cfg: "ExperimentConfig", jobs: int = 1) -> tuple[Report, Federation]:
    torch.set_num_threads(1)  # keeps results independent of the --jobs value
    shards = build_shards(cfg)
    fed = Federation(
        cfg.model,
        cfg.strategy,
        shards,
        seed=cfg.seed,
        jobs=jobs,
        uniform_weights=cfg.uniform_weights,
    )
    fed.run(cfg.round)
    accs = fed.final_accuracies()
    summary = metrics.summarize(accs)
    per_round, down, up = _message_summary(fed.server.message_log)
    rows = metrics.resource_report(
        [fed.strategy], cfg.model, reference_model=fed.template_model
    )
    report = Report(
        strategy=cfg.strategy.name,
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
        client_ids=[c.client_id for c in fed.clients],
        sample_counts=[c.sample_count for c in fed.clients],
        accuracies=accs,
        mean_accuracy=summary.mean,
        std_accuracy=summary.std,
        message_rounds=per_round,
        total_down_elements=down,
        total_up_elements=up,
        resources=[row.to_dict() for row in rows],
    )
    return report, fed


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(
    directory: str | Path,
    fed: Federation,
    config_hash: str,
) -> None:
    """PFXP containers for u and each client's v_i plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fed.server.global_params.save(directory / "u.pfxp")
    for client in fed.clients:
        client.local.save(directory / f"client_{client.client_id:04d}.pfxp")
        if client.shadow is not None:
            client.shadow.save(directory / f"client_{client.client_id:04d}_shadow.pfxp")
    manifest = {
        "round_index": fed.server.round_index,
        "config_hash": config_hash,
        "rng_states": {"master_seed": str(fed.seed)},
        "num_clients": len(fed.clients),
        "strategy": fed.strategy.name,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_checkpoint(directory: str | Path):
    """Returns (manifest, u, {client_id: v_i}, {client_id: shadow})."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    u = ParameterSet.load(directory / "u.pfxp")
    locals_, shadows = {}, {}
    for path in sorted(directory.glob("client_*.pfxp")):
        stem = path.stem
        if stem.endswith("_shadow"):
            shadows[int(stem.split("_")[1])] = ParameterSet.load(path)
        else:
            locals_[int(stem.split("_")[1])] = ParameterSet.load(path)
    return manifest, u, locals_, shadows
