"""Accuracy summaries, gain histograms, resource accounting, sensitivity table.

Resource rows follow a fixed cost model: communication is the element count
of the strategy's aggregated ids, storage is the client-resident parameter
total (APFL doubles it, plugins add their own), and training FLOPs are the
base forward count times a strategy multiplier (2x for the two-model
methods, 1 + per-block adapter share for the adapter-generated prefixes).
Percent columns are taken against the FedAvg row of the same model config.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

from .errors import InputError
from .model import ModelConfig, build_vit, count_flops, count_parameters
from .params import LayerTag
from .plugins import init_plugin
from .strategies import Strategy, make_strategy, partition


@dataclass(frozen=True)
class AccuracySummary:
    per_client: tuple[float, ...]
    client_ids: tuple[int, ...]
    mean: float
    std: float  # population


def summarize(per_client: Sequence[float], client_ids: Sequence[int] | None = None) -> AccuracySummary:
    """Arithmetic mean and population standard deviation of per-client accuracies."""
    values = [float(v) for v in per_client]
    if not values:
        raise InputError("no accuracies to summarize")
    ids = tuple(range(len(values))) if client_ids is None else tuple(client_ids)
    if len(ids) != len(values):
        raise InputError("client_ids and accuracies disagree on length")
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return AccuracySummary(tuple(values), ids, mean, math.sqrt(var))


@dataclass(frozen=True)
class GainDensity:
    bins: tuple[tuple[float, float, int], ...]  # (left, right, count)
    min_gain: float
    max_gain: float


def gain_density(
    per_client: Mapping[int, float],
    baseline_per_client: Mapping[int, float],
    bin_width: float = 0.05,
) -> GainDensity:
    """Histogram of per-client accuracy gains over a baseline run."""
    if set(per_client) != set(baseline_per_client):
        raise InputError("client id sets do not match")
    if bin_width <= 0:
        raise InputError("bin_width must be > 0")
    gains = [per_client[c] - baseline_per_client[c] for c in sorted(per_client)]
    lo = math.floor(min(gains) / bin_width) * bin_width
    nbins = int(math.floor((max(gains) - lo) / bin_width)) + 1
    counts = [0] * nbins
    for g in gains:
        counts[min(int((g - lo) // bin_width), nbins - 1)] += 1
    bins = tuple(
        (lo + i * bin_width, lo + (i + 1) * bin_width, counts[i]) for i in range(nbins)
    )
    return GainDensity(bins, min(gains), max(gains))


@dataclass(frozen=True)
class ResourceRow:
    strategy: str
    storage_params: float
    storage_pct: float
    train_flops: float
    flops_pct: float
    comm_params: int
    comm_pct: float

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "storage": self.storage_params,
            "storage_pct": self.storage_pct,
            "flops": self.train_flops,
            "flops_pct": self.flops_pct,
            "comm": self.comm_params,
            "comm_pct": self.comm_pct,
        }


def resource_report(
    strategies: Sequence[Strategy],
    model_config: ModelConfig,
    reference_model=None,
    seed: int = 0,
) -> list[ResourceRow]:
    """One row per strategy; percentages against the FedAvg baseline."""
    model = reference_model if reference_model is not None else build_vit(model_config, seed)
    base_params = count_parameters(model)
    base_flops = float(count_flops(model))

    rows = []
    for strategy in strategies:
        plugins = ()
        plugin_params = 0
        if strategy.plugin is not None:
            state = init_plugin(strategy.plugin, model_config, seed)
            plugins = (state,)
            plugin_params = sum(p.numel() for p in state.parameters())
        part = partition(strategy, model, plugins)
        comm = count_parameters(model, plugins, part.global_ids) if part.global_ids else 0

        storage = float(base_params + plugin_params)
        if strategy.name == "apfl":
            storage = 2.0 * base_params

        if strategy.name in ("apfl", "per_fedavg"):
            flops = 2.0 * base_flops
        elif strategy.name == "fedperfix":
            per_block = plugin_params / model_config.depth
            flops = base_flops * (1.0 + per_block / base_params)
        elif plugins:
            flops = float(count_flops(model, plugins))
        else:
            flops = base_flops

        rows.append(
            ResourceRow(
                strategy=strategy.name,
                storage_params=storage,
                storage_pct=100.0 * storage / base_params,
                train_flops=flops,
                flops_pct=100.0 * flops / base_flops,
                comm_params=comm,
                comm_pct=100.0 * comm / base_params,
            )
        )
    return rows


SENSITIVITY_TAGS = (
    LayerTag.patch_embedding,
    LayerTag.position_embedding,
    LayerTag.layernorm,
    LayerTag.attention,
    LayerTag.mlp,
)


@dataclass(frozen=True)
class SensitivityRow:
    layer_type: str
    standalone: AccuracySummary
    combined: AccuracySummary | None
    overall: float | None


def sensitivity_suite(experiment_config, tags=SENSITIVITY_TAGS, jobs: int = 1) -> list[SensitivityRow]:
    """Stand-alone and head-combined runs per layer tag plus the three
    reference rows (all local, all global, head only)."""
    from .federation import run_experiment  # runtime import; federation imports this module

    hyper = experiment_config.strategy.hyper

    def run_with(strategy):
        cfg = replace(experiment_config, strategy=strategy)
        report = run_experiment(cfg, jobs=jobs)
        return summarize(report.accuracies, report.client_ids)

    rows = [
        SensitivityRow("all_local", run_with(make_strategy("local", hyper)), None, None),
        SensitivityRow("all_global", run_with(make_strategy("fedavg", hyper)), None, None),
        SensitivityRow(
            "classification_head",
            run_with(
                make_strategy(
                    "layer_type_local", hyper, local_tags=(LayerTag.classification_head,)
                )
            ),
            None,
            None,
        ),
    ]
    for tag in tags:
        standalone = run_with(make_strategy("layer_type_local", hyper, local_tags=(tag,)))
        combined = run_with(
            make_strategy("layer_type_local", hyper, local_tags=(tag,), include_head=True)
        )
        rows.append(
            SensitivityRow(tag.name, standalone, combined, (standalone.mean + combined.mean) / 2.0)
        )
    return rows


# -- delimited output ----------------------------------------------------------


def _json_mirror(csv_path: Path, payload) -> None:
    csv_path.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def write_accuracy_csv(path: str | Path, client_ids, accuracies) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "accuracy"])
        for cid, acc in zip(client_ids, accuracies):
            writer.writerow([cid, repr(float(acc))])
    _json_mirror(
        path,
        [{"client_id": int(c), "accuracy": float(a)} for c, a in zip(client_ids, accuracies)],
    )


def write_resources_csv(path: str | Path, rows: Sequence[ResourceRow]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["strategy", "storage", "storage_pct", "flops", "flops_pct", "comm", "comm_pct"]
        )
        for row in rows:
            writer.writerow(
                [
                    row.strategy,
                    repr(row.storage_params),
                    repr(row.storage_pct),
                    repr(row.train_flops),
                    repr(row.flops_pct),
                    row.comm_params,
                    repr(row.comm_pct),
                ]
            )
    _json_mirror(path, [row.to_dict() for row in rows])


def write_sensitivity_csv(path: str | Path, rows: Sequence[SensitivityRow]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "layer_type",
                "standalone_mean",
                "standalone_std",
                "combined_mean",
                "combined_std",
                "overall",
            ]
        )
        for row in rows:
            record = [row.layer_type, repr(row.standalone.mean), repr(row.standalone.std)]
            if row.combined is not None:
                record += [repr(row.combined.mean), repr(row.combined.std), repr(row.overall)]
            else:
                record += ["", "", ""]
            writer.writerow(record)
    _json_mirror(
        path,
        [
            {
                "layer_type": row.layer_type,
                "standalone_mean": row.standalone.mean,
                "standalone_std": row.standalone.std,
                "combined_mean": None if row.combined is None else row.combined.mean,
                "combined_std": None if row.combined is None else row.combined.std,
                "overall": row.overall,
            }
            for row in rows
        ],
    )


def write_gain_density_csv(path: str | Path, density: GainDensity) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, count in density.bins:
            writer.writerow([repr(lo), repr(hi), count])
    _json_mirror(
        path,
        {
            "bins": [{"left": lo, "right": hi, "count": c} for lo, hi, c in density.bins],
            "min_gain": density.min_gain,
            "max_gain": density.max_gain,
        },
    )
