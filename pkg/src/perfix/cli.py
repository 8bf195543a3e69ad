"""Command line experiment runner.

Subcommands: ``run`` (one federated experiment), ``sensitivity`` (the
layer-sensitivity table), ``resources`` (cost rows for every registered
strategy), ``plot`` (render a CSV to SVG).  Every artifact lands inside the
output directory; configuration errors exit 2, runtime failures exit 3.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import ConfigurationError, PerfixError
from .strategies import make_strategy

log = logging.getLogger("perfix")

RESOURCE_STRATEGIES = (
    "fedavg",
    "local",
    "apfl",
    "per_fedavg",
    "fedbn_ln",
    "fedbabu",
    "fedrep",
    "vanilla_attention",
    "vanilla_prefix",
    "fedperfix",
    "prompt_local",
    "mlp_adapter_local",
)


def _setup_logging() -> None:
    level = os.environ.get("PERFIX_LOG", "error").lower()
    table = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in table:
        raise ConfigurationError(f"PERFIX_LOG must be one of {sorted(table)}, got {level!r}")
    logging.basicConfig(level=table[level], format="%(levelname)s %(name)s: %(message)s")


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg = replace(cfg, output_dir=str(args.out))
    if args.seed is not None:
        cfg = replace(cfg, seed=int(args.seed))
    return cfg


def _write_manifest(outdir: Path, cfg: ExperimentConfig, command: str) -> None:
    import numpy
    import torch

    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "versions": {
            "perfix": __version__,
            "python": platform.python_version(),
            "numpy": numpy.__version__,
            "torch": torch.__version__,
        },
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_run(args) -> int:
    from . import metrics, plots
    from .federation import run_experiment_with_state, save_checkpoint

    cfg = _load(args)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    report, fed = run_experiment_with_state(cfg, jobs=args.jobs)

    metrics.write_accuracy_csv(outdir / "accuracy.csv", report.client_ids, report.accuracies)
    rows = metrics.resource_report(
        [make_strategy("fedavg", cfg.strategy.hyper), cfg.strategy],
        cfg.model,
        reference_model=fed.template_model,
    )
    metrics.write_resources_csv(outdir / "resources.csv", rows)
    (outdir / "report.json").write_text(report.to_json())
    plots.render_accuracy(report.client_ids, report.accuracies, outdir / "accuracy.svg")
    plots.render_resources([r.to_dict() for r in rows], outdir / "resources.svg")
    _write_manifest(outdir, cfg, "run")
    save_checkpoint(outdir / "checkpoints", fed, cfg.config_hash())
    print(
        f"run complete: strategy={report.strategy} mean_acc={report.mean_accuracy:.4f} "
        f"std={report.std_accuracy:.4f} -> {outdir}"
    )
    return 0


def cmd_sensitivity(args) -> int:
    from . import metrics, plots

    cfg = _load(args)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = metrics.sensitivity_suite(cfg, jobs=args.jobs)
    metrics.write_sensitivity_csv(outdir / "sensitivity.csv", rows)
    payload = json.loads((outdir / "sensitivity.json").read_text())
    plots.render_sensitivity(
        [
            {
                "layer_type": r["layer_type"],
                "standalone_mean": r["standalone_mean"],
                "combined_mean": r["combined_mean"],
                "overall": r["overall"],
            }
            for r in payload
        ],
        outdir / "sensitivity.svg",
    )
    _write_manifest(outdir, cfg, "sensitivity")
    print(f"sensitivity table written: {len(rows)} rows -> {outdir}")
    return 0


def cmd_resources(args) -> int:
    from . import metrics, plots

    cfg = _load(args)
    outdir = Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    strategies = [make_strategy(name, cfg.strategy.hyper) for name in RESOURCE_STRATEGIES]
    rows = metrics.resource_report(strategies, cfg.model)
    metrics.write_resources_csv(outdir / "resources.csv", rows)
    plots.render_resources([r.to_dict() for r in rows], outdir / "resources.svg")
    _write_manifest(outdir, cfg, "resources")
    print(f"resource table written: {len(rows)} strategies -> {outdir}")
    return 0


def _read_csv_rows(path: Path) -> list[dict]:
    if not path.exists():
        raise ConfigurationError(f"CSV not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigurationError(f"{path} holds no data rows")
    return rows


def cmd_plot(args) -> int:
    from . import plots

    csv_path = Path(args.csv)
    outdir = Path(args.out) if args.out else csv_path.parent
    outdir.mkdir(parents=True, exist_ok=True)
    rows = _read_csv_rows(csv_path)
    try:
        if args.kind == "gain_density":
            bins = [
                (float(r["bin_left"]), float(r["bin_right"]), int(r["count"])) for r in rows
            ]
            out = plots.render_gain_density(bins, outdir / "gain_density.svg")
        else:
            parsed = [
                {
                    "layer_type": r["layer_type"],
                    "standalone_mean": float(r["standalone_mean"]),
                    "combined_mean": float(r["combined_mean"]) if r["combined_mean"] else None,
                    "overall": float(r["overall"]) if r["overall"] else None,
                }
                for r in rows
            ]
            out = plots.render_sensitivity(parsed, outdir / "sensitivity.svg")
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"{csv_path} is not a valid {args.kind} CSV: {exc}") from exc
    print(f"figure written -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="perfix",
        description="Personalized federated learning simulator for Vision Transformers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--out", default=None, help="output directory (overrides config)")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--jobs", type=int, default=1,
                       help="max concurrent client updates (results are identical)")

    common(sub.add_parser("run", help="run one federated experiment"))
    common(sub.add_parser("sensitivity", help="run the layer-sensitivity suite"))
    common(sub.add_parser("resources", help="emit resource rows for all strategies"))
    plot = sub.add_parser("plot", help="render a CSV report to SVG")
    plot.add_argument("--csv", required=True, help="input CSV file")
    plot.add_argument("--kind", required=True, choices=("gain_density", "sensitivity"))
    plot.add_argument("--out", default=None, help="output directory (default: next to CSV)")
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        handler = {
            "run": cmd_run,
            "sensitivity": cmd_sensitivity,
            "resources": cmd_resources,
            "plot": cmd_plot,
        }[args.command]
        return handler(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except PerfixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("unhandled failure")
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
