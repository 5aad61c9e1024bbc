"""Command line entry point: ``flsnn run | sweep | report | prepare-data``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import plotting
from .data_io import data_root, prepare_digits_idx
from .harness import (SWEEP_COLUMNS, ConfigError, ExperimentConfig, SweepSpec, bandwidth_report,
                      load_heatmap, read_metrics, read_table, run_experiment, run_sweep)

log = logging.getLogger("flsnn")


def _kappa(text: str) -> Optional[float]:
    if text.lower() in ("none", "dense", "off"):
        return None
    return float(text)


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment (or sweep) file")
    p.add_argument("--seed", type=int)
    p.add_argument("--model", choices=["snn", "ann"])
    p.add_argument("--attack", choices=["none", "noise", "alie", "minmax", "ipm"])
    p.add_argument("--sigma", type=float, help="noise attack standard deviation")
    p.add_argument("--epsilon", type=float, help="IPM scale")
    p.add_argument("--kappa", type=_kappa, default=argparse.SUPPRESS,
                   help="Top-k retention proportion, or 'none' for dense uploads")
    p.add_argument("--malicious-frac", type=float, dest="malicious_frac")
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--out", type=Path, help="output directory")


def overrides_from_args(args) -> Dict[str, Any]:
    mapping = {
        "seed": "seed", "model": "model", "attack": "attack.kind", "sigma": "attack.sigma",
        "epsilon": "attack.epsilon", "malicious_frac": "attack.malicious_fraction",
        "rounds": "rounds", "clients": "num_clients",
    }
    out = {key: getattr(args, name) for name, key in mapping.items() if getattr(args, name, None) is not None}
    if hasattr(args, "kappa"):
        out["kappa"] = args.kappa
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flsnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    _add_overrides(run)
    run.add_argument("--with-baseline", action="store_true",
                     help="also run the attack-free twin and report accuracy loss")

    sweep = sub.add_parser("sweep", help="run a sweep file (base config + deltas)")
    _add_overrides(sweep)
    sweep.add_argument("--jobs", type=int, default=1, help="parallel processes")

    rep = sub.add_parser("report", help="render figures and print tables for a run or sweep directory")
    rep.add_argument("path", type=Path)
    rep.add_argument("--delimiter", default=",", help="field separator for printed tables")
    rep.add_argument("--figures", type=Path, help="figure directory (default: <path>/figures)")

    prep = sub.add_parser("prepare-data", help="write the bundled 8x8 digits as MNIST-format IDX files")
    prep.add_argument("--root", type=Path, help="target directory (default: $FLSNN_DATA_ROOT or ./data)")
    return parser


def _experiment_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    cfg = cfg.with_overrides(overrides_from_args(args))
    if args.out is not None:
        cfg.out_dir = str(args.out)
    return cfg.validate()


def _print_rows(rows: List[Dict[str, Any]], columns, delimiter: str) -> None:
    w = csv.writer(sys.stdout, delimiter=delimiter, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r.get(c) for c in columns])


def cmd_run(args) -> int:
    cfg = _experiment_config(args)
    result = run_experiment(cfg, progress=args.verbose)
    summary = dict(result.summary)
    if args.with_baseline and cfg.attack.kind != "none":
        clean_cfg = cfg.with_overrides({"attack.kind": "none"})
        clean_cfg.out_dir = str(Path(cfg.out_dir) / "baseline") if cfg.out_dir else None
        clean = run_experiment(clean_cfg).summary
        summary["clean_accuracy"] = clean["final_accuracy"]
        summary["accuracy_loss"] = clean["final_accuracy"] - summary["final_accuracy"]
        if cfg.out_dir:
            with open(Path(cfg.out_dir) / "summary.json", "w") as fh:
                json.dump(summary, fh, indent=2)
    summary.pop("evaluations", None)
    _print_rows([{"key": k, "value": v} for k, v in summary.items()], ("key", "value"), ",")
    return 0


def cmd_sweep(args) -> int:
    if args.config is None:
        raise ConfigError("sweep needs --config pointing at a sweep file")
    spec = SweepSpec.from_file(args.config)
    spec.base = spec.base.with_overrides(overrides_from_args(args))
    out = args.out or Path(spec.base.out_dir or "sweep_out")
    rows = run_sweep(spec, out, jobs=args.jobs)
    _print_rows(rows, SWEEP_COLUMNS, ",")
    return 0


def _report_run(path: Path, figs: Path, delim: str) -> None:
    metrics = read_metrics(path / "metrics.csv")
    summary = json.loads((path / "summary.json").read_text()) if (path / "summary.json").exists() else {}
    if metrics:
        totals = bandwidth_report(metrics, summary.get("num_params", 0) or 1, summary.get("num_clients", 1))
        if not summary.get("num_params"):
            totals.pop("dense_uplink_bytes")
            totals.pop("uplink_ratio_vs_dense")
    else:
        totals = {}
    row = {k: summary.get(k) for k in ("model", "attack", "intensity", "kappa", "seed", "final_accuracy",
                                       "diverged", "retention_mean", "retention_std")}
    row.update(totals)
    _print_rows([row], list(row), delim)
    plotting.accuracy_curve(metrics, figs / "accuracy.png",
                            title=f"{summary.get('model', '')} / {summary.get('attack', '')}")
    layers = load_heatmap(path)
    if layers:
        plotting.retention_heatmaps(layers, figs / "retention_heatmap.png")


def _report_sweep(path: Path, figs: Path, delim: str) -> None:
    rows = read_table(path / "sweep.csv")
    _print_rows(rows, SWEEP_COLUMNS, delim)
    plotting.sweep_bars(rows, figs / "sweep_bars.png")
    ok = [r for r in rows if r.get("status") == "ok" and r.get("uplink_bytes")]
    labels = [f"{r['model']} {r['attack']} k={r['kappa'] or 'dense'} s{r['seed']}" for r in ok]
    if ok:
        plotting.bandwidth_bars(labels, [float(r["uplink_bytes"]) for r in ok], figs / "bandwidth.png")


def cmd_report(args) -> int:
    path = args.path
    figs = args.figures or path / "figures"
    if (path / "sweep.csv").exists():
        _report_sweep(path, figs, args.delimiter)
    elif (path / "metrics.csv").exists():
        _report_run(path, figs, args.delimiter)
    else:
        raise ConfigError(f"{path} holds neither sweep.csv nor metrics.csv")
    log.info("figures written to %s", figs)
    return 0


def cmd_prepare(args) -> int:
    root = prepare_digits_idx(data_root(args.root))
    print(root)
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "report": cmd_report, "prepare-data": cmd_prepare}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"flsnn: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
