"""Experiment configuration, single runs, sweeps and metric exports."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from . import attacks as atk
from .compression import (CompressionConfig, dense_payload_bytes, retained_count,
                          sparse_payload_bytes)
from .data_io import (Dataset, data_root, load_idx_dir, partition_iid, prepare_digits_idx,
                      synth_blobs, train_test_split)
from .fl_engine import (ClientRecord, Federation, ModelSpec, RoundReport, ServerState,
                        accuracy_loss, evaluate)
from .nn_models import LifParams, MlpTopology, OptimizerState, init_params

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "train_loss", "test_acc", "uplink_bytes", "downlink_bytes",
               "max_update_norm", "mean_update_norm")

# learning rate, weight decay, momentum per model kind
OPTIMIZER_DEFAULTS = {
    "snn": dict(lr=0.1, weight_decay=1e-4, momentum=0.95),
    "ann": dict(lr=1e-4, weight_decay=5e-4, momentum=0.9),
}


class ConfigError(ValueError):
    pass


@dataclass
class LifConfig:
    beta: float = 0.99
    u_thr: float = 1.0
    timesteps: int = 25
    surrogate_slope: float = 25.0
    encoding: str = "direct"


@dataclass
class OptimizerConfig:
    lr: Optional[float] = None
    weight_decay: Optional[float] = None
    momentum: Optional[float] = None


@dataclass
class DataConfig:
    source: str = "blobs"             # blobs | idx | digits
    root: Optional[str] = None        # idx/digits directory; falls back to $FLSNN_DATA_ROOT
    num_classes: int = 10
    dim: int = 16
    n_per_class: int = 100
    spread: float = 0.05
    separation: float = 1.0
    test_fraction: float = 0.2
    seed: int = 0


@dataclass
class AttackConfig:
    kind: str = "none"
    malicious_fraction: float = 0.25
    sigma: float = 0.1
    epsilon: float = 1.0
    perturbation: str = "unit-negative-mean"
    tau: float = 1e-5

    def spec(self) -> atk.AttackSpec:
        frac = 0.0 if self.kind == "none" else self.malicious_fraction
        return atk.AttackSpec(self.kind, frac, self.sigma, self.epsilon, self.perturbation, self.tau)


@dataclass
class ExperimentConfig:
    model: str = "snn"
    hidden: List[int] = field(default_factory=lambda: [64])
    lif: LifConfig = field(default_factory=LifConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    num_clients: int = 20
    rounds: int = 2000
    batch_size: int = 32
    attack: AttackConfig = field(default_factory=AttackConfig)
    kappa: Optional[float] = None
    seed: int = 0
    eval_every: int = 50
    final_window: int = 5
    workers: int = 1
    out_dir: Optional[str] = None

    def validate(self) -> "ExperimentConfig":
        if self.model not in ("snn", "ann"):
            raise ConfigError(f"model must be snn or ann, got {self.model!r}")
        if self.rounds < 0 or self.num_clients < 1 or self.batch_size < 1:
            raise ConfigError("rounds >= 0, num_clients >= 1 and batch_size >= 1 required")
        if self.eval_every < 1 or self.final_window < 1:
            raise ConfigError("eval_every and final_window must be positive")
        try:
            spec = self.attack.spec()
            spec.num_byzantine(self.num_clients)
            if self.kappa is not None:
                CompressionConfig(self.kappa)
            if self.model == "snn":
                self.lif_params()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.lif.encoding not in ("direct", "poisson"):
            raise ConfigError(f"unknown encoding {self.lif.encoding!r}")
        if self.data.source not in ("blobs", "idx", "digits"):
            raise ConfigError(f"unknown data source {self.data.source!r}")
        return self

    def lif_params(self) -> LifParams:
        return LifParams(self.lif.beta, self.lif.u_thr, self.lif.timesteps, self.lif.surrogate_slope)

    def optimizer_settings(self) -> Dict[str, float]:
        out = dict(OPTIMIZER_DEFAULTS[self.model])
        for k, v in asdict(self.optimizer).items():
            if v is not None:
                out[k] = v
        return out

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentConfig":
        return _build(cls, raw or {})

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw)

    def with_overrides(self, overrides: Dict[str, Any]) -> "ExperimentConfig":
        """Apply dotted-key overrides such as ``{"attack.sigma": 0.05}``."""
        raw = self.to_dict()
        for key, value in overrides.items():
            node = raw
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config section in {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(raw)


def _build(cls, raw: Dict[str, Any]):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in raw.items():
        default = getattr(defaults, name)
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"{name} must be a mapping")
            kwargs[name] = _build(type(default), value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# Building a federation
# ---------------------------------------------------------------------------

def load_datasets(cfg: DataConfig) -> Tuple[Dataset, Dataset]:
    if cfg.source == "blobs":
        ds = synth_blobs(cfg.num_classes, cfg.dim, cfg.n_per_class, cfg.spread, cfg.seed,
                         cfg.separation)
        return train_test_split(ds, cfg.test_fraction, cfg.seed)
    root = data_root(cfg.root)
    if cfg.source == "digits" and not (root / "train-images-idx3-ubyte").exists():
        prepare_digits_idx(root)
    return load_idx_dir(root, cfg.num_classes)


def build_federation(cfg: ExperimentConfig, datasets: Optional[Tuple[Dataset, Dataset]] = None) -> Federation:
    cfg.validate()
    train, test = datasets or load_datasets(cfg.data)
    topo = MlpTopology((train.dim, *cfg.hidden, train.num_classes), cfg.model)
    params = init_params(topo, np.random.default_rng([cfg.seed, 0x1A17]))
    spec = cfg.attack.spec()
    m = spec.num_byzantine(cfg.num_clients)
    shards = partition_iid(len(train), cfg.num_clients, cfg.seed)
    opt = cfg.optimizer_settings()
    clients = [ClientRecord(c, c < m, shards[c], OptimizerState(**opt))
               for c in range(cfg.num_clients)]
    model = ModelSpec(topo, cfg.lif_params() if cfg.model == "snn" else None, cfg.lif.encoding)
    return Federation(
        server=ServerState(params),
        clients=clients,
        model=model,
        train=train,
        test=test,
        attack=spec,
        compression=CompressionConfig(cfg.kappa) if cfg.kappa is not None else None,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        workers=cfg.workers,
    )


# ---------------------------------------------------------------------------
# Metrics persistence
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def report_row(rep: RoundReport) -> List[str]:
    return [_fmt(v) for v in (rep.round, rep.train_loss, rep.test_acc, rep.uplink_bytes,
                              rep.downlink_bytes, rep.max_update_norm, rep.mean_update_norm)]


def read_metrics(path) -> List[Dict[str, Any]]:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            rows.append({k: (None if v == "" else (int(v) if k in ("round", "uplink_bytes", "downlink_bytes")
                                                    else float(v)))
                         for k, v in raw.items()})
    return rows


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: List[RoundReport]
    summary: Dict[str, Any]
    retention: Optional[np.ndarray] = None
    layout: Optional[Tuple] = None


def _final_accuracy(evals: Sequence[Tuple[int, float]], window: int) -> float:
    accs = [a for _, a in evals[-window:]]
    return float(np.mean(accs)) if accs else math.nan


def run_experiment(cfg: ExperimentConfig, datasets: Optional[Tuple[Dataset, Dataset]] = None,
                   progress: bool = False) -> ExperimentResult:
    """Run ``cfg.rounds`` rounds, evaluating at round 0, every ``eval_every`` and at the end.

    Writes ``metrics.csv`` (incrementally), ``summary.json``, ``config.yaml``
    and, for compressed runs, the retention heatmap when ``cfg.out_dir`` is set.
    """
    fed = build_federation(cfg, datasets)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config.yaml", "w") as cf:
            yaml.safe_dump(cfg.to_dict(), cf, sort_keys=False)
        fh = open(out / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)

    evals: List[Tuple[int, float]] = [(0, evaluate(fed.server.global_params, fed.model, fed.test, seed=cfg.seed))]
    reports: List[RoundReport] = []
    diverged = False
    try:
        for r in range(1, cfg.rounds + 1):
            do_eval = r % cfg.eval_every == 0 or r == cfg.rounds
            rep = fed.run_round(fed.test if do_eval else None)
            if not math.isfinite(rep.train_loss) or not np.all(np.isfinite(fed.server.global_params.values)):
                diverged = True
                rep.test_acc = None
                log.warning("run diverged at round %d (train loss %s)", r, rep.train_loss)
            reports.append(rep)
            if writer is not None:
                writer.writerow(report_row(rep))
                fh.flush()
            if diverged:
                break
            if rep.test_acc is not None:
                evals.append((r, rep.test_acc))
                if progress:
                    log.info("round %d  loss %.4f  acc %.4f", r, rep.train_loss, rep.test_acc)
    finally:
        if fh is not None:
            fh.close()

    d = len(fed.server.global_params)
    summary: Dict[str, Any] = {
        "model": cfg.model,
        "attack": cfg.attack.kind,
        "intensity": cfg.attack.spec().intensity,
        "malicious_fraction": cfg.attack.malicious_fraction if cfg.attack.kind != "none" else 0.0,
        "kappa": cfg.kappa,
        "seed": cfg.seed,
        "num_clients": cfg.num_clients,
        "num_params": d,
        "rounds_completed": len(reports),
        "diverged": diverged,
        "final_accuracy": _final_accuracy(evals, cfg.final_window),
        "evaluations": evals,
    }
    summary.update(bandwidth_report(reports, d, cfg.num_clients) if reports else
                   {"uplink_bytes": 0, "downlink_bytes": 0})
    retention = fed.retention
    if retention is not None and reports:
        freq = retention_frequencies(retention, len(reports), cfg.num_clients)
        summary["retention_mean"] = float(freq.mean())
        summary["retention_std"] = float(freq.std())
        summary["retained_per_update"] = retained_count(cfg.kappa, d)
        if out is not None:
            export_heatmap(retention, fed.server.global_params.layout, len(reports),
                           cfg.num_clients, out)
    if out is not None:
        with open(out / "summary.json", "w") as sf:
            json.dump(summary, sf, indent=2)
    return ExperimentResult(cfg, reports, summary, retention, fed.server.global_params.layout)


# ---------------------------------------------------------------------------
# Bandwidth and retention
# ---------------------------------------------------------------------------

def bandwidth_report(series: Sequence, dim: int, num_clients: int) -> Dict[str, Any]:
    """Totals over a run; ``series`` holds RoundReports or metrics-CSV rows."""
    if not series:
        raise ValueError("empty series")

    def get(rep, key):
        return rep[key] if isinstance(rep, dict) else getattr(rep, key)

    up = int(sum(get(r, "uplink_bytes") for r in series))
    down = int(sum(get(r, "downlink_bytes") for r in series))
    dense_up = len(series) * num_clients * dense_payload_bytes(dim)
    return {
        "rounds": len(series),
        "uplink_bytes": up,
        "downlink_bytes": down,
        "total_bytes": up + down,
        "dense_uplink_bytes": dense_up,
        "uplink_ratio_vs_dense": up / dense_up,
    }


def analytic_uplink(rounds: int, num_clients: int, dim: int, kappa: Optional[float]) -> int:
    if kappa is None:
        return rounds * num_clients * dense_payload_bytes(dim)
    return rounds * num_clients * sparse_payload_bytes(retained_count(kappa, dim))


def retention_frequencies(counters: np.ndarray, rounds: int, num_clients: int) -> np.ndarray:
    return counters.astype(np.float64) / (rounds * num_clients)


def export_heatmap(counters: np.ndarray, layout, rounds: int, num_clients: int, out_dir) -> List[Path]:
    """Write one CSV matrix of retention frequencies per layer (rows x cols)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    freq = retention_frequencies(counters, rounds, num_clients)
    paths = []
    for li, o, r, c in layout:
        path = out_dir / f"retention_layer{li}.csv"
        np.savetxt(path, freq[o:o + r * c].reshape(r, c), delimiter=",", fmt="%.10g")
        paths.append(path)
    np.save(out_dir / "retention_counts.npy", counters)
    return paths


def load_heatmap(out_dir) -> List[np.ndarray]:
    paths = sorted(Path(out_dir).glob("retention_layer*.csv"),
                   key=lambda p: int(p.stem.removeprefix("retention_layer")))
    return [np.loadtxt(p, delimiter=",", ndmin=2) for p in paths]


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ("model", "attack", "intensity", "malicious_fraction", "kappa", "seed",
                 "clean_acc", "attacked_acc", "accuracy_loss", "uplink_bytes", "total_bytes",
                 "diverged", "status")


@dataclass
class SweepSpec:
    base: ExperimentConfig
    deltas: List[Dict[str, Any]] = field(default_factory=list)
    repeats: int = 1

    def configs(self) -> List[ExperimentConfig]:
        out = []
        for delta in self.deltas:
            cfg = self.base.with_overrides(delta)
            for rep in range(self.repeats):
                out.append(cfg.with_overrides({"seed": cfg.seed + rep}).validate())
        return out

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "SweepSpec":
        base = ExperimentConfig.from_dict(raw.get("base", {}))
        deltas = list(raw.get("deltas", []))
        grid = raw.get("grid")
        if grid:
            deltas.extend(expand_grid(grid))
        return cls(base, deltas, int(raw.get("repeats", 1)))

    @classmethod
    def from_file(cls, path) -> "SweepSpec":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})


def expand_grid(grid: Dict[str, Sequence[Any]]) -> List[Dict[str, Any]]:
    """Cartesian product of dotted-key value lists."""
    deltas: List[Dict[str, Any]] = [{}]
    for key, values in grid.items():
        deltas = [{**d, key: v} for d in deltas for v in values]
    return deltas


def _baseline_key(cfg: ExperimentConfig) -> str:
    raw = cfg.to_dict()
    raw["attack"] = asdict(AttackConfig())
    raw["out_dir"] = None
    raw["workers"] = 1
    return json.dumps(raw, sort_keys=True)


def _run_safely(cfg: ExperimentConfig) -> Dict[str, Any]:
    try:
        summary = run_experiment(cfg).summary
        summary["status"] = "ok"
    except Exception as exc:  # sweep keeps going; the row is marked
        log.error("run failed (%s): %s", cfg.out_dir, exc)
        summary = {"status": f"failed: {type(exc).__name__}: {exc}"}
    return summary


def run_sweep(spec: SweepSpec, out_dir=None, jobs: int = 1) -> List[Dict[str, Any]]:
    """Run every config and its clean counterpart; one summary row per config.

    Clean baselines (same config, attack ``none``) are run once and shared
    by every attacked config that differs only in its attack settings.
    """
    configs = spec.configs()
    out = Path(out_dir) if out_dir else None
    baselines: Dict[str, ExperimentConfig] = {}
    for cfg in configs:
        key = _baseline_key(cfg)
        if key not in baselines:
            baselines[key] = cfg.with_overrides({"attack.kind": "none"})
    jobs_list: List[ExperimentConfig] = []
    for i, cfg in enumerate(list(baselines.values()) + configs):
        c = copy.deepcopy(cfg)
        c.workers = 1
        c.out_dir = str(out / f"run{i:03d}") if out else None
        jobs_list.append(c)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            summaries = list(pool.map(_run_safely, jobs_list))
    else:
        summaries = [_run_safely(c) for c in jobs_list]
    by_key = dict(zip(baselines, summaries[:len(baselines)]))

    rows = []
    for cfg, summ in zip(configs, summaries[len(baselines):]):
        base = by_key[_baseline_key(cfg)]
        clean = base.get("final_accuracy", math.nan)
        attacked = summ.get("final_accuracy", math.nan)
        status = summ["status"] if base["status"] == "ok" else f"baseline {base['status']}"
        rows.append({
            "model": cfg.model,
            "attack": cfg.attack.kind,
            "intensity": cfg.attack.spec().intensity,
            "malicious_fraction": cfg.attack.malicious_fraction if cfg.attack.kind != "none" else 0.0,
            "kappa": cfg.kappa,
            "seed": cfg.seed,
            "clean_acc": clean,
            "attacked_acc": attacked,
            "accuracy_loss": accuracy_loss(clean, attacked),
            "uplink_bytes": summ.get("uplink_bytes"),
            "total_bytes": summ.get("total_bytes"),
            "diverged": summ.get("diverged"),
            "status": status,
        })
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_table(rows, out / "sweep.csv")
    return rows


def write_table(rows: Sequence[Dict[str, Any]], path, columns=SWEEP_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_table(path) -> List[Dict[str, Any]]:
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]
