"""Experiment drivers: metrics export, collapse statistics, early stopping, ablation grids."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .data import DataSpec, make_dataset
from .derive import train_from_scratch
from .errors import InvalidArgumentError
from .latmodel import LatencyTable, build_lut_synthetic
from .metrics import EpochRecord, MetricsLog, base_columns
from .relax import count_depth_redundancy
from .space import CandidateOpSpec, StageSpec, SupernetConfig

# ------------------------------------------------------------------- metrics


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_rows(log: MetricsLog) -> List[List[str]]:
    rows = []
    for r in log:
        rows.append([_fmt(x) for x in
                     [r.epoch, r.tau, r.train_loss, r.val_loss, r.expected_latency_ms,
                      r.derived_latency_ms, *r.depths, *r.argmax, r.elastic, r.infeasible]])
    return rows


def export_metrics(log: MetricsLog, path, columns: Optional[List[str]] = None):
    """Header row, then one row per epoch in column order."""
    columns = columns or log.columns()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        w.writerows(metrics_rows(log))


def save_metrics_json(log: MetricsLog, path):
    recs = []
    for r in log:
        d = {k: getattr(r, k) for k in ("epoch", "tau", "train_loss", "val_loss",
                                        "expected_latency_ms", "derived_latency_ms",
                                        "depths", "argmax", "elastic", "infeasible")}
        d["alpha"] = None if r.alpha is None else np.asarray(r.alpha).tolist()
        recs.append(d)
    Path(path).write_text(json.dumps({"warmup_epochs": log.warmup_epochs, "records": recs}))


def load_metrics_json(path) -> MetricsLog:
    data = json.loads(Path(path).read_text())
    log = MetricsLog(data.get("warmup_epochs", 0))
    for d in data["records"]:
        alpha = d.pop("alpha", None)
        log.append(EpochRecord(**d, alpha=None if alpha is None else np.asarray(alpha)))
    return log


# ------------------------------------------------------------ collapse stats


@dataclass
class CollapseStats:
    counts: np.ndarray
    max_share: float

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def collapse_stats(log: MetricsLog, layer: int, op_count: Optional[int] = None) -> CollapseStats:
    """Histogram of the layer's argmax op over post-warmup epochs."""
    recs = log.post_warmup
    if not recs:
        raise InvalidArgumentError("log has no post-warmup epochs")
    n_layers = len(recs[0].argmax)
    if not 0 <= layer < n_layers:
        raise IndexError(f"layer {layer} outside [0, {n_layers})")
    picks = [r.argmax[layer] for r in recs]
    n = op_count or (max(picks) + 1)
    counts = np.bincount(picks, minlength=n)
    return CollapseStats(counts, float(counts.max() / counts.sum()))


def ranking_stability_stop(history: Sequence, fraction: float = 0.75,
                           window: int = 5) -> Optional[int]:
    """First epoch at which enough layers kept the same alpha ranking for ``window`` epochs."""
    if not 0 < fraction <= 1:
        raise InvalidArgumentError(f"fraction must lie in (0, 1], got {fraction}")
    if window < 1 or len(history) < window:
        raise InvalidArgumentError(f"need window >= 1 and at least {window} epochs of history")
    ranks = [[tuple(np.argsort(-np.asarray(row), kind="stable")) for row in np.atleast_2d(a)]
             for a in history]
    n_layers = len(ranks[0])
    need = fraction * n_layers - 1e-12
    for e in range(window - 1, len(ranks)):
        span = ranks[e - window + 1:e + 1]
        stable = sum(all(s[l] == span[0][l] for s in span) for l in range(n_layers))
        if stable >= need:
            return e
    return None


# --------------------------------------------------------------- ablations

AXES = ("second_path", "depth_space", "objective", "lambda1", "elastic_on_off")


@dataclass
class AblationSpec:
    axis: str
    values: List
    seeds: List[int]
    config: Optional[SupernetConfig] = None
    lut: Optional[LatencyTable] = None
    target_ms: float = 8.0
    lambda1: float = 0.1
    lambda2: float = 0.6
    objective: str = "ours"
    second_path: str = "random"
    depth_space: str = "sink"
    weighting: str = "suffix"
    elastic: bool = True
    epochs: int = 40
    warmup_epochs: int = 10
    eval_epochs: int = 30
    data: Optional[DataSpec] = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise InvalidArgumentError(f"unknown ablation axis {self.axis!r}")
        if len(self.values) < 2 and len(self.seeds) < 2:
            raise InvalidArgumentError("need at least two values or two seeds")

    def settings(self, value) -> Dict:
        s = {"objective": self.objective, "lambda1": self.lambda1,
             "second_path": self.second_path, "depth_space": self.depth_space,
             "elastic": self.elastic}
        if self.axis == "second_path":
            s["second_path"] = str(value).replace("-", "_")
        elif self.axis == "depth_space":
            s["depth_space"] = str(value).replace("-", "_")
        elif self.axis == "objective":
            s["objective"] = str(value)
        elif self.axis == "lambda1":
            s["lambda1"] = float(value)
        else:
            s["elastic"] = value in (True, "on", "true", "1", 1)
        return s


RESULT_COLUMNS = ["axis", "value", "seed", "status", "objective", "lambda1", "second_path",
                  "depth_space", "elastic", "target_ms", "derived_latency_ms", "latency_dev",
                  "accuracy_proxy", "depth_redundancy", "depths"]


def depth_redundancy(config: SupernetConfig, depth_mode: str) -> int:
    """Decision combinations that collapse onto an already-counted architecture."""
    n = len(config.ops)
    total = 0
    for s in config.searchable_stages:
        distinct, raw = count_depth_redundancy(depth_mode, s.max_layers, n)
        total += raw - distinct
    return total


def _run_row(spec: AblationSpec, value, seed: int) -> Dict:
    from .optimizer import LatencyObjective, Schedule, SearchFlags, run_search

    s = spec.settings(value)
    config = spec.config or SupernetConfig.default()
    lut = spec.lut or build_lut_synthetic(config)
    row = {"axis": spec.axis, "value": str(value), "seed": seed, "status": "ok",
           "target_ms": spec.target_ms, **s}
    t0 = time.perf_counter()
    try:
        obj = LatencyObjective(s["objective"], s["lambda1"],
                               spec.target_ms if s["objective"] == "ours" else None,
                               spec.lambda2 if s["objective"] == "c1" else None)
        flags = SearchFlags(s["second_path"], s["depth_space"], spec.weighting, s["elastic"],
                            target_ms=spec.target_ms)
        sched = Schedule(epochs=spec.epochs, warmup_epochs=spec.warmup_epochs)
        dspec = spec.data or DataSpec(class_count=config.class_count, dim=config.input_dim)
        data = make_dataset(dspec)
        arch, log, _ = run_search(config, lut, obj, sched, flags, seed, data)
        rep = train_from_scratch(arch, data, spec.eval_epochs, seed, lut)
        lat = log[-1].derived_latency_ms
        row.update(derived_latency_ms=lat, latency_dev=lat / spec.target_ms - 1.0,
                   accuracy_proxy=rep.val_accuracy,
                   depth_redundancy=depth_redundancy(config, s["depth_space"]),
                   depths="-".join(map(str, arch.depths)))
    except Exception as e:  # a failed row is recorded, the grid continues
        row["status"] = f"error: {type(e).__name__}: {e}"
    row["wall_s"] = time.perf_counter() - t0
    return row


def run_ablation(spec: AblationSpec, out_dir, jobs: int = 1) -> List[Dict]:
    """Every value x seed, end to end.

    ``results.csv`` holds only deterministic columns so identical specs give
    identical files; wall times go to ``timings.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = [(v, s) for v in spec.values for s in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            rows = list(ex.map(_run_row, [spec] * len(grid), *zip(*grid)))
    else:
        rows = [_run_row(spec, v, s) for v, s in grid]
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, RESULT_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in r.items()})
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "seed", "wall_s"])
        for r in rows:
            w.writerow([r["value"], r["seed"], f"{r['wall_s']:.3f}"])
    return rows


# --------------------------------------------------------- collapse rig


def rigged_config(n_ops: int = 4, channels: int = 6) -> SupernetConfig:
    """One searchable layer of equally sized ops; only the latency table tells them apart."""
    ops = [CandidateOpSpec(f"op{i}", 3 + 2 * (i % 2), 2.0, (2.0, 2.0)) for i in range(n_ops)]
    stage = StageSpec(1, channels, channels, 1, 1, "relu", True, 1.0)
    return SupernetConfig([stage], ops, class_count=4, input_dim=8, seed=0)


@dataclass
class CollapseResult:
    second_path: str
    seed: int
    stats: CollapseStats
    log: MetricsLog = field(repr=False)


def collapse_run(second_path: str, seed: int, epochs: int = 30, warmup: int = 2,
                 pretrain_steps: int = 150, n_ops: int = 4, n_samples: int = 3000,
                 out_scale: float = 12.0, lr_w: float = 0.005) -> CollapseResult:
    """Search a single rigged layer and report how often each op was the argmax.

    Op 0 is trained alone for ``pretrain_steps`` before the search, so it
    starts with the loss advantage.  Every op's output projection is scaled
    by ``out_scale`` first: an op that has not been trained then hurts the
    loss, which is what lets an op that is never sampled stay behind.
    """
    from . import gradcore as gc
    from .optimizer import (SGD, LatencyObjective, Schedule, SearchFlags, network_forward,
                            prepare_run, run_epoch)
    from .relax import LayerChoice

    config = rigged_config(n_ops)
    lut = build_lut_synthetic(config)
    data = make_dataset(DataSpec(n_samples=n_samples, class_count=4, dim=8,
                                 clusters_per_class=2, spread=1.2, seed=100 + seed))
    obj = LatencyObjective("c2", 0.0)
    sched = Schedule(epochs=epochs, warmup_epochs=warmup, tau_mode="linear", batch_size=32,
                     lr_w0=lr_w)
    flags = SearchFlags(second_path=second_path, elastic=False)
    run = prepare_run(config, lut, obj, sched, flags, seed, data)
    for block in run.net.blocks[0]:
        block.W2.value = block.W2.value * out_scale
    sgd = SGD(run.net.weight_parameters(), 0.9, 0.0)
    rng = np.random.default_rng(seed)
    X, y = data.X[run.train_idx], data.y[run.train_idx]
    for _ in range(pretrain_steps):
        b = rng.integers(len(y), size=32)
        logits, _ = network_forward(run.net, X[b], [LayerChoice.fixed(0)])
        sgd.step(gc.backward(gc.cross_entropy_smoothed(logits, y[b])), 0.05)
    while run.epoch < sched.epochs:
        run_epoch(run)
    return CollapseResult(second_path, seed, collapse_stats(run.metrics, 0, n_ops), run.metrics)
