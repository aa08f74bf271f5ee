"""Latency objectives, update rules, schedules, and the alternating search loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import gradcore as gc
from .data import DataSpec, Dataset, make_dataset, split_indices, stratified_split
from .derive import derive_architecture
from .elastic import elasticity_scale
from .errors import (ConfigError, DataError, DomainError, MissingEntryError, SequencingError)
from .latmodel import LatencyTable, arch_latency, op_latency_matrix
from .metrics import EpochRecord, MetricsLog
from .relax import (DEPTH_MODES, SECOND_PATH_MODES, LayerChoice, PathPair, derived_depth,
                    depth_weights, gate_logits, gumbel_weights, layer_logits, relaxed_latency,
                    sample_gumbel, sample_path_pair, skip_eligible, stage_forward)
from .space import Supernet, SupernetConfig, build_supernet

# --------------------------------------------------------------- objectives


@dataclass(frozen=True)
class LatencyObjective:
    kind: str = "ours"
    lambda1: float = 0.1
    target_ms: Optional[float] = None
    lambda2: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("ours", "c1", "c2"):
            raise ConfigError(f"unknown objective {self.kind!r}")
        if self.lambda1 < 0:
            raise ConfigError("lambda1 must be non-negative")
        if self.kind == "ours" and not (self.target_ms and self.target_ms > 0):
            raise ConfigError("objective 'ours' needs a positive target_ms")
        if self.kind == "c1" and self.lambda2 is None:
            raise ConfigError("objective 'c1' needs lambda2")


def latency_penalty(lat, obj: LatencyObjective) -> gc.Node:
    """ours: l1 * max(lat/target - 1, 0); c1: l1 * l2 * log(lat); c2: l1 * lat."""
    lat = lat if isinstance(lat, gc.Node) else gc.constant(lat)
    if obj.kind == "ours":
        return gc.scale(gc.relu(gc.sub(gc.scale(lat, 1.0 / obj.target_ms), 1.0)), obj.lambda1)
    if obj.kind == "c1":
        if np.any(lat.value <= 0):
            raise DomainError("log latency objective needs a positive latency")
        return gc.scale(gc.log(lat), obj.lambda1 * obj.lambda2)
    return gc.scale(lat, obj.lambda1)


# ---------------------------------------------------------------- schedules


@dataclass(frozen=True)
class Schedule:
    epochs: int = 40
    warmup_epochs: int = 10
    tau0: float = 5.0
    tau_decay: float = 0.96
    tau_mode: str = "geometric"
    tau_final: float = 0.2
    lr_w0: float = 0.025
    momentum: float = 0.9
    wd_w: float = 1e-5
    lr_arch: float = 0.01
    arch_betas: Tuple[float, float] = (0.5, 0.999)
    wd_arch: float = 5e-4
    batch_size: int = 32

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("need 0 <= warmup_epochs < epochs")
        if not self.tau0 > 0 or not 0 < self.tau_decay <= 1:
            raise ConfigError("need tau0 > 0 and 0 < tau_decay <= 1")
        if self.tau_mode not in ("geometric", "linear"):
            raise ConfigError(f"unknown temperature mode {self.tau_mode!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


def temperature_at(schedule: Schedule, epoch: int) -> float:
    if not 0 <= epoch < schedule.epochs:
        raise ConfigError(f"epoch {epoch} outside the schedule")
    if schedule.tau_mode == "linear":
        if schedule.epochs == 1:
            return schedule.tau0
        frac = epoch / (schedule.epochs - 1)
        return schedule.tau0 + (schedule.tau_final - schedule.tau0) * frac
    k = max(0, epoch - schedule.warmup_epochs)
    return schedule.tau0 * schedule.tau_decay ** k


def cosine_lr(lr0: float, step: int, total: int) -> float:
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * min(step, total) / total))


# ------------------------------------------------------------- update rules


class SGD:
    """Heavy-ball momentum with coupled weight decay: v = mu v + g + wd w; w -= lr v."""

    def __init__(self, params: Sequence[gc.Node], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self._by_id = {p.id: p for p in self.params}
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf: Dict[int, np.ndarray] = {}

    def step(self, grads: gc.GradientMap, lr: float):
        for pid, g in grads.items():
            p = self._by_id.get(pid)
            if p is None:
                continue
            d = g + self.weight_decay * p.value
            v = self.buf.get(p.id)
            v = d if v is None else self.momentum * v + d
            self.buf[p.id] = v
            p.value = p.value - lr * v


class Adam:
    """Adaptive moments with L2 decay folded into the gradient."""

    def __init__(self, params: Sequence[gc.Node], lr: float = 0.01,
                 betas: Tuple[float, float] = (0.5, 0.999), weight_decay: float = 0.0,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.weight_decay, self.eps = lr, betas, weight_decay, eps
        self.m: Dict[int, np.ndarray] = {}
        self.v: Dict[int, np.ndarray] = {}
        self.t: Dict[int, int] = {}

    def step(self, grads: gc.GradientMap):
        b1, b2 = self.betas
        for p in self.params:
            g = grads.get(p.id)
            if g is None:
                continue
            g = g + self.weight_decay * p.value
            t = self.t.get(p.id, 0) + 1
            m = b1 * self.m.get(p.id, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(p.id, 0.0) + (1 - b2) * g * g
            self.t[p.id], self.m[p.id], self.v[p.id] = t, m, v
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.value = p.value - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ----------------------------------------------------------- forward passes


def network_forward(net: Supernet, X, choices: Sequence[LayerChoice], depth_mode: str = "sink",
                    gates: Optional[Sequence] = None, latency_rows: Optional[Sequence] = None,
                    weighting: str = "suffix") -> Tuple[gc.Node, List[gc.Node]]:
    """Logits of the whole network for one selection, plus latency terms if requested."""
    h = net.stem_forward(X)
    fixed = {s.index: b for s, b in net.fixed_blocks}
    lat_terms: List[gc.Node] = []
    sp = 0
    for stage in net.config.stages:
        if not stage.searchable:
            h = fixed[stage.index].forward(h, stage.activation)
            continue
        ids = net.stage_layers[sp]
        h, terms = stage_forward(
            net, sp, h, [choices[l] for l in ids], net.beta[sp], depth_mode,
            gates=[gates[l] for l in ids] if gates is not None else None,
            latency_rows=[latency_rows[l] for l in ids] if latency_rows is not None else None,
            weighting=weighting)
        lat_terms += terms
        sp += 1
    return net.head_forward(h), lat_terms


def _gate_pair(draw, mode: str):
    if draw is None:
        return None
    choice = LayerChoice.soft(draw) if mode == "soft" else LayerChoice.hard(draw)
    return choice, gc.take(draw.soft, 0)


def relaxed_loss(net: Supernet, X, y, noises: Sequence[np.ndarray], tau: float,
                 lat_matrix: np.ndarray, objective: Optional[LatencyObjective],
                 fixed_cost_ms: float, relax_mode: str = "hard", depth_mode: str = "sink",
                 weighting: str = "suffix", gate_noises: Optional[Sequence] = None,
                 label_smoothing: float = 0.0):
    """Task loss plus latency penalty for fixed Gumbel noise.

    ``relax_mode='hard'`` runs only the argmax op per layer with straight-through
    gradients; ``'soft'`` mixes every op by its Gumbel weights, which makes
    the loss smooth in all parameters.
    Returns ``(total, task_loss, latency)`` nodes.
    """
    draws, gates = [], []
    for l in range(len(net.layers)):
        draws.append(gumbel_weights(layer_logits(net, l, depth_mode), noises[l], tau))
        g = None
        if depth_mode == "skip_out" and skip_eligible(net, l):
            g = gumbel_weights(gate_logits(net, l), gate_noises[l], tau)
        gates.append(_gate_pair(g, relax_mode))
    make = LayerChoice.soft if relax_mode == "soft" else LayerChoice.hard
    choices = [make(d) for d in draws]
    rows = [(d.soft, lat_matrix[l]) for l, d in enumerate(draws)]
    logits, terms = network_forward(net, X, choices, depth_mode, gates, rows, weighting)
    task = gc.cross_entropy_smoothed(logits, y, label_smoothing)
    lat = gc.constant(fixed_cost_ms)
    for t in terms:
        lat = gc.add(lat, t)
    total = task
    if objective is not None and objective.lambda1 != 0:
        total = gc.add(task, latency_penalty(lat, objective))
    return total, task, lat


def draw_noises(net: Supernet, rng, depth_mode: str = "sink"):
    noises, gate_noises = [], []
    for l in range(len(net.layers)):
        noises.append(sample_gumbel(layer_logits(net, l, depth_mode).shape[0], rng))
        gate_noises.append(sample_gumbel(2, rng)
                           if depth_mode == "skip_out" and skip_eligible(net, l) else None)
    return noises, gate_noises


def expected_latency_now(net: Supernet, lut: LatencyTable, depth_mode: str = "sink",
                         weighting: str = "suffix") -> float:
    """Noise-free relaxed latency: op weights softmax(alpha), depth weights softmax(beta)."""
    u = [gc.softmax(layer_logits(net, l, depth_mode)) for l in range(len(net.layers))]
    probs = None
    if depth_mode == "skip_out":
        probs = [gc.take(gc.softmax(gate_logits(net, l)), 0) if skip_eligible(net, l) else None
                 for l in range(len(net.layers))]
    return relaxed_latency(net, u, op_latency_matrix(net, lut), depth_mode, weighting, probs,
                           lut.fixed_cost_ms).item()


# -------------------------------------------------------------- search run


@dataclass
class SearchFlags:
    second_path: str = "random"
    depth_mode: str = "sink"
    weighting: str = "suffix"
    elastic: bool = True
    target_ms: Optional[float] = None  # elasticity target when the objective has none

    def __post_init__(self):
        if self.second_path not in SECOND_PATH_MODES:
            raise ConfigError(f"unknown second-path mode {self.second_path!r}")
        if self.depth_mode not in DEPTH_MODES:
            raise ConfigError(f"unknown depth space {self.depth_mode!r}")
        if self.weighting not in ("direct", "suffix"):
            raise ConfigError(f"unknown latency weighting {self.weighting!r}")


@dataclass
class SearchRun:
    net: Supernet
    lut: LatencyTable
    objective: LatencyObjective
    schedule: Schedule
    flags: SearchFlags
    data: Dataset
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int = 0
    epoch: int = 0
    metrics: MetricsLog = None
    rng: np.random.Generator = None
    weight_step: int = 0
    sgd: SGD = None
    adam: Adam = None
    lat_matrix: np.ndarray = None

    def __post_init__(self):
        if set(self.train_idx.tolist()) & set(self.val_idx.tolist()):
            raise DataError("weight and architecture splits overlap")
        s = self.schedule
        self.rng = self.rng or np.random.default_rng(self.seed)
        self.metrics = self.metrics or MetricsLog(s.warmup_epochs)
        self.sgd = SGD(self.net.weight_parameters(), s.momentum, s.wd_w)
        self.adam = Adam(self.net.arch_parameters(), s.lr_arch, s.arch_betas, s.wd_arch)
        self.refresh_latencies()

    @property
    def target_ms(self) -> Optional[float]:
        return self.objective.target_ms if self.objective.target_ms else self.flags.target_ms

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_idx) / self.schedule.batch_size)

    @property
    def tau(self) -> float:
        return temperature_at(self.schedule, min(self.epoch, self.schedule.epochs - 1))

    def refresh_latencies(self):
        self.lat_matrix = op_latency_matrix(self.net, self.lut)

    def batches(self, idx: np.ndarray):
        order = self.rng.permutation(idx)
        bs = self.schedule.batch_size
        return [order[i:i + bs] for i in range(0, len(order), bs)]


def _path_choices(pair: PathPair, secondary: bool):
    if not secondary:
        choices = [LayerChoice.hard(d) for d in pair.primary]
        gates = [_gate_pair(g, "hard") for g in pair.gates]
    else:
        choices = [LayerChoice.fixed(k) for k in pair.secondary]
        gates = [None if k is None else (LayerChoice.fixed(k), None)
                 for k in pair.secondary_gates]
    return choices, gates


def step_weights(run: SearchRun, batch) -> float:
    """One weight update on the summed losses of a Gumbel path and a second path."""
    X, y = batch
    if len(y) == 0:
        raise DataError("empty batch")
    net, f = run.net, run.flags
    pair = sample_path_pair(net, run.tau, f.second_path, run.rng, f.depth_mode)
    choices, gates = _path_choices(pair, secondary=False)
    logits, _ = network_forward(net, X, choices, f.depth_mode, gates)
    total = gc.cross_entropy_smoothed(logits, y)
    if f.second_path != "none":
        choices, gates = _path_choices(pair, secondary=True)
        logits, _ = network_forward(net, X, choices, f.depth_mode, gates)
        total = gc.add(total, gc.cross_entropy_smoothed(logits, y))
    grads = gc.backward(total)
    total_steps = run.schedule.epochs * run.steps_per_epoch
    run.sgd.step(grads, cosine_lr(run.schedule.lr_w0, run.weight_step, total_steps))
    run.weight_step += 1
    return total.item()


def step_arch(run: SearchRun, batch) -> Tuple[float, float]:
    """One update of alpha/beta on validation loss plus latency penalty."""
    if run.epoch < run.schedule.warmup_epochs:
        raise SequencingError(f"architecture step at warmup epoch {run.epoch}")
    X, y = batch
    if len(y) == 0:
        raise DataError("empty batch")
    total, _, lat = _arch_graph(run, X, y)
    grads = gc.backward(total)
    run.adam.step(grads)
    return total.item(), lat.item()


def _arch_graph(run: SearchRun, X, y):
    f = run.flags
    noises, gate_noises = draw_noises(run.net, run.rng, f.depth_mode)
    return relaxed_loss(run.net, X, y, noises, run.tau, run.lat_matrix, run.objective,
                        run.lut.fixed_cost_ms, "hard", f.depth_mode, f.weighting, gate_noises)


def run_epoch(run: SearchRun) -> EpochRecord:
    s, f, net = run.schedule, run.flags, run.net
    e = run.epoch
    tau = run.tau
    X, y = run.data.X, run.data.y
    train = [step_weights(run, (X[b], y[b])) for b in run.batches(run.train_idx)]
    if e >= s.warmup_epochs:
        val = [step_arch(run, (X[b], y[b]))[0] for b in run.batches(run.val_idx)]
    else:
        val = [_arch_graph(run, X[b], y[b])[0].item() for b in run.batches(run.val_idx)]
    applied = infeasible = False
    if f.elastic and e >= s.warmup_epochs:
        if run.target_ms is None:
            raise ConfigError("elasticity-scaling needs a latency target")
        plan = elasticity_scale(net, run.target_ms, run.lut, depth_mode=f.depth_mode)
        applied, infeasible = True, plan.infeasible
        run.refresh_latencies()
    arch = derive_architecture(net, depth_mode=f.depth_mode)
    rec = EpochRecord(
        epoch=e, tau=tau, train_loss=float(np.mean(train)), val_loss=float(np.mean(val)),
        expected_latency_ms=expected_latency_now(net, run.lut, f.depth_mode, f.weighting),
        derived_latency_ms=arch_latency(arch, run.lut), depths=arch.depths,
        argmax=[int(np.argmax(a.value)) for a in net.alpha], elastic=applied,
        infeasible=infeasible, alpha=net.alpha_matrix.copy())
    run.metrics.append(rec)
    run.epoch += 1
    return rec


def prepare_run(config: SupernetConfig, lut: LatencyTable, objective: LatencyObjective,
                schedule: Optional[Schedule] = None, flags: Optional[SearchFlags] = None,
                seed: int = 0, data: Optional[Dataset] = None) -> SearchRun:
    """Supernet, data split, and optimizers for a search with the given seed."""
    schedule = schedule or Schedule()
    flags = flags or SearchFlags()
    if data is None:
        data = make_dataset(DataSpec(class_count=config.class_count, dim=config.input_dim))
    pool = stratified_split(data.y, [0.8, 0.1, 0.1], data.spec.seed)[0]
    a, b = split_indices(data.y[pool], 0.8, seed)
    net = build_supernet(config, seed)
    _check_lut(net, lut)
    return SearchRun(net, lut, objective, schedule, flags, data, pool[a], pool[b], seed)


def _check_lut(net: Supernet, lut: LatencyTable):
    for l in range(len(net.layers)):
        for i in range(net.op_count):
            sig = net.signature(l, i)
            if sig not in lut:
                raise MissingEntryError(f"latency table has no entry for {sig!r}")


def run_search(config: SupernetConfig, lut: LatencyTable, objective: LatencyObjective,
               schedule: Optional[Schedule] = None, flags: Optional[SearchFlags] = None,
               seed: int = 0, data: Optional[Dataset] = None, run_dir=None):
    """Full alternating search; returns ``(derived architecture, metrics, run)``."""
    run = prepare_run(config, lut, objective, schedule, flags, seed, data)
    try:
        while run.epoch < run.schedule.epochs:
            run_epoch(run)
    except MissingEntryError:
        if run_dir is not None:
            save_state(run, run_dir, name="state_dump.json")
        raise
    arch = derive_architecture(run.net, depth_mode=run.flags.depth_mode,
                               provenance={"seed": seed, "epoch": run.epoch - 1})
    if run_dir is not None:
        save_state(run, run_dir)
    return arch, run.metrics, run


# ------------------------------------------------------------- persistence


def save_state(run: SearchRun, run_dir, name: str = "state.json"):
    d = Path(run_dir)
    d.mkdir(parents=True, exist_ok=True)
    net = run.net
    state = {"config": net.config.to_dict(), "seed": run.seed, "epoch": run.epoch,
             "flags": asdict(run.flags), "schedule": asdict(run.schedule),
             "objective": asdict(run.objective),
             "alpha": net.alpha_matrix.tolist(), "beta": [b.value.tolist() for b in net.beta],
             "skip_alpha": net.skip_alpha.value.tolist(),
             "skip_gate": net.skip_gate.value.tolist(), "widths": net.active_widths()}
    (d / name).write_text(json.dumps(state, indent=1) + "\n")
    from .harness import export_metrics, save_metrics_json
    export_metrics(run.metrics, d / "metrics.csv")
    save_metrics_json(run.metrics, d / "metrics.json")


def load_state(run_dir, name: str = "state.json"):
    """Rebuild a supernet carrying a saved run's alpha, beta and widths."""
    from .errors import ParseError
    path = Path(run_dir) / name
    try:
        state = json.loads(path.read_text())
    except FileNotFoundError:
        raise ParseError(f"{path}: no saved search state") from None
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno}: {e.msg}") from None
    for key in ("config", "alpha", "beta", "widths", "flags"):
        if key not in state:
            raise ParseError(f"{path}: missing key {key!r}")
    net = build_supernet(SupernetConfig.from_dict(state["config"]), state.get("seed", 0))
    net.set_alpha(state["alpha"])
    for node, b in zip(net.beta, state["beta"]):
        node.value = np.asarray(b, dtype=np.float64)
    net.skip_alpha.value = np.asarray(state.get("skip_alpha", net.skip_alpha.value), float)
    net.skip_gate.value = np.asarray(state.get("skip_gate", net.skip_gate.value), float)
    net.set_active_widths(state["widths"])
    return net, SearchFlags(**state["flags"]), state
