"""Latency lookup tables and latency estimates for discrete and relaxed architectures."""

from __future__ import annotations

import bisect
import json
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import gradcore as gc
from .errors import (BenchError, ConfigError, InvalidShapeError, MissingEntryError,
                     ParseError, RangeError)
from .space import (CandidateOpSpec, OpBlock, StageSpec, SupernetConfig, op_signature,
                    round_half_up, se_width, set_active_width, width_bounds)


@dataclass(frozen=True)
class CostModelSpec:
    """Closed-form per-op latency in ms; stands in for device measurements."""
    c0: float = 0.05
    c1: float = 1e-4
    c2: float = 1e-4
    c_dw: float = 1e-4
    c_se: float = 2e-5

    def __post_init__(self):
        vals = (self.c0, self.c1, self.c2, self.c_dw, self.c_se)
        if any(v < 0 for v in vals) or not any(v > 0 for v in vals):
            raise ConfigError("cost coefficients must be >= 0 with at least one positive")


@dataclass(frozen=True)
class BenchSpec:
    repeats: int = 5
    warmup: int = 1
    batch: int = 32
    reducer: str = "median"

    def __post_init__(self):
        if self.repeats < 5:
            raise ConfigError("repeats must be >= 5")
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        if self.reducer != "median":
            raise ConfigError(f"unsupported reducer {self.reducer!r}")


def kernel_weight(kernel_tag: int) -> float:
    return float(kernel_tag) ** 2


def synthetic_op_cost(model: CostModelSpec, spec: CandidateOpSpec, c_in: int, c_out: int,
                      rf: float, width: int) -> float:
    _, cap = width_bounds(spec, c_in)
    s_max = max(1, round_half_up(spec.se_ratio * cap)) if spec.has_se else 0
    s = se_width(spec.se_ratio, width, s_max)
    return (model.c0 + model.c1 * rf * c_in * width + model.c2 * rf * width * c_out
            + model.c_dw * rf * width * kernel_weight(spec.kernel_tag) + model.c_se * width * s)


class LatencyTable:
    """Per-signature latency curves over integer widths."""

    def __init__(self, entries: Dict[str, Sequence[Tuple[int, float]]], fixed_cost_ms: float,
                 meta: Optional[dict] = None):
        self.entries: Dict[str, List[Tuple[int, float]]] = {}
        self._w: Dict[str, List[int]] = {}
        self._ms: Dict[str, List[float]] = {}
        if not fixed_cost_ms >= 0:
            raise ConfigError("fixed_cost_ms must be non-negative")
        for sig, pts in entries.items():
            pts = [(int(w), float(ms)) for w, ms in pts]
            if not pts:
                raise ConfigError(f"{sig}: empty latency curve")
            ws = [w for w, _ in pts]
            ms = [m for _, m in pts]
            if any(b <= a for a, b in zip(ws, ws[1:])):
                raise ConfigError(f"{sig}: widths must be strictly increasing")
            if any(b < a for a, b in zip(ms, ms[1:])):
                raise ConfigError(f"{sig}: latencies must be non-decreasing in width")
            if any(m <= 0 for m in ms):
                raise ConfigError(f"{sig}: latencies must be positive")
            self.entries[sig] = pts
            self._w[sig] = ws
            self._ms[sig] = ms
        self.fixed_cost_ms = float(fixed_cost_ms)
        self.meta = dict(meta or {})

    def __contains__(self, sig):
        return sig in self.entries

    def __eq__(self, other):
        return (isinstance(other, LatencyTable) and self.entries == other.entries
                and self.fixed_cost_ms == other.fixed_cost_ms and self.meta == other.meta)

    def lookup(self, signature: str, width: int) -> float:
        return lut_lookup(self, signature, width)

    def width_range(self, signature: str) -> Tuple[int, int]:
        ws = self._w[signature]
        return ws[0], ws[-1]


def lut_lookup(table: LatencyTable, signature: str, width) -> float:
    """Latency at ``width``: exact at grid knots, linear in between."""
    try:
        ws = table._w[signature]
    except KeyError:
        raise MissingEntryError(f"no latency entry for signature {signature!r}") from None
    ms = table._ms[signature]
    if not ws[0] <= width <= ws[-1]:
        raise RangeError(f"{signature}: width {width} outside [{ws[0]}, {ws[-1]}]")
    i = bisect.bisect_left(ws, width)
    if ws[i] == width:
        return ms[i]
    w0, w1 = ws[i - 1], ws[i]
    t = (width - w0) / (w1 - w0)
    return ms[i - 1] + t * (ms[i] - ms[i - 1])


def width_grid(floor: int, cap: int, stride: int) -> List[int]:
    if stride < 1:
        raise ConfigError("stride must be >= 1")
    grid = list(range(floor, cap + 1, stride))
    if not grid:
        raise ConfigError(f"empty width grid for [{floor}, {cap}]")
    if grid[-1] != cap:
        grid.append(cap)
    return grid


def default_stride(c_in: int) -> int:
    return max(1, c_in // 8)


def _layer_slots(config: SupernetConfig):
    """One entry per signature over all searchable layers.

    Ops that differ only in expansion interval share a signature, since
    latency depends on the hidden width and not on which op produced it.
    Their width ranges are merged into one curve.
    """
    slots = {}
    for stage in config.searchable_stages:
        for l in range(min(stage.max_layers, 2)):
            c_in, c_out = stage.layer_channels(l)
            for op in config.ops:
                sig = op_signature(op, c_in, c_out, stage.resolution_factor)
                prev = slots.get(sig)
                if prev is None:
                    slots[sig] = (op, c_in, c_out, stage)
                    continue
                if abs(prev[0].se_ratio - op.se_ratio) > 1e-12 and op.has_se:
                    raise ConfigError(f"signature {sig} maps to ops with different SE ratios")
                lo = min(prev[0].expansion_interval[0], op.expansion_interval[0])
                hi = max(prev[0].expansion_interval[1], op.expansion_interval[1])
                init = prev[0].expansion_init
                merged = CandidateOpSpec(prev[0].name, op.kernel_tag, init, (lo, hi),
                                         prev[0].se_ratio * init if op.has_se else 0.0)
                slots[sig] = (merged, c_in, c_out, stage)
    return slots


def _fixed_cost_synthetic(config: SupernetConfig, model: CostModelSpec) -> float:
    first, last = config.stages[0], config.stages[-1]
    cost = model.c0 + model.c1 * first.resolution_factor * config.input_dim * first.channels_in
    for stage in config.stages:
        if not stage.searchable:
            op = stage.fixed_op
            w = round_half_up(op.expansion_init * stage.channels_in)
            cost += synthetic_op_cost(model, op, stage.channels_in, stage.channels_out,
                                      stage.resolution_factor, w)
    for stage in config.searchable_stages:
        if stage.channels_in != stage.channels_out:  # projection shortcut of the first layer
            cost += model.c1 * stage.resolution_factor * stage.channels_in * stage.channels_out
    cost += model.c0 + model.c2 * last.channels_out * config.class_count
    return cost


def build_lut_synthetic(config: SupernetConfig, model: Optional[CostModelSpec] = None,
                        stride: Optional[int] = None) -> LatencyTable:
    model = model or CostModelSpec()
    entries = {}
    for sig, (op, c_in, c_out, stage) in _layer_slots(config).items():
        floor, cap = width_bounds(op, c_in)
        grid = width_grid(floor, cap, stride or default_stride(c_in))
        entries[sig] = [(w, synthetic_op_cost(model, op, c_in, c_out,
                                              stage.resolution_factor, w)) for w in grid]
    meta = {"source": "synthetic", "cost_model": asdict(model),
            "stride": stride, "host": platform.node()}
    return LatencyTable(entries, _fixed_cost_synthetic(config, model), meta)


def monotonize(values: Sequence[float]) -> List[float]:
    return list(np.maximum.accumulate(np.asarray(values, dtype=np.float64)))


def bench_callable(fn: Callable[[], object], bench: BenchSpec,
                   clock: Callable[[], float] = time.perf_counter) -> Tuple[float, List[float]]:
    """Median wall time of ``fn`` in ms after warmup runs, plus the raw samples."""
    for _ in range(bench.warmup):
        fn()
    samples = []
    for _ in range(bench.repeats):
        t0 = clock()
        fn()
        samples.append((clock() - t0) * 1e3)
    if any(s < 0 for s in samples):
        raise BenchError("clock went backwards")
    return statistics.median(samples), samples


def _check_clock():
    info = time.get_clock_info("perf_counter")
    if info.resolution > 1e-6:
        raise BenchError(f"timer resolution {info.resolution}s is coarser than 1us")


_MIN_MS = 1e-6


def build_lut_measured(config: SupernetConfig, bench: Optional[BenchSpec] = None,
                       stride: Optional[int] = None,
                       clock: Callable[[], float] = time.perf_counter) -> LatencyTable:
    """Time every grid point of every op on this host, sequentially."""
    bench = bench or BenchSpec()
    if clock is time.perf_counter:
        _check_clock()
    rng = np.random.default_rng(config.seed)
    entries, raw = {}, {}
    for sig, (op, c_in, c_out, stage) in _layer_slots(config).items():
        floor, cap = width_bounds(op, c_in)
        grid = width_grid(floor, cap, stride or default_stride(c_in))
        block = OpBlock(op, c_in, c_out, rng)
        x = gc.constant(rng.standard_normal((bench.batch, c_in)))
        medians = []
        for w in grid:
            set_active_width(block, w)
            med, _ = bench_callable(lambda: block.forward(x, stage.activation), bench, clock)
            medians.append(max(med, _MIN_MS))
        raw[sig] = medians
        entries[sig] = list(zip(grid, monotonize(medians)))
    fixed = _measure_fixed(config, bench, clock, rng)
    meta = {"source": "measured", "bench": asdict(bench), "stride": stride,
            "host": f"{platform.node()} {platform.processor() or platform.machine()}",
            "raw_ms": raw}
    return LatencyTable(entries, fixed, meta)


def _measure_fixed(config, bench, clock, rng) -> float:
    first, last = config.stages[0], config.stages[-1]
    stem_W = rng.standard_normal((first.channels_in, config.input_dim))
    head_W = rng.standard_normal((config.class_count, last.channels_out))
    fixed = [(s, OpBlock(s.fixed_op, s.channels_in, s.channels_out, rng))
             for s in config.stages if not s.searchable]
    x_in = rng.standard_normal((bench.batch, config.input_dim))
    x_fixed = [gc.constant(rng.standard_normal((bench.batch, s.channels_in))) for s, _ in fixed]
    x_head = rng.standard_normal((bench.batch, last.channels_out))
    proj = [(rng.standard_normal((s.channels_out, s.channels_in)),
             rng.standard_normal((bench.batch, s.channels_in)))
            for s in config.searchable_stages if s.channels_in != s.channels_out]

    def run():
        gc.relu(gc.matvec(stem_W, x_in))
        for (s, b), x in zip(fixed, x_fixed):
            b.forward(x, s.activation)
        for W, x in proj:
            gc.matvec(W, x)
        gc.matvec(head_W, gc.normalize(x_head))

    med, _ = bench_callable(run, bench, clock)
    return max(med, _MIN_MS)


# ----------------------------------------------------------- latency estimates


def latency_coefficients(v, weighting: str = "suffix") -> gc.Node:
    """Per-layer latency weights from a stage's depth distribution ``v``.

    ``suffix``: layer ``l`` runs whenever the chosen depth is ``l`` or deeper,
    so its weight is ``sum_{k >= l} v_k``.  ``direct``: the weight is ``v_l``.
    """
    v = v if isinstance(v, gc.Node) else gc.constant(v)
    if weighting == "direct":
        return v
    if weighting != "suffix":
        raise ConfigError(f"unknown latency weighting {weighting!r}")
    n = v.shape[0]
    upper = np.triu(np.ones((n, n)))
    return gc.matvec(upper, v)


def expected_latency(u_per_layer: Sequence, v_per_stage: Sequence,
                     signatures: Sequence[Sequence[str]], widths: Sequence[Sequence[int]],
                     table: LatencyTable, weighting: str = "suffix") -> gc.Node:
    """Relaxed latency: fixed cost plus depth- and op-weighted LUT latencies.

    Stages consume consecutive layers in order; stage ``s`` owns
    ``len(v_per_stage[s])`` of them.
    """
    if sum(np.asarray(_val(v)).shape[0] for v in v_per_stage) != len(u_per_layer):
        raise InvalidShapeError("depth vectors do not cover the layer list")
    total = gc.constant(table.fixed_cost_ms)
    l = 0
    for v in v_per_stage:
        coef = latency_coefficients(v, weighting)
        layer_lat = []
        for _ in range(coef.shape[0]):
            u = u_per_layer[l]
            lats = np.array([lut_lookup(table, s, w) for s, w in zip(signatures[l], widths[l])])
            if np.asarray(_val(u)).shape != lats.shape:
                raise InvalidShapeError(f"layer {l}: weight row length {np.asarray(_val(u)).shape}"
                                        f" vs {lats.shape[0]} ops")
            layer_lat.append(gc.dot(u, lats))
            l += 1
        total = gc.add(total, gc.dot(coef, gc.stack(layer_lat)))
    return total


def _val(x):
    return x.value if isinstance(x, gc.Node) else x


def op_latency_matrix(net, table: LatencyTable) -> np.ndarray:
    """LUT latency of every (layer, op) at the op's current active width."""
    out = np.empty((len(net.layers), net.op_count))
    for l, row in enumerate(net.blocks):
        for i, b in enumerate(row):
            out[l, i] = lut_lookup(table, net.signature(l, i), b.active_width)
    return out


def arch_latency(arch, table: LatencyTable) -> float:
    """Fixed cost plus the LUT latency of every kept searchable layer."""
    total = table.fixed_cost_ms
    for layer in arch.searchable_layers:
        total += lut_lookup(table, layer.base_signature, layer.width)
    return total


# --------------------------------------------------------------- persistence


def lut_save(table: LatencyTable, path):
    data = {"meta": table.meta, "fixed_cost_ms": table.fixed_cost_ms,
            "entries": {k: [[w, ms] for w, ms in v] for k, v in table.entries.items()}}
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def lut_load(path) -> LatencyTable:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno} col {e.colno}: {e.msg}") from None
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be an object")
    for key in ("fixed_cost_ms", "entries"):
        if key not in data:
            raise ParseError(f"{path}: missing key {key!r}")
    entries = data["entries"]
    if not isinstance(entries, dict):
        raise ParseError(f"{path}: 'entries' must be an object")
    for sig, pts in entries.items():
        try:
            ws = [int(p[0]) for p in pts]
            ms = [float(p[1]) for p in pts]
        except (TypeError, ValueError, IndexError):
            raise ParseError(f"{path}: entries[{sig!r}] must be [[width, ms], ...]") from None
        if any(b <= a for a, b in zip(ws, ws[1:])):
            raise ParseError(f"{path}: entries[{sig!r}] widths not strictly increasing")
        if any(b < a for a, b in zip(ms, ms[1:])) or any(m <= 0 for m in ms):
            raise ParseError(f"{path}: entries[{sig!r}] latencies not positive and monotone")
    try:
        return LatencyTable(entries, float(data["fixed_cost_ms"]), data.get("meta", {}))
    except ConfigError as e:
        raise ParseError(f"{path}: {e}") from None
