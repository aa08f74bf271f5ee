"""Turning a searched supernet into a standalone network, and training it from scratch."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import List, Optional

import numpy as np

from . import gradcore as gc
from .arch import DerivedArch, LayerArch, StageArch
from .data import Dataset, stratified_split
from .elastic import derive_seed
from .errors import ArchError
from .latmodel import LatencyTable, arch_latency, bench_callable, BenchSpec
from .space import OpBlock, projection_init, round_half_up, se_width


def _layer_arch(spec, c_in, c_out, stage, width, layer_index=None, op_index=None) -> LayerArch:
    lo, hi = spec.expansion_interval
    cap = round_half_up(hi * c_in)
    s_max = max(1, round_half_up(spec.se_ratio * cap)) if spec.has_se else 0
    return LayerArch(op_name=spec.name, kernel_tag=spec.kernel_tag, width=int(width),
                     se_width=se_width(spec.se_ratio, width, s_max), c_in=c_in, c_out=c_out,
                     activation=stage.activation, resolution_factor=stage.resolution_factor,
                     expansion_interval=(lo, hi), se_ratio=spec.se_ratio if spec.has_se else 0.0,
                     layer_index=layer_index, op_index=op_index)


def derive_architecture(net, alpha=None, beta=None, depth_mode: str = "sink",
                        provenance: Optional[dict] = None) -> DerivedArch:
    """Strongest op per layer and strongest depth per stage, at current widths."""
    seed = derive_seed(net, alpha, beta, depth_mode)
    by_stage = {}
    for l in seed.layers:
        by_stage.setdefault(l.stage_pos, []).append(l)
    fixed = {s.index: b for s, b in net.fixed_blocks}
    stages, sp = [], 0
    for stage in net.config.stages:
        if not stage.searchable:
            b = fixed[stage.index]
            layer = _layer_arch(stage.fixed_op, stage.channels_in, stage.channels_out, stage,
                                b.active_width)
            stages.append(StageArch(stage.index, False, 1, [layer]))
            continue
        layers = []
        for sl in by_stage.get(sp, []):
            info = net.layers[sl.layer_index]
            layers.append(_layer_arch(net.config.ops[sl.op_index], info.c_in, info.c_out,
                                      stage, sl.width, sl.layer_index, sl.op_index))
        # layers below min_layers never skip, so a stage always starts at its input width
        if layers and layers[0].c_in != stage.channels_in:
            raise ArchError(f"stage {stage.index}: first kept layer does not take stage input")
        stages.append(StageArch(stage.index, True, len(layers), layers))
        sp += 1
    prov = {"config_hash": net.config.config_hash(), "depth_mode": depth_mode}
    prov.update(provenance or {})
    return DerivedArch(stages, net.config.input_dim, net.config.stages[0].channels_in,
                       net.config.class_count, prov).validate()


def analytic_cost(arch: DerivedArch) -> float:
    """Multiply-accumulate count of every block, scaled by its resolution factor."""
    total = 0.0
    searchable = {id(l) for l in arch.searchable_layers}
    for l in arch.layers:
        H, S = l.width, l.se_width
        macs = l.c_in * H + H + H * l.c_out + 2 * H * S
        if id(l) in searchable and l.c_in != l.c_out:
            macs += l.c_in * l.c_out
        total += macs * l.resolution_factor
    return total


# ------------------------------------------------------------------ training


class StandaloneNet:
    """Fresh weights for exactly the layers and widths of a derived architecture."""

    def __init__(self, arch: DerivedArch, seed: int):
        arch.validate()
        rng = np.random.default_rng(seed)
        self.arch = arch
        self.stem_W = gc.parameter(gc.array_init((arch.stem_channels, arch.input_dim),
                                                 "scaled_normal", rng=rng) * math.sqrt(2.0))
        self.stem_b = gc.parameter(np.zeros(arch.stem_channels))
        self.blocks: List[OpBlock] = []
        self.shortcuts: List[Optional[gc.Node]] = []
        searchable = {id(l) for l in arch.searchable_layers}
        for l in arch.layers:
            b = OpBlock(l.as_op_spec(), l.c_in, l.c_out, rng, h_max=l.width, width=l.width)
            if b.se_active != l.se_width:
                raise ArchError(f"layer {l.op_name}: SE width {l.se_width} inconsistent "
                                f"with width {l.width}")
            self.blocks.append(b)
            self.shortcuts.append(gc.parameter(projection_init(l.c_in, l.c_out, rng))
                                  if id(l) in searchable and l.c_in != l.c_out else None)
        last = arch.layers[-1].c_out if arch.layers else arch.stem_channels
        self.head_W = gc.parameter(gc.array_init((arch.class_count, last), "scaled_normal",
                                                 rng=rng))
        self.head_b = gc.parameter(np.zeros(arch.class_count))

    def parameters(self) -> List[gc.Node]:
        ps = [self.stem_W, self.stem_b]
        for b in self.blocks:
            ps += b.parameters()
        ps += [s for s in self.shortcuts if s is not None]
        return ps + [self.head_W, self.head_b]

    def forward(self, X, dropout_mask=None) -> gc.Node:
        h = gc.relu(gc.add(gc.matvec(self.stem_W, gc.constant(X)), self.stem_b))
        for l, b, s in zip(self.arch.layers, self.blocks, self.shortcuts):
            h = b.forward(h, l.activation, s)
        h = gc.normalize(h)
        if dropout_mask is not None:
            h = gc.mul(h, dropout_mask)
        return gc.add(gc.matvec(self.head_W, h), self.head_b)

    def param_count(self) -> int:
        return int(sum(p.value.size for p in self.parameters()))

    def accuracy(self, X, y) -> float:
        if len(y) == 0:
            return float("nan")
        return float(np.mean(np.argmax(self.forward(X).value, axis=1) == y))


@dataclass
class EvalReport:
    accuracy: float
    latency_ms: Optional[float]
    param_count: int
    analytic_cost: float
    measured_ms: Optional[float] = None
    val_accuracy: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 1]")

    def to_dict(self):
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def train_from_scratch(arch: DerivedArch, dataset: Dataset, epochs: int = 60, seed: int = 0,
                       lut: Optional[LatencyTable] = None, lr0: float = 0.05,
                       momentum: float = 0.9, weight_decay: float = 1e-5,
                       batch_size: int = 32, label_smoothing: float = 0.1,
                       dropout: float = 0.2, measure: bool = False) -> EvalReport:
    """Train only ``arch`` on the 80% split; report accuracy on the held-out 10%."""
    from .optimizer import SGD, cosine_lr

    train, val, test = stratified_split(dataset.y, [0.8, 0.1, 0.1], dataset.spec.seed)
    if set(train) & set(test) or set(train) & set(val):
        raise ArchError("dataset splits overlap")
    net = StandaloneNet(arch, seed)
    rng = np.random.default_rng(seed + 1)
    params = net.parameters()
    sgd = SGD(params, momentum=momentum, weight_decay=weight_decay)
    steps_per_epoch = math.ceil(len(train) / batch_size)
    total = max(1, epochs * steps_per_epoch)
    width = arch.layers[-1].c_out if arch.layers else arch.stem_channels
    t = 0
    for _ in range(epochs):
        order = rng.permutation(train)
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            mask = None
            if dropout > 0:
                keep = rng.random((len(idx), width)) >= dropout
                mask = keep / (1.0 - dropout)
            logits = net.forward(dataset.X[idx], mask)
            loss = gc.cross_entropy_smoothed(logits, dataset.y[idx], label_smoothing)
            sgd.step(gc.backward(loss), cosine_lr(lr0, t, total))
            t += 1
    measured = None
    if measure:
        Xb = dataset.X[test[:32]]
        measured, _ = bench_callable(lambda: net.forward(Xb), BenchSpec())
    return EvalReport(accuracy=net.accuracy(*dataset.subset(test)),
                      latency_ms=arch_latency(arch, lut) if lut is not None else None,
                      param_count=net.param_count(), analytic_cost=analytic_cost(arch),
                      measured_ms=measured, val_accuracy=net.accuracy(*dataset.subset(val)))
