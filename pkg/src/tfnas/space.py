"""Layer-wise search space and the weight-sharing supernet.

Features are plain vectors: each candidate op is an inverted-bottleneck
block reduced to its channel structure (normalize, expand, per-channel
scale, optional squeeze-excitation gate, project).  Blocks whose shapes
match add the identity; a channel-changing searchable layer adds one linear
projection of its input that all of the layer's ops share, so the next
layer sees a consistent basis whichever op ran.  Spatial
resolution only enters through each stage's ``resolution_factor``, which
the latency model uses as a cost multiplier.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, WidthError

SE_RATIO_MAX = 0.5
RESIDUAL_INIT_SCALE = 0.25  # small projection init keeps deep residual stacks trainable


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class CandidateOpSpec:
    name: str
    kernel_tag: int
    expansion_init: float
    expansion_interval: Tuple[float, float]
    se_expansion: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "expansion_interval",
                           tuple(float(v) for v in self.expansion_interval))
        lo, hi = self.expansion_interval
        if lo < 1 or not lo <= self.expansion_init <= hi:
            raise ConfigError(f"op {self.name}: expansion {self.expansion_init} "
                              f"outside interval [{lo}, {hi}] (lo must be >= 1)")
        if self.se_expansion < 0:
            raise ConfigError(f"op {self.name}: negative se_expansion")
        if self.has_se and self.se_ratio > SE_RATIO_MAX:
            raise ConfigError(f"op {self.name}: se/expansion ratio {self.se_ratio:.3f} "
                              f"exceeds {SE_RATIO_MAX}")

    @property
    def has_se(self) -> bool:
        return self.se_expansion > 0

    @property
    def se_ratio(self) -> float:
        return self.se_expansion / self.expansion_init

    @classmethod
    def from_dict(cls, d):
        return cls(name=str(d["name"]), kernel_tag=int(d["kernel_tag"]),
                   expansion_init=float(d["expansion_init"]),
                   expansion_interval=tuple(d["expansion_interval"]),
                   se_expansion=float(d.get("se_expansion", 0.0)))

    def to_dict(self):
        d = asdict(self)
        d["expansion_interval"] = list(self.expansion_interval)
        return d


@dataclass(frozen=True)
class StageSpec:
    index: int
    channels_in: int
    channels_out: int
    max_layers: int
    min_layers: int = 1
    activation: str = "relu"
    searchable: bool = True
    resolution_factor: float = 1.0
    fixed_op: Optional[CandidateOpSpec] = None

    def __post_init__(self):
        if self.channels_in < 1 or self.channels_out < 1:
            raise ConfigError(f"stage {self.index}: channels must be positive")
        if self.min_layers < 1 or self.max_layers < self.min_layers:
            raise ConfigError(f"stage {self.index}: need 1 <= min_layers <= max_layers")
        if self.activation not in ("relu", "swish"):
            raise ConfigError(f"stage {self.index}: unknown activation {self.activation!r}")
        if self.resolution_factor <= 0:
            raise ConfigError(f"stage {self.index}: resolution_factor must be positive")
        if not self.searchable:
            if self.fixed_op is None:
                raise ConfigError(f"stage {self.index}: non-searchable stage needs fixed_op")
            if self.max_layers != 1 or self.min_layers != 1:
                raise ConfigError(f"stage {self.index}: non-searchable stage has one layer")

    def layer_channels(self, layer: int) -> Tuple[int, int]:
        c_in = self.channels_in if layer == 0 else self.channels_out
        return c_in, self.channels_out

    @classmethod
    def from_dict(cls, d):
        fixed = d.get("fixed_op")
        return cls(index=int(d["index"]), channels_in=int(d["channels_in"]),
                   channels_out=int(d["channels_out"]), max_layers=int(d["max_layers"]),
                   min_layers=int(d.get("min_layers", 1)),
                   activation=str(d.get("activation", "relu")),
                   searchable=bool(d.get("searchable", True)),
                   resolution_factor=float(d.get("resolution_factor", 1.0)),
                   fixed_op=CandidateOpSpec.from_dict(fixed) if fixed else None)

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("index", "channels_in", "channels_out",
                                           "max_layers", "min_layers", "activation",
                                           "searchable", "resolution_factor")}
        if self.fixed_op is not None:
            d["fixed_op"] = self.fixed_op.to_dict()
        return d


@dataclass
class SupernetConfig:
    stages: List[StageSpec]
    ops: List[CandidateOpSpec]
    class_count: int
    input_dim: int
    seed: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("config has no stages")
        if not any(s.searchable for s in self.stages):
            raise ConfigError("config needs at least one searchable stage")
        for a, b in zip(self.stages, self.stages[1:]):
            if a.channels_out != b.channels_in:
                raise ConfigError(f"channel mismatch: stage {a.index} outputs {a.channels_out},"
                                  f" stage {b.index} expects {b.channels_in}")
        if not self.ops:
            raise ConfigError("config has no candidate ops")
        if self.class_count < 1 or self.input_dim < 1:
            raise ConfigError("class_count and input_dim must be positive")

    @property
    def searchable_stages(self) -> List[StageSpec]:
        return [s for s in self.stages if s.searchable]

    @property
    def num_searchable_layers(self) -> int:
        return sum(s.max_layers for s in self.searchable_stages)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(stages=[StageSpec.from_dict(s) for s in d["stages"]],
                       ops=[CandidateOpSpec.from_dict(o) for o in d["ops"]],
                       class_count=int(d["class_count"]), input_dim=int(d["input_dim"]),
                       seed=int(d.get("seed", 0)))
        except KeyError as e:
            raise ConfigError(f"config missing key {e.args[0]!r}") from None

    def to_dict(self):
        return {"stages": [s.to_dict() for s in self.stages],
                "ops": [o.to_dict() for o in self.ops],
                "class_count": self.class_count, "input_dim": self.input_dim,
                "seed": self.seed}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def load(cls, path) -> "SupernetConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def default(cls) -> "SupernetConfig":
        text = resources.files("tfnas").joinpath("configs/default-tfnas.json").read_text()
        return cls.from_dict(json.loads(text))


def width_bounds(spec: CandidateOpSpec, c_in: int) -> Tuple[int, int]:
    lo, hi = spec.expansion_interval
    return round_half_up(lo * c_in), round_half_up(hi * c_in)


def se_width(se_ratio: float, width: int, s_max: int) -> int:
    """SE hidden width tied proportionally to the block's hidden width."""
    if se_ratio <= 0:
        return 0
    return min(s_max, max(1, round_half_up(se_ratio * width)))


def op_signature(spec: CandidateOpSpec, c_in: int, c_out: int, resolution_factor: float,
                 width: Optional[int] = None) -> str:
    """Latency-table key, e.g. ``k3-se0-16-24-r4.0`` (``-w48`` appended with a width)."""
    sig = (f"k{spec.kernel_tag}-se{1 if spec.has_se else 0}-{c_in}-{c_out}"
           f"-r{float(resolution_factor)!r}")
    return sig if width is None else f"{sig}-w{int(width)}"


def layer_signature(spec: CandidateOpSpec, stage: StageSpec, layer: int = 0,
                    width: Optional[int] = None) -> str:
    c_in, c_out = stage.layer_channels(layer)
    return op_signature(spec, c_in, c_out, stage.resolution_factor, width)


class OpBlock:
    """Full-width parameter store for one candidate op at one layer.

    Only the first ``active_width`` entries of ``channel_order`` take part
    in the forward pass; the remaining channels keep their weights so a
    later expansion reuses them.
    """

    def __init__(self, spec: CandidateOpSpec, c_in: int, c_out: int, rng=None,
                 h_max: Optional[int] = None, width: Optional[int] = None):
        self.spec = spec
        self.c_in = c_in
        self.c_out = c_out
        floor, cap = width_bounds(spec, c_in)
        self.h_min = floor
        self.h_max = cap if h_max is None else h_max
        self.s_max = round_half_up(spec.se_ratio * self.h_max) if spec.has_se else 0
        if spec.has_se:
            self.s_max = max(1, self.s_max)
        rng = rng if rng is not None else np.random.default_rng(0)
        H, S = self.h_max, self.s_max
        self.W1 = gc.parameter(gc.array_init((H, c_in), "scaled_normal", fan_in=c_in, rng=rng)
                               * math.sqrt(2.0))
        self.b1 = gc.parameter(np.zeros(H))
        self.w_d = gc.parameter(gc.array_init((H,), "uniform", low=0.5, high=1.5, rng=rng))
        self.W2 = gc.parameter(gc.array_init((c_out, H), "scaled_normal", fan_in=H, rng=rng)
                               * (RESIDUAL_INIT_SCALE if c_in == c_out else 1.0))
        self.b2 = gc.parameter(np.zeros(c_out))
        if S:
            self.se_W1 = gc.parameter(gc.array_init((S, H), "scaled_normal", fan_in=H, rng=rng))
            self.se_b1 = gc.parameter(np.zeros(S))
            self.se_W2 = gc.parameter(gc.array_init((H, S), "scaled_normal", fan_in=S, rng=rng))
            self.se_b2 = gc.parameter(np.zeros(H))
        else:
            self.se_W1 = self.se_b1 = self.se_W2 = self.se_b2 = None
        init = round_half_up(spec.expansion_init * c_in) if width is None else width
        self.active_width = min(init, self.h_max)
        # rank once at build so the first shrink agrees with the initial selection
        self.channel_order = channel_l1_importance(self)
        self.se_order = np.argsort(-se_importance(self), kind="stable") if S else np.arange(0)

    @property
    def has_se(self) -> bool:
        return self.s_max > 0

    @property
    def se_active(self) -> int:
        return se_width(self.spec.se_ratio, self.active_width, self.s_max) if self.has_se else 0

    def parameters(self) -> List[gc.Node]:
        ps = [self.W1, self.b1, self.w_d, self.W2, self.b2]
        if self.has_se:
            ps += [self.se_W1, self.se_b1, self.se_W2, self.se_b2]
        return ps

    def selected(self) -> Tuple[np.ndarray, np.ndarray]:
        """Active hidden channels and SE units, in ascending index order."""
        sel = np.sort(self.channel_order[:self.active_width])
        sel_se = np.sort(self.se_order[:self.se_active]) if self.has_se else np.arange(0)
        return sel, sel_se

    def forward(self, x: gc.Node, act: str, shortcut: Optional[gc.Node] = None) -> gc.Node:
        return op_forward(self, x, act, shortcut)


def op_forward(block: OpBlock, x, act: str, shortcut: Optional[gc.Node] = None) -> gc.Node:
    """Pre-normalized bottleneck; identity residual when shapes match, else ``shortcut @ x``."""
    x = x if isinstance(x, gc.Node) else gc.constant(x)
    y = op_branch(block, x, act)
    res = residual_path(block.c_in, block.c_out, x, shortcut)
    return y if res is None else gc.add(y, res)


def residual_path(c_in: int, c_out: int, x: gc.Node,
                  shortcut: Optional[gc.Node] = None) -> Optional[gc.Node]:
    if c_in == c_out:
        return x
    return None if shortcut is None else gc.matvec(shortcut, x)


def op_branch(block: OpBlock, x, act: str) -> gc.Node:
    """The block's output without its residual term."""
    if block.active_width > block.h_max or block.active_width < 1:
        raise WidthError(f"active width {block.active_width} outside [1, {block.h_max}]")
    x = x if isinstance(x, gc.Node) else gc.constant(x)
    sel, sel_se = block.selected()
    xn = gc.normalize(x)
    h = gc.activation(gc.add(gc.matvec(gc.take(block.W1, sel), xn), gc.take(block.b1, sel)), act)
    d = gc.activation(gc.mul(h, gc.take(block.w_d, sel)), act)
    if block.has_se:
        s = gc.activation(gc.add(gc.matvec(gc.take(block.se_W1, sel_se, sel), d),
                                 gc.take(block.se_b1, sel_se)), act)
        gate = gc.sigmoid(gc.add(gc.matvec(gc.take(block.se_W2, sel, sel_se), s),
                                 gc.take(block.se_b2, sel)))
        d = gc.mul(d, gate)
    return gc.add(gc.matvec(gc.take(block.W2, None, sel), d), block.b2)


def channel_importance(block: OpBlock) -> np.ndarray:
    """Per-hidden-channel L1 mass of every weight touching that channel."""
    imp = (np.abs(block.W1.value).sum(axis=1) + np.abs(block.b1.value)
           + np.abs(block.w_d.value) + np.abs(block.W2.value).sum(axis=0))
    if block.has_se:
        imp = imp + np.abs(block.se_W1.value).sum(axis=0) + np.abs(block.se_W2.value).sum(axis=1) \
            + np.abs(block.se_b2.value)
    return imp


def se_importance(block: OpBlock) -> np.ndarray:
    return (np.abs(block.se_W1.value).sum(axis=1) + np.abs(block.se_b1.value)
            + np.abs(block.se_W2.value).sum(axis=0))


def channel_l1_importance(block: OpBlock) -> np.ndarray:
    """Hidden channels ranked by descending importance, ties to the lower index."""
    return np.argsort(-channel_importance(block), kind="stable")


def set_active_width(block: OpBlock, width: int) -> OpBlock:
    """Shrink keeps the most important active channels; expand restores in stored order.

    Pruned channels go to the front of the inactive queue, so expanding right
    after a shrink brings back exactly the channels that were dropped.
    """
    width = int(width)
    if not block.h_min <= width <= block.h_max:
        raise WidthError(f"width {width} outside [{block.h_min}, {block.h_max}]")
    if width < block.active_width:
        block.channel_order = _rank_front(block.channel_order, block.active_width,
                                          channel_importance(block))
        if block.has_se:
            block.se_order = _rank_front(block.se_order, block.se_active, se_importance(block))
    block.active_width = width
    return block


def _rank_front(order: np.ndarray, k: int, importance: np.ndarray) -> np.ndarray:
    head = order[:k]
    head = head[np.argsort(-importance[head], kind="stable")]
    return np.concatenate([head, order[k:]])


@dataclass
class LayerInfo:
    """Position of one searchable layer inside the supernet."""
    index: int
    stage_pos: int  # position among searchable stages
    stage: StageSpec
    layer_in_stage: int
    c_in: int
    c_out: int

    @property
    def activation(self) -> str:
        return self.stage.activation

    @property
    def resolution_factor(self) -> float:
        return self.stage.resolution_factor


@dataclass
class Supernet:
    config: SupernetConfig
    layers: List[LayerInfo]
    blocks: List[List[OpBlock]]
    fixed_blocks: List[Tuple[StageSpec, OpBlock]]
    stem_W: gc.Node
    stem_b: gc.Node
    head_W: gc.Node
    head_b: gc.Node
    alpha: List[gc.Node]
    beta: List[gc.Node]
    skip_alpha: gc.Node = None
    skip_gate: gc.Node = None
    stage_layers: List[List[int]] = field(default_factory=list)
    # one projection per channel-changing layer, shared by all of its ops
    shortcuts: Dict[int, gc.Node] = field(default_factory=dict)

    @property
    def op_count(self) -> int:
        return len(self.config.ops)

    @property
    def alpha_matrix(self) -> np.ndarray:
        return np.stack([a.value for a in self.alpha])

    def set_alpha(self, matrix):
        matrix = np.asarray(matrix, dtype=np.float64)
        for node, row in zip(self.alpha, matrix):
            node.value = row.copy()

    def weight_parameters(self) -> List[gc.Node]:
        ps = [self.stem_W, self.stem_b]
        for _, b in self.fixed_blocks:
            ps += b.parameters()
        for row in self.blocks:
            for b in row:
                ps += b.parameters()
        ps += [self.shortcuts[k] for k in sorted(self.shortcuts)]
        ps += [self.head_W, self.head_b]
        return ps

    def arch_parameters(self) -> List[gc.Node]:
        return list(self.alpha) + list(self.beta) + [self.skip_alpha, self.skip_gate]

    def active_widths(self) -> List[List[int]]:
        return [[b.active_width for b in row] for row in self.blocks]

    def set_active_widths(self, widths):
        for row, ws in zip(self.blocks, widths):
            for b, w in zip(row, ws):
                if b.active_width != w:
                    set_active_width(b, w)

    def signature(self, layer: int, op: int, width: Optional[int] = None) -> str:
        info = self.layers[layer]
        return op_signature(self.config.ops[op], info.c_in, info.c_out,
                            info.resolution_factor, width)

    def stem_forward(self, x) -> gc.Node:
        x = x if isinstance(x, gc.Node) else gc.constant(x)
        return gc.relu(gc.add(gc.matvec(self.stem_W, x), self.stem_b))

    def head_forward(self, x, dropout_mask=None) -> gc.Node:
        x = gc.normalize(x)
        if dropout_mask is not None:
            x = gc.mul(x, dropout_mask)
        return gc.add(gc.matvec(self.head_W, x), self.head_b)


def projection_init(c_in: int, c_out: int, rng) -> np.ndarray:
    return gc.array_init((c_out, c_in), "scaled_normal", fan_in=c_in, rng=rng)


def build_supernet(config: SupernetConfig, seed: Optional[int] = None) -> Supernet:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    first = config.stages[0]
    stem_W = gc.parameter(gc.array_init((first.channels_in, config.input_dim), "scaled_normal",
                                        rng=rng) * math.sqrt(2.0))
    stem_b = gc.parameter(np.zeros(first.channels_in))
    layers, blocks, fixed, stage_layers, shortcuts = [], [], [], [], {}
    stage_pos = 0
    for stage in config.stages:
        if not stage.searchable:
            fixed.append((stage, OpBlock(stage.fixed_op, stage.channels_in,
                                         stage.channels_out, rng)))
            continue
        ids = []
        for l in range(stage.max_layers):
            c_in, c_out = stage.layer_channels(l)
            info = LayerInfo(len(layers), stage_pos, stage, l, c_in, c_out)
            ids.append(info.index)
            layers.append(info)
            blocks.append([OpBlock(op, c_in, c_out, rng) for op in config.ops])
            if c_in != c_out:
                shortcuts[info.index] = gc.parameter(projection_init(c_in, c_out, rng))
        stage_layers.append(ids)
        stage_pos += 1
    last = config.stages[-1]
    head_W = gc.parameter(gc.array_init((config.class_count, last.channels_out),
                                        "scaled_normal", rng=rng))
    head_b = gc.parameter(np.zeros(config.class_count))
    n_ops = len(config.ops)
    alpha = [gc.parameter(np.zeros(n_ops)) for _ in layers]
    beta = [gc.parameter(np.zeros(s.max_layers)) for s in config.searchable_stages]
    return Supernet(config=config, layers=layers, blocks=blocks, fixed_blocks=fixed,
                    stem_W=stem_W, stem_b=stem_b, head_W=head_W, head_b=head_b,
                    alpha=alpha, beta=beta,
                    skip_alpha=gc.parameter(np.zeros(len(layers))),
                    skip_gate=gc.parameter(np.zeros(len(layers))),
                    stage_layers=stage_layers, shortcuts=shortcuts)
