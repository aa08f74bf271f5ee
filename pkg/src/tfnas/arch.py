"""Discrete architecture description and its JSON form."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

from .errors import ArchError, ParseError
from .space import CandidateOpSpec, op_signature, round_half_up, se_width


@dataclass
class LayerArch:
    op_name: str
    kernel_tag: int
    width: int
    se_width: int
    c_in: int
    c_out: int
    activation: str
    resolution_factor: float
    expansion_interval: Tuple[float, float]
    se_ratio: float = 0.0
    layer_index: Optional[int] = None  # position in the supernet, None for fixed stages
    op_index: Optional[int] = None

    @property
    def has_se(self) -> bool:
        return self.se_ratio > 0

    @property
    def base_signature(self) -> str:
        return op_signature(self.as_op_spec(), self.c_in, self.c_out, self.resolution_factor)

    @property
    def width_floor(self) -> int:
        return round_half_up(self.expansion_interval[0] * self.c_in)

    @property
    def width_cap(self) -> int:
        return round_half_up(self.expansion_interval[1] * self.c_in)

    @property
    def se_cap(self) -> int:
        return max(1, round_half_up(self.se_ratio * self.width_cap)) if self.has_se else 0

    def se_width_for(self, width: int) -> int:
        return se_width(self.se_ratio, width, self.se_cap)

    def as_op_spec(self) -> CandidateOpSpec:
        e = self.width / self.c_in
        lo, hi = self.expansion_interval
        e = min(max(e, lo), hi)
        return CandidateOpSpec(self.op_name, self.kernel_tag, e, self.expansion_interval,
                               self.se_ratio * e)

    def to_dict(self):
        return {"op_name": self.op_name, "kernel_tag": self.kernel_tag, "width": self.width,
                "se_width": self.se_width, "c_in": self.c_in, "c_out": self.c_out,
                "activation": self.activation, "resolution_factor": self.resolution_factor,
                "expansion_interval": list(self.expansion_interval),
                "se_ratio": self.se_ratio, "layer_index": self.layer_index,
                "op_index": self.op_index}


@dataclass
class StageArch:
    index: int
    searchable: bool
    depth: int
    layers: List[LayerArch]

    def to_dict(self):
        return {"index": self.index, "searchable": self.searchable, "depth": self.depth,
                "layers": [l.to_dict() for l in self.layers]}


@dataclass
class DerivedArch:
    stages: List[StageArch]
    input_dim: int
    stem_channels: int
    class_count: int
    provenance: dict = field(default_factory=dict)

    @property
    def layers(self) -> List[LayerArch]:
        return [l for s in self.stages for l in s.layers]

    @property
    def searchable_layers(self) -> List[LayerArch]:
        return [l for s in self.stages if s.searchable for l in s.layers]

    @property
    def depths(self) -> List[int]:
        return [s.depth for s in self.stages if s.searchable]

    def validate(self):
        prev = self.stem_channels
        for s in self.stages:
            if s.depth != len(s.layers):
                raise ArchError(f"stage {s.index}: depth {s.depth} but {len(s.layers)} layers")
            for l in s.layers:
                if l.c_in != prev:
                    raise ArchError(f"stage {s.index}: layer expects {l.c_in} channels, "
                                    f"receives {prev}")
                if not l.width_floor <= l.width <= l.width_cap:
                    raise ArchError(f"stage {s.index}: width {l.width} outside "
                                    f"[{l.width_floor}, {l.width_cap}]")
                prev = l.c_out
        return self

    def to_dict(self):
        return {"input_dim": self.input_dim, "stem_channels": self.stem_channels,
                "class_count": self.class_count, "provenance": self.provenance,
                "stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, d) -> "DerivedArch":
        def need(obj, key, where):
            if key not in obj:
                raise ParseError(f"{where}: missing field {key!r}")
            return obj[key]

        stages = []
        for si, s in enumerate(need(d, "stages", "arch")):
            where = f"stages[{si}]"
            layers = []
            for li, l in enumerate(need(s, "layers", where)):
                lw = f"{where}.layers[{li}]"
                try:
                    layers.append(LayerArch(
                        op_name=str(need(l, "op_name", lw)),
                        kernel_tag=int(need(l, "kernel_tag", lw)),
                        width=int(need(l, "width", lw)),
                        se_width=int(need(l, "se_width", lw)),
                        c_in=int(need(l, "c_in", lw)), c_out=int(need(l, "c_out", lw)),
                        activation=str(need(l, "activation", lw)),
                        resolution_factor=float(need(l, "resolution_factor", lw)),
                        expansion_interval=tuple(float(v) for v in
                                                 need(l, "expansion_interval", lw)),
                        se_ratio=float(l.get("se_ratio", 0.0)),
                        layer_index=l.get("layer_index"), op_index=l.get("op_index")))
                except (TypeError, ValueError) as e:
                    raise ParseError(f"{lw}: {e}") from None
            stages.append(StageArch(index=int(need(s, "index", where)),
                                    searchable=bool(need(s, "searchable", where)),
                                    depth=int(need(s, "depth", where)), layers=layers))
        return cls(stages=stages, input_dim=int(need(d, "input_dim", "arch")),
                   stem_channels=int(need(d, "stem_channels", "arch")),
                   class_count=int(need(d, "class_count", "arch")),
                   provenance=dict(d.get("provenance", {})))


def export_arch(arch: DerivedArch, path):
    Path(path).write_text(json.dumps(arch.to_dict(), indent=2) + "\n")


def import_arch(path) -> DerivedArch:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: line {e.lineno}: {e.msg}") from None
    return DerivedArch.from_dict(data).validate()
