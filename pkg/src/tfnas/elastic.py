"""Elasticity-scaling: width refinement of a discrete seed toward a latency target."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import InvalidArgumentError
from .latmodel import LatencyTable, lut_lookup
from .relax import argmax_first, derived_depth, skip_eligible
from .space import round_half_up, set_active_width, width_bounds


@dataclass
class SeedLayer:
    layer_index: int
    op_index: int
    stage_pos: int
    width: int
    floor: int
    cap: int
    signature: str


@dataclass
class SeedNetwork:
    """Strongest op per layer and strongest depth per stage, with live widths."""
    layers: List[SeedLayer]
    depths: List[int]

    @property
    def widths(self) -> List[int]:
        return [l.width for l in self.layers]

    def suffix(self, from_stage: int) -> List[int]:
        """Positions (into ``layers``) of layers in stages ``>= from_stage``."""
        return [i for i, l in enumerate(self.layers) if l.stage_pos >= from_stage]

    def latency(self, table: LatencyTable, widths: Optional[Sequence[int]] = None) -> float:
        widths = self.widths if widths is None else widths
        return table.fixed_cost_ms + sum(lut_lookup(table, l.signature, w)
                                         for l, w in zip(self.layers, widths))


def derive_seed(net, alpha=None, beta=None, depth_mode: str = "sink") -> SeedNetwork:
    alpha = net.alpha_matrix if alpha is None else np.asarray(alpha)
    beta = [b.value for b in net.beta] if beta is None else [np.asarray(b) for b in beta]
    layers, depths = [], []
    for sp, ids in enumerate(net.stage_layers):
        stage = net.layers[ids[0]].stage
        kept = []
        if depth_mode == "sink":
            d = derived_depth(beta[sp], stage.min_layers)
            kept = [(l, argmax_first(alpha[l])) for l in ids[:d]]
        else:
            for l in ids:
                if depth_mode == "skip_in":
                    row = alpha[l]
                    if skip_eligible(net, l):
                        row = np.append(row, net.skip_alpha.value[l])
                    k = argmax_first(row)
                    if k < net.op_count:
                        kept.append((l, k))
                elif depth_mode == "skip_out":
                    if not skip_eligible(net, l) or net.skip_gate.value[l] >= 0.0:
                        kept.append((l, argmax_first(alpha[l])))
                else:
                    raise InvalidArgumentError(f"unknown depth mode {depth_mode!r}")
        for l, k in kept:
            info = net.layers[l]
            floor, cap = width_bounds(net.config.ops[k], info.c_in)
            layers.append(SeedLayer(l, k, sp, net.blocks[l][k].active_width, floor, cap,
                                    net.signature(l, k)))
        depths.append(len(kept))
    return SeedNetwork(layers, depths)


def scale_widths(seed: SeedNetwork, gamma: float, from_stage: int) -> List[int]:
    """New H = clamp(round(gamma * H), floor, cap) for suffix layers; others keep H."""
    if not gamma > 0:
        raise InvalidArgumentError("gamma must be positive")
    out = []
    for l in seed.layers:
        if l.stage_pos < from_stage:
            out.append(l.width)
        else:
            out.append(min(max(round_half_up(gamma * l.width), l.floor), l.cap))
    return out


@dataclass
class GammaResult:
    gamma: float
    widths: List[int]
    latency_ms: float
    feasible: bool


def gamma_bounds(seed: SeedNetwork, from_stage: int):
    suf = [seed.layers[i] for i in seed.suffix(from_stage)]
    if not suf:
        return None
    return min(l.floor / l.width for l in suf), max(l.cap / l.width for l in suf)


def find_max_gamma(seed: SeedNetwork, from_stage: int, target_ms: float,
                   table: LatencyTable) -> GammaResult:
    """Largest gamma whose scaled suffix stays within ``target_ms``.

    Widths are piecewise constant in gamma, changing only where some
    ``gamma * H`` crosses a half-integer.  The search runs over those
    intervals, so the answer is exact rather than tolerance-limited.
    """
    bounds = gamma_bounds(seed, from_stage)
    if bounds is None:
        return GammaResult(1.0, seed.widths, seed.latency(table), seed.latency(table) <= target_ms)
    lo, hi = bounds
    cuts = []
    for i in seed.suffix(from_stage):
        H = seed.layers[i].width
        for k in range(seed.layers[i].floor + 1, seed.layers[i].cap + 1):
            b = (k - 0.5) / H
            if lo < b < hi:
                cuts.append(b)
    cuts = sorted(cuts)
    edges = [lo]
    for b in cuts:
        if b - edges[-1] > 1e-12:
            edges.append(b)
    if hi - edges[-1] <= 1e-12:
        edges.pop()
    edges.append(hi)
    # one representative gamma per constant-width interval
    reps = [lo] + [(a + b) / 2 for a, b in zip(edges[1:-1], edges[2:-1])]
    if len(edges) > 2:
        reps.append(hi)
    elif hi != lo:
        reps = [lo, hi]

    def lat(g):
        return seed.latency(table, scale_widths(seed, g, from_stage))

    if lat(reps[0]) > target_ms:
        w = scale_widths(seed, reps[0], from_stage)
        return GammaResult(reps[0], w, seed.latency(table, w), False)
    a, b = 0, len(reps) - 1
    while a < b:
        m = (a + b + 1) // 2
        if lat(reps[m]) <= target_ms:
            a = m
        else:
            b = m - 1
    w = scale_widths(seed, reps[a], from_stage)
    return GammaResult(reps[a], w, seed.latency(table, w), True)


@dataclass
class ScalingStep:
    from_stage: int
    gamma: float
    old_widths: List[int]
    new_widths: List[int]


@dataclass
class ScalingPlan:
    seed: SeedNetwork
    steps: List[ScalingStep] = field(default_factory=list)
    latency_ms: float = 0.0
    infeasible: bool = False
    passes: int = 0


GammaFinder = Callable[[SeedNetwork, int, float, LatencyTable], GammaResult]


def scale_seed(seed: SeedNetwork, target_ms: float, table: LatencyTable,
               gamma_finder: GammaFinder = find_max_gamma, max_passes: int = 100) -> ScalingPlan:
    """Run the stage loop on ``seed`` in place until a pass changes no width.

    After the first pass gamma = 1 is always feasible, so later passes can
    only widen layers; the loop therefore terminates and its result is
    stable under re-application.
    """
    plan = ScalingPlan(seed)
    n_stages = max((l.stage_pos for l in seed.layers), default=-1) + 1
    for _ in range(max_passes):
        changed = False
        plan.infeasible = False
        for sp in range(n_stages):
            if not seed.suffix(sp):
                continue
            res = gamma_finder(seed, sp, target_ms, table)
            old = seed.widths
            if not res.feasible:
                plan.infeasible = True
            for l, w in zip(seed.layers, res.widths):
                l.width = w
            plan.steps.append(ScalingStep(sp, res.gamma, old, list(res.widths)))
            changed |= old != list(res.widths)
        plan.passes += 1
        if not changed:
            break
    plan.latency_ms = seed.latency(table)
    return plan


def elasticity_scale(net, target_ms: float, table: LatencyTable, alpha=None, beta=None,
                     depth_mode: str = "sink",
                     gamma_finder: GammaFinder = find_max_gamma) -> ScalingPlan:
    """Derive a seed, scale it toward ``target_ms``, write widths back into ``net``."""
    seed = derive_seed(net, alpha, beta, depth_mode)
    plan = scale_seed(seed, target_ms, table, gamma_finder)
    for l in seed.layers:
        block = net.blocks[l.layer_index][l.op_index]
        if block.active_width != l.width:
            set_active_width(block, l.width)
    return plan
