"""Continuous relaxations: Gumbel op sampling, second paths, and depth mixing."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import gradcore as gc
from .errors import InvalidArgumentError, InvalidShapeError, SamplingError
from .latmodel import latency_coefficients
from .space import op_branch, residual_path

U_CLAMP = 1e-12
DEPTH_MODES = ("sink", "skip_in", "skip_out")
SECOND_PATH_MODES = ("random", "gumbel", "min_alpha", "max_alpha", "none")


def sample_gumbel(n: int, rng) -> np.ndarray:
    if n < 1:
        raise InvalidArgumentError("need at least one Gumbel draw")
    u = np.clip(rng.random(n), U_CLAMP, 1.0 - U_CLAMP)
    return -np.log(-np.log(u))


def argmax_first(x) -> int:
    """Index of the maximum; ties go to the lowest index."""
    return int(np.argmax(np.asarray(x)))


@dataclass
class GumbelDraw:
    noise: np.ndarray
    tau: float
    soft: gc.Node  # u as a graph node, so gradients reach the logits
    hard_index: int

    @property
    def soft_weights(self) -> np.ndarray:
        return self.soft.value


def gumbel_weights(logits, g, tau: float) -> GumbelDraw:
    """``u = softmax((logits + g) / tau)`` together with its argmax."""
    logits = logits if isinstance(logits, gc.Node) else gc.constant(logits)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != logits.shape:
        raise InvalidShapeError(f"noise {g.shape} vs logits {logits.shape}")
    u = gc.softmax(gc.add(logits, g), tau)
    return GumbelDraw(g, float(tau), u, argmax_first(u.value))


def second_path(mode: str, alpha_row, primary_index: int, rng, tau: float = 1.0) -> Optional[int]:
    """Index of the second sampled op, or None when bi-sampling is off."""
    alpha_row = np.asarray(alpha_row.value if isinstance(alpha_row, gc.Node) else alpha_row)
    n = alpha_row.shape[0]
    if mode == "none":
        return None
    if mode == "random":
        if n < 2:
            raise SamplingError("random second path needs at least two ops")
        k = int(rng.integers(n - 1))
        return k + 1 if k >= primary_index else k
    if mode == "gumbel":
        return gumbel_weights(alpha_row, sample_gumbel(n, rng), tau).hard_index
    if mode == "min_alpha":
        return int(np.argmin(alpha_row))
    if mode == "max_alpha":
        return argmax_first(alpha_row)
    raise InvalidArgumentError(f"unknown second-path mode {mode!r}")


# --------------------------------------------------------------- selections


@dataclass
class LayerChoice:
    """Ops to run at one layer and their mixing weights.

    ``weights[i]`` is a scalar node, or None for a plain weight of one that
    carries no gradient.  Index ``op_count`` denotes the skip candidate.
    """
    indices: List[int]
    weights: List[Optional[gc.Node]]

    @classmethod
    def hard(cls, draw: GumbelDraw) -> "LayerChoice":
        return cls([draw.hard_index], [gc.straight_through(draw.soft, draw.hard_index)])

    @classmethod
    def fixed(cls, index: int) -> "LayerChoice":
        return cls([int(index)], [None])

    @classmethod
    def soft(cls, draw: GumbelDraw) -> "LayerChoice":
        n = draw.soft.shape[0]
        return cls(list(range(n)), [gc.take(draw.soft, i) for i in range(n)])


@dataclass
class PathPair:
    primary: List[GumbelDraw]
    secondary: List[Optional[int]]
    mode: str
    gates: List[Optional[GumbelDraw]] = field(default_factory=list)
    secondary_gates: List[Optional[int]] = field(default_factory=list)


def skip_eligible(net, layer: int) -> bool:
    info = net.layers[layer]
    return info.layer_in_stage >= info.stage.min_layers and info.c_in == info.c_out


def layer_logits(net, layer: int, depth_mode: str) -> gc.Node:
    """Op logits at a layer; skip-in layers get an extra skip logit."""
    if depth_mode == "skip_in" and skip_eligible(net, layer):
        return gc.concat([net.alpha[layer], gc.take(net.skip_alpha, [layer])])
    return net.alpha[layer]


def gate_logits(net, layer: int) -> gc.Node:
    """Binary ``[keep, skip]`` logits for the skip-out gate."""
    return gc.concat([gc.take(net.skip_gate, [layer]), gc.constant(np.zeros(1))])


def sample_path_pair(net, tau: float, mode: str, rng, depth_mode: str = "sink") -> PathPair:
    if mode not in SECOND_PATH_MODES:
        raise InvalidArgumentError(f"unknown second-path mode {mode!r}")
    primary, secondary, gates, sgates = [], [], [], []
    for l in range(len(net.layers)):
        logits = layer_logits(net, l, depth_mode)
        n = logits.shape[0]
        draw = gumbel_weights(logits, sample_gumbel(n, rng), tau)
        primary.append(draw)
        secondary.append(second_path(mode, logits.value, draw.hard_index, rng, tau))
        if depth_mode == "skip_out" and skip_eligible(net, l):
            gl = gate_logits(net, l)
            gates.append(gumbel_weights(gl, sample_gumbel(2, rng), tau))
            sgates.append(None if mode == "none" else
                          gumbel_weights(gl.value, sample_gumbel(2, rng), tau).hard_index)
        else:
            gates.append(None)
            sgates.append(None)
    return PathPair(primary, secondary, mode, gates, sgates)


def depth_weights(beta, min_layers: int = 1) -> gc.Node:
    """Sink weights ``v = softmax(beta)`` restricted to depths ``>= min_layers``."""
    beta = beta if isinstance(beta, gc.Node) else gc.constant(beta)
    n = beta.shape[0]
    if min_layers <= 1:
        return gc.softmax(beta)
    if min_layers > n:
        raise InvalidShapeError(f"min_layers {min_layers} exceeds {n} layers")
    v = gc.softmax(gc.take(beta, list(range(min_layers - 1, n))))
    return gc.concat([gc.constant(np.zeros(min_layers - 1)), v])


def derived_depth(beta_values, min_layers: int = 1) -> int:
    b = np.asarray(beta_values)
    return min_layers + argmax_first(b[min_layers - 1:])


# ------------------------------------------------------------ forward passes


def _mix(terms: Sequence[Tuple[Optional[gc.Node], gc.Node]]) -> gc.Node:
    out = None
    for w, t in terms:
        t = t if w is None else gc.mul(t, w)
        out = t if out is None else gc.add(out, t)
    return out


def layer_forward(net, layer: int, x: gc.Node, choice: LayerChoice) -> gc.Node:
    """Shared residual plus the choice-weighted op branches.

    Weights multiply only the branches.  They sum to one (soft) or equal one
    (straight-through), so the forward value matches weighting whole blocks,
    but the op gradient is not swamped by the common residual.
    """
    spec = net.layers[layer]
    n_ops = net.op_count
    res = residual_path(spec.c_in, spec.c_out, x, net.shortcuts.get(layer))
    terms = [(w, op_branch(net.blocks[layer][i], x, spec.activation))
             for i, w in zip(choice.indices, choice.weights) if i != n_ops]
    if not terms:
        return res  # identity candidate alone
    out = _mix(terms)
    return out if res is None else gc.add(out, res)


def stage_latency_terms(v, rows: Sequence, depth_mode: str = "sink",
                        gate_probs: Optional[Sequence] = None,
                        weighting: str = "suffix") -> List[gc.Node]:
    """Per-layer latency contributions of one stage.

    ``rows`` holds ``(u, lats)`` per layer, ``u`` being the op weights
    (with a trailing skip entry for skip-in layers).  Sink mode scales each
    layer by its depth coefficient; skip-out scales by the keep probability.
    """
    terms = []
    coef = latency_coefficients(v, weighting) if depth_mode == "sink" else None
    for j, (u, lats) in enumerate(rows):
        lats = np.asarray(lats, dtype=np.float64)
        if u.shape[0] == lats.shape[0] + 1:
            lats = np.append(lats, 0.0)  # the skip candidate costs nothing
        term = gc.dot(u, lats)
        if coef is not None:
            term = gc.mul(gc.take(coef, j), term)
        elif gate_probs is not None and gate_probs[j] is not None:
            term = gc.mul(gate_probs[j], term)
        terms.append(term)
    return terms


def stage_forward(net, stage_pos: int, x: gc.Node, choices: Sequence[LayerChoice],
                  beta_stage=None, depth_mode: str = "sink",
                  gates: Optional[Sequence] = None,
                  latency_rows: Optional[Sequence] = None,
                  weighting: str = "suffix") -> Tuple[gc.Node, List[gc.Node]]:
    """Run one searchable stage under a depth relaxation.

    ``choices`` has one entry per stage layer.  ``gates`` (skip-out only)
    holds per-layer ``(choice, p_keep)`` pairs, with ``choice`` selecting
    over ``[keep, skip]``, or None where a layer cannot skip.
    ``latency_rows`` holds per-layer ``(u, lats)`` pairs for
    :func:`stage_latency_terms`.
    """
    ids = net.stage_layers[stage_pos]
    stage = net.layers[ids[0]].stage
    if len(choices) != len(ids):
        raise InvalidShapeError(f"{len(choices)} choices for {len(ids)} layers")
    if depth_mode not in DEPTH_MODES:
        raise InvalidArgumentError(f"unknown depth mode {depth_mode!r}")

    v = None
    if depth_mode == "sink":
        v = depth_weights(beta_stage, stage.min_layers)
        if v.shape[0] != len(ids):
            raise InvalidShapeError(f"beta has {v.shape[0]} entries for {len(ids)} layers")
        outs, h = [], x
        for l, c in zip(ids, choices):
            h = layer_forward(net, l, h, c)
            outs.append(h)
        x_out = outs[0] if len(outs) == 1 else gc.weighted_sum(v, outs)
    else:
        h = x
        for j, (l, c) in enumerate(zip(ids, choices)):
            gate = gates[j] if (depth_mode == "skip_out" and gates is not None) else None
            if gate is None:
                h = layer_forward(net, l, h, c)
            else:
                gchoice = gate[0]
                h = _mix([(w, layer_forward(net, l, h, c) if k == 0 else h)
                          for k, w in zip(gchoice.indices, gchoice.weights)])
        x_out = h
    terms = []
    if latency_rows is not None:
        probs = [g[1] if g is not None else None for g in gates] if gates else None
        terms = stage_latency_terms(v, latency_rows, depth_mode, probs, weighting)
    return x_out, terms


def relaxed_latency(net, u_rows: Sequence, lat_matrix: np.ndarray, depth_mode: str = "sink",
                    weighting: str = "suffix", gate_probs: Optional[Sequence] = None,
                    fixed_cost_ms: float = 0.0) -> gc.Node:
    """Differentiable network latency from per-layer op weights and ``beta``."""
    total = gc.constant(fixed_cost_ms)
    for sp, ids in enumerate(net.stage_layers):
        stage = net.layers[ids[0]].stage
        v = depth_weights(net.beta[sp], stage.min_layers) if depth_mode == "sink" else None
        rows = [(u_rows[l], lat_matrix[l]) for l in ids]
        probs = [gate_probs[l] for l in ids] if gate_probs is not None else None
        for t in stage_latency_terms(v, rows, depth_mode, probs, weighting):
            total = gc.add(total, t)
    return total


def count_depth_redundancy(depth_mode: str, layers: int, ops: int) -> Tuple[int, int]:
    """Enumerate hard depth/op decisions; return (distinct architectures, raw combinations).

    A derived architecture is the sequence of executed ops.  Sink mode
    decides a depth then ops for the kept layers; skip-in gives each layer
    ``ops + 1`` choices; skip-out gives each layer an op and a keep/skip bit.
    """
    if layers < 1 or ops < 1:
        raise InvalidArgumentError("need at least one layer and one op")
    per_layer = {"sink": None, "skip_in": ops + 1, "skip_out": 2 * ops}
    if depth_mode not in per_layer:
        raise InvalidArgumentError(f"unknown depth mode {depth_mode!r}")
    if depth_mode == "sink":
        raw_count = sum(ops ** d for d in range(1, layers + 1))
    else:
        raw_count = per_layer[depth_mode] ** layers
    if raw_count > 1_000_000:
        raise InvalidArgumentError(f"{raw_count} combinations is too many to enumerate")

    archs, raw = set(), 0
    if depth_mode == "sink":
        for d in range(1, layers + 1):
            for seq in itertools.product(range(ops), repeat=d):
                archs.add(seq)
                raw += 1
    elif depth_mode == "skip_in":
        for seq in itertools.product(range(ops + 1), repeat=layers):
            archs.add(tuple(o for o in seq if o != ops))
            raw += 1
    else:
        for seq in itertools.product(itertools.product(range(ops), (True, False)), repeat=layers):
            archs.add(tuple(o for o, keep in seq if keep))
            raw += 1
    return len(archs), raw
