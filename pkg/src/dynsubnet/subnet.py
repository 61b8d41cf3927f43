"""Sub-net configurations: retained output-channel sets per prunable layer.

A sub-net is realized by structural slicing of the super-network. Each
prunable layer keeps a sorted index set of its output channels; consumers
have their input dimension sliced to match. Layers whose outputs meet at a
residual add form a tie set and must keep identical index sets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, InvariantError, TieSetError
from .nn import ModelGraph, infer_shapes, layer_sources


@dataclass(frozen=True)
class SubnetConfig:
    """Retained output channels (ascending tuples) keyed by prunable layer index."""

    retained: tuple[tuple[int, tuple[int, ...]], ...]

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(sorted((int(k), tuple(sorted(int(i) for i in v))) for k, v in d.items())))

    def as_dict(self):
        return {k: v for k, v in self.retained}

    def __getitem__(self, layer):
        return self.as_dict()[layer]

    def layers(self):
        return [k for k, _ in self.retained]

    def total_channels(self):
        return sum(len(v) for _, v in self.retained)

    def issubset(self, other):
        big = other.as_dict()
        return all(k in big and set(v) <= set(big[k]) for k, v in self.retained)

    def to_records(self):
        return [{"layer": k, "count": len(v), "indices": list(v)} for k, v in self.retained]

    @classmethod
    def from_records(cls, records):
        return cls.from_dict({r["layer"]: r["indices"] for r in records})


@dataclass(frozen=True)
class CostReport:
    flops: int
    params: int
    size_ratio: float


class TieSets:
    """Union of prunable layers whose output channels must be pruned jointly.

    ``units`` maps a unit id (smallest member index) to its member layers;
    each unit is one search decision.
    """

    def __init__(self, model: ModelGraph):
        layers = model.layers
        parent = {}

        def find(a):
            while parent.setdefault(a, a) != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

        source = {}
        for i, spec in enumerate(layers):
            if spec.kind in ("conv2d", "linear"):
                source[i] = i
                find(i)
            elif spec.kind == "residual-add":
                a, b = (source.get(j) for j in spec.inputs)
                if a is not None and b is not None:
                    union(a, b)
                source[i] = a if a is not None else b
            elif spec.kind == "flatten":
                source[i] = None
            else:
                source[i] = source.get(i - 1)
        named = {}
        for i, spec in enumerate(layers):
            if spec.tie_group is not None:
                if spec.kind not in ("conv2d", "linear"):
                    raise ConfigurationError(f"layer {i}: tie_group only applies to conv2d/linear")
                if spec.tie_group in named:
                    union(named[spec.tie_group], i)
                else:
                    named[spec.tie_group] = i

        groups = {}
        for i in source:
            if layers[i].kind in ("conv2d", "linear"):
                groups.setdefault(find(i), []).append(i)
        self.units = {}
        self.names = {}
        for root, members in groups.items():
            flags = {layers[m].prunable for m in members}
            if flags == {True, False}:
                raise ConfigurationError(
                    f"layers {members} share channels through a residual add; mark all or none prunable"
                )
            sizes = {layers[m].out_channels for m in members}
            if len(sizes) > 1:
                raise ConfigurationError(f"tied layers {members} differ in width {sorted(sizes)}")
            if True in flags:
                self.units[root] = sorted(members)
                label = next((layers[m].tie_group for m in members if layers[m].tie_group), None)
                self.names[root] = label or (f"tie{root}" if len(members) > 1 else f"layer{root}")
        self.unit_of = {m: u for u, ms in self.units.items() for m in ms}

    def width(self, model, unit):
        return model.layers[unit].out_channels


def full_config(model):
    return SubnetConfig.from_dict(
        {i: range(model.layers[i].out_channels) for i in model.prunable_layers()}
    )


def config_from_units(model, ties, unit_sets):
    """Expand a unit id -> index set mapping to every tied member layer."""
    d = {}
    for unit, idx in unit_sets.items():
        for m in ties.units[unit]:
            d[m] = idx
    return SubnetConfig.from_dict(d)


def validate_config(model, config, allow_empty=False, ties=None):
    ties = ties or TieSets(model)
    d = config.as_dict()
    expected = set(model.prunable_layers())
    if set(d) != expected:
        raise InvariantError(f"config covers layers {sorted(d)}, expected prunable layers {sorted(expected)}")
    for layer, idx in d.items():
        p = model.layers[layer].out_channels
        if not idx and not allow_empty:
            raise InvariantError(f"layer {layer}: retained set is empty")
        if idx and (idx[0] < 0 or idx[-1] >= p):
            raise InvariantError(f"layer {layer}: indices must lie in [0, {p})")
        if len(set(idx)) != len(idx):
            raise InvariantError(f"layer {layer}: duplicate indices")
    for unit, members in ties.units.items():
        sets = {d[m] for m in members}
        if len(sets) > 1:
            raise TieSetError(ties.names[unit], f"layers {members} retain different channels")
    return d


def slice_plan(model, config, allow_empty=False):
    """Per-layer ``(out_idx, in_idx)`` arrays in super-network numbering."""
    retained = validate_config(model, config, allow_empty)
    out_idx = {-1: np.arange(model.input_shape[0])}
    plan = []
    for i, spec in enumerate(model.layers):
        srcs = layer_sources(model.layers, i)
        in_idx = out_idx[srcs[0]]
        if spec.kind in ("conv2d", "linear"):
            o = np.asarray(retained[i], dtype=np.intp) if spec.prunable else np.arange(spec.out_channels)
        elif spec.kind == "flatten":
            src_shape = tuple(model.input_shape) if srcs[0] == -1 else model.shapes[srcs[0]]
            hw = int(np.prod(src_shape[1:]))
            o = (in_idx[:, None] * hw + np.arange(hw)[None, :]).reshape(-1)
        else:
            o = in_idx
        out_idx[i] = o
        plan.append((o, in_idx))
    return plan


def apply_config(model, config, allow_empty=False):
    """Return an independent sliced copy of ``model`` for ``config``."""
    plan = slice_plan(model, config, allow_empty)
    layers = []
    weights = {}
    for i, (spec, (o, inn)) in enumerate(zip(model.layers, plan)):
        s = replace(spec)
        if spec.kind == "conv2d":
            weights[f"{i}.weight"] = model.weights[f"{i}.weight"][np.ix_(o, inn)]
            weights[f"{i}.bias"] = model.weights[f"{i}.bias"][o]
            s.in_channels, s.out_channels = len(inn), len(o)
        elif spec.kind == "linear":
            weights[f"{i}.weight"] = model.weights[f"{i}.weight"][np.ix_(o, inn)]
            weights[f"{i}.bias"] = model.weights[f"{i}.bias"][o]
            s.in_channels, s.out_channels = len(inn), len(o)
        elif spec.kind == "batchnorm2d":
            for name in ("weight", "bias", "running_mean", "running_var"):
                weights[f"{i}.{name}"] = model.weights[f"{i}.{name}"][o]
            s.in_channels = s.out_channels = len(o)
        layers.append(s)
    in_shape = tuple(model.input_shape)
    shapes = infer_shapes(layers, in_shape, model.num_classes, allow_empty=True)
    return ModelGraph(layers, weights, model.num_classes, in_shape, shapes)


def gradient_masks(model, config, allow_empty=False):
    """Boolean masks marking the super-network elements a sub-net reads."""
    plan = slice_plan(model, config, allow_empty)
    masks = {}
    for i, (spec, (o, inn)) in enumerate(zip(model.layers, plan)):
        if spec.kind in ("conv2d", "linear"):
            m = np.zeros(model.weights[f"{i}.weight"].shape, bool)
            m[np.ix_(o, inn)] = True
            masks[f"{i}.weight"] = m
            b = np.zeros(spec.out_channels, bool)
            b[o] = True
            masks[f"{i}.bias"] = b
        elif spec.kind == "batchnorm2d":
            b = np.zeros(spec.out_channels, bool)
            b[o] = True
            masks[f"{i}.weight"] = b
            masks[f"{i}.bias"] = b.copy()
    return masks, plan


def scatter_grads(model, plan, grads, into=None):
    """Add sliced-shape gradients back into super-network-shaped buffers."""
    out = {} if into is None else into
    for i, (spec, (o, inn)) in enumerate(zip(model.layers, plan)):
        if spec.kind not in ("conv2d", "linear", "batchnorm2d"):
            continue
        for name in ("weight", "bias"):
            key = f"{i}.{name}"
            if key not in grads:
                continue
            buf = out.get(key)
            if buf is None:
                buf = out[key] = np.zeros_like(model.weights[key])
            if name == "weight" and spec.kind != "batchnorm2d":
                buf[np.ix_(o, inn)] += grads[key]
            else:
                buf[o] += grads[key]
    return out


def _layer_cost(spec, shape, in_ch, out_ch):
    if spec.kind == "conv2d":
        k2 = spec.kernel * spec.kernel
        flops = 2 * in_ch * out_ch * k2 * shape[1] * shape[2]
        params = in_ch * out_ch * k2 + out_ch
    elif spec.kind == "linear":
        flops = 2 * in_ch * out_ch
        params = in_ch * out_ch + out_ch
    elif spec.kind == "batchnorm2d":
        flops, params = 0, 2 * out_ch
    else:
        flops = params = 0
    return flops, params


def cost_of(model, config=None, allow_empty=False):
    """FLOPs (2 x MACs over conv/linear) and parameter count of a sub-net."""
    full = _raw_cost(model, slice_plan(model, full_config(model)))
    if config is None:
        flops, params = full
    else:
        flops, params = _raw_cost(model, slice_plan(model, config, allow_empty))
    return CostReport(int(flops), int(params), params / full[1])


def _raw_cost(model, plan):
    flops = params = 0
    for spec, shape, (o, inn) in zip(model.layers, model.shapes, plan):
        f, p = _layer_cost(spec, shape, len(inn), len(o))
        flops += f
        params += p
    return flops, params


def round_half_up(x):
    return int(math.floor(x + 0.5 + 1e-9))


def uniform_config(model, multiplier):
    """Keep the first ``max(1, round_half_up(m * p))`` channels of every prunable layer."""
    if not 0 < multiplier <= 1:
        raise ConfigurationError(f"width multiplier must lie in (0, 1], got {multiplier}")
    return SubnetConfig.from_dict(
        {
            i: range(max(1, round_half_up(multiplier * model.layers[i].out_channels)))
            for i in model.prunable_layers()
        }
    )


def check_nesting(configs):
    """True iff each config (ordered largest first) contains the next one."""
    configs = list(configs)
    return all(b.issubset(a) for a, b in zip(configs, configs[1:]))


def dumps_config(config):
    return json.dumps(config.to_records())
