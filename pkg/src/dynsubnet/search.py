"""Progressive sub-net search over ranked channel groups, and the brute-force oracle.

Each iteration proposes, for every unit (layer or tie set) still above its
one-group floor, the sub-net with that unit's next group removed. The most
accurate proposal is committed and appended to the pool; if its accuracy is
below the threshold the shared weights are fine-tuned through it. The loop
ends once the parameter ratio reaches ``min_ratio``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigurationError, SizeError
from .fuse import recal_inputs, recalibrate_graph, subnet_train_step
from .nn import SGD, evaluate_accuracy
from .pool import PoolEntry, SubnetPool
from .subnet import TieSets, apply_config, config_from_units, cost_of, full_config

log = logging.getLogger(__name__)

ORACLE_MAX_CHANNELS = 64


@dataclass
class SearchConfig:
    group_count: int = 4
    threshold: float = 0.5
    min_ratio: float = 0.25
    fine_tune_steps: int = 200
    fine_tune_lr: float = 0.01
    fine_tune_momentum: float = 0.9
    val_subset_size: int = 5000
    bn_recal_batches: int = 10
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.group_count < 1:
            raise ConfigurationError("group_count must be >= 1")
        if not 0 <= self.threshold <= 1:
            raise ConfigurationError("threshold must lie in [0, 1]")
        if not 0 < self.min_ratio <= 1:
            raise ConfigurationError("min_ratio must lie in (0, 1]")
        if self.fine_tune_steps < 0 or self.fine_tune_lr < 0:
            raise ConfigurationError("fine-tuning budget must be nonnegative")
        if self.val_subset_size < 1 or self.bn_recal_batches < 0:
            raise ConfigurationError("val_subset_size must be positive and bn_recal_batches nonnegative")


@dataclass
class IterationRecord:
    iteration: int
    candidates: list
    chosen_layer: int
    accuracy_before: float
    accuracy_after: float
    fine_tuned: bool
    fine_tune_steps: int
    params: int
    flops: int
    chosen_channel: int | None = None


@dataclass
class SearchTrace:
    records: list = field(default_factory=list)
    status: str = "ok"
    val_indices: list = field(default_factory=list)

    @property
    def iterations(self):
        return len(self.records)

    @property
    def evaluations(self):
        return sum(len(r.candidates) for r in self.records)

    @property
    def fine_tune_steps(self):
        return sum(r.fine_tune_steps for r in self.records)

    def summary(self):
        return {
            "status": self.status,
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "fine_tune_steps": self.fine_tune_steps,
        }

    def to_jsonl(self):
        lines = [json.dumps({"summary": self.summary(), "val_indices": list(map(int, self.val_indices))})]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "chosen_layer", "params", "flops", "accuracy", "fine_tuned"])
        for r in self.records:
            w.writerow([r.iteration, r.chosen_layer, r.params, r.flops, f"{r.accuracy_before:.6f}", int(r.fine_tuned)])
        return buf.getvalue()


class Evaluator:
    """Validation accuracy of sub-nets against a fixed subset and fixed recalibration batches."""

    def __init__(self, model, data, cfg, callback=None):
        self.model = model
        self.cfg = cfg
        val = data.val
        if len(val) > cfg.val_subset_size:
            idx = np.sort(np.random.default_rng(cfg.seed).choice(len(val), cfg.val_subset_size, replace=False))
        else:
            idx = np.arange(len(val))
        self.val_indices = idx
        self.val = val.subset(idx)
        self.recal = recal_inputs(data.train, cfg.bn_recal_batches, cfg.batch_size, cfg.seed)
        self.callback = callback
        self.count = 0

    def __call__(self, config, allow_empty=False, counted=True):
        graph = apply_config(self.model, config, allow_empty)
        if self.cfg.bn_recal_batches > 0:
            recalibrate_graph(graph, self.recal)
        acc = evaluate_accuracy(graph, self.val)
        if counted:
            self.count += 1
            if self.callback is not None:
                self.callback(config, acc)
        return acc


def evaluate_candidate(model, config, data, cfg):
    """Accuracy of one sub-net on the seeded validation subset (BN recalibrated)."""
    return Evaluator(model, data, cfg)(config, counted=False)


def _batch_stream(dataset, batch_size, rng):
    while True:
        yield from dataset.batches(batch_size, rng)


def fine_tune_conditional(model, config, accuracy, cfg, data, rng=None):
    """Fine-tune the shared weights through ``config`` only if ``accuracy < threshold``.

    Returns the number of SGD steps taken.
    """
    if accuracy >= cfg.threshold or cfg.fine_tune_steps == 0:
        return 0
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    opt = SGD(cfg.fine_tune_lr, cfg.fine_tune_momentum)
    stream = _batch_stream(data.train, cfg.batch_size, rng)
    for _ in range(cfg.fine_tune_steps):
        subnet_train_step(model, config, next(stream), opt)
    return cfg.fine_tune_steps


def _check_ranking(model, ties, ranking):
    for unit, members in ties.units.items():
        for m in members:
            if m not in ranking.groups:
                raise ConfigurationError(f"ranking does not cover prunable layer {m}")
        order = np.concatenate(ranking.groups[unit])
        if sorted(order.tolist()) != list(range(model.layers[unit].out_channels)):
            raise ConfigurationError(f"ranking groups for layer {unit} are not a permutation of its channels")


def run_search(model, ranking, cfg, data, callback=None):
    """Progressively shrink ``model`` (in place) and return ``(SubnetPool, SearchTrace)``.

    ``data`` provides ``train`` (fine-tuning and BN recalibration) and ``val``.
    ``callback(config, accuracy)`` fires once per candidate evaluation.
    """
    ties = TieSets(model)
    _check_ranking(model, ties, ranking)
    groups = {u: ranking.groups[u] for u in ties.units}
    removed = {u: 0 for u in ties.units}

    def config_for(state):
        return config_from_units(
            model, ties, {u: np.sort(np.concatenate(groups[u][state[u]:])).tolist() for u in ties.units}
        )

    ev = Evaluator(model, data, cfg, callback)
    trace = SearchTrace(val_indices=ev.val_indices.tolist())
    current = full_config(model)
    cost = cost_of(model, current)
    pool = [PoolEntry(current, ev(current, counted=False), cost)]
    it = 0
    while cost.size_ratio > cfg.min_ratio:
        eligible = [u for u in sorted(ties.units) if removed[u] < len(groups[u]) - 1]
        if not eligible:
            trace.status = "floor"
            warnings.warn(
                f"size ratio {cost.size_ratio:.3f} cannot reach {cfg.min_ratio}: every layer is at its one-group floor",
                RuntimeWarning,
                stacklevel=2,
            )
            break
        candidates = []
        for u in eligible:
            state = dict(removed)
            state[u] += 1
            cand = config_for(state)
            c = cost_of(model, cand)
            acc = ev(cand)
            candidates.append((acc, cost.flops - c.flops, -u, u, cand, c))
        acc, _, _, unit, chosen, cost = max(candidates, key=lambda t: t[:3])
        removed[unit] += 1
        pool.append(PoolEntry(chosen, acc, cost))
        steps = fine_tune_conditional(model, chosen, acc, cfg, data, np.random.default_rng([cfg.seed, it]))
        after = ev(chosen, counted=False) if steps else acc
        trace.records.append(
            IterationRecord(
                iteration=it,
                candidates=[[t[3], t[0], t[5].flops] for t in candidates],
                chosen_layer=unit,
                accuracy_before=acc,
                accuracy_after=after,
                fine_tuned=bool(steps),
                fine_tune_steps=steps,
                params=cost.params,
                flops=cost.flops,
            )
        )
        log.info("iteration %d: layer %d acc %.4f ratio %.3f%s", it, unit, acc, cost.size_ratio,
                 " (fine-tuned)" if steps else "")
        it += 1
    return SubnetPool(pool), trace


def brute_force_oracle(model, data, cfg, callback=None, max_channels=ORACLE_MAX_CHANNELS):
    """Channel-by-channel greedy shrink evaluating every remaining channel each iteration.

    Runs until every prunable layer is empty, so a net with n prunable
    channels costs n(n+1)/2 evaluations. No ranking and no fine-tuning.
    """
    ties = TieSets(model)
    total = sum(model.layers[u].out_channels for u in ties.units)
    if total > max_channels:
        raise SizeError(f"oracle is limited to {max_channels} prunable channels; model has {total}")
    remaining = {u: list(range(model.layers[u].out_channels)) for u in ties.units}
    ev = Evaluator(model, data, cfg, callback)
    trace = SearchTrace(val_indices=ev.val_indices.tolist())
    current = full_config(model)
    cost = cost_of(model, current)
    pool = [PoolEntry(current, ev(current, counted=False), cost)]
    it = 0
    while any(remaining.values()):
        candidates = []
        for u in sorted(remaining):
            for ch in remaining[u]:
                state = dict(remaining)
                state[u] = [c for c in remaining[u] if c != ch]
                cand = config_from_units(model, ties, state)
                c = cost_of(model, cand, allow_empty=True)
                acc = ev(cand, allow_empty=True)
                candidates.append((acc, cost.flops - c.flops, -u, -ch, u, ch, cand, c))
        acc, _, _, _, unit, ch, chosen, cost = max(candidates, key=lambda t: t[:4])
        remaining[unit] = [c for c in remaining[unit] if c != ch]
        pool.append(PoolEntry(chosen, acc, cost))
        trace.records.append(
            IterationRecord(
                iteration=it,
                candidates=[[t[4], t[0], t[7].flops] for t in candidates],
                chosen_layer=unit,
                accuracy_before=acc,
                accuracy_after=acc,
                fine_tuned=False,
                fine_tune_steps=0,
                params=cost.params,
                flops=cost.flops,
                chosen_channel=ch,
            )
        )
        it += 1
    return SubnetPool(pool), trace


def reevaluate(model, pool, cfg, data):
    """Re-measure every entry's accuracy with the current (post-search) weights."""
    ev = Evaluator(model, data, cfg)
    return SubnetPool([e.with_accuracy(ev(e.config, counted=False)) for e in pool])
