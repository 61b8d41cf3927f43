"""Run-time width switching over a fused pool, plus latency/FLOPs benchmarking."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import ConfigurationError, FormatError
from .nn import evaluate_accuracy, predict
from .pool import SubnetPool
from .subnet import apply_config

BN_BLOCK = "subnet.{k}.bn.{layer}.{stat}"


@dataclass
class DynamicModel:
    """Shared full weights, a pool of sub-nets, and per-sub-net BN statistics.

    Sliced execution graphs are built lazily and memoized per index; they are
    read-only views of the shared weights as of construction.
    """

    model: object
    pool: SubnetPool
    bn_stats: list = field(default_factory=list)
    active: int = 0
    _graphs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.bn_stats:
            self.bn_stats = [{} for _ in self.pool]
        if len(self.bn_stats) != len(self.pool):
            raise ConfigurationError("need one BN statistics record per pool entry")

    def _check(self, index):
        if not 0 <= index < len(self.pool):
            raise IndexError(f"sub-net index {index} out of range; valid indices are 0..{len(self.pool) - 1}")

    def graph(self, index):
        self._check(index)
        g = self._graphs.get(index)
        if g is None:
            g = apply_config(self.model, self.pool[index].config)
            for layer, (mean, var) in self.bn_stats[index].items():
                g.weights[f"{layer}.running_mean"] = mean
                g.weights[f"{layer}.running_var"] = var
            self._graphs[index] = g
        return g

    def switch(self, index):
        self._check(index)
        self.active = index
        return self.graph(index)

    def infer(self, x):
        return predict(self.graph(self.active), x)

    def accuracy(self, index, dataset):
        return evaluate_accuracy(self.graph(index), dataset)

    def invalidate(self):
        self._graphs.clear()


def switch_and_infer(dm, subnet_index, x):
    dm.switch(subnet_index)
    return dm.infer(x)


@dataclass
class LatencyRow:
    subnet_id: int
    params: int
    flops: int
    top1_acc: float
    latency_ms: float


@dataclass
class LatencyReport:
    rows: list[LatencyRow]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subnet_id", "params", "flops", "top1_acc", "latency_ms"])
            for r in self.rows:
                w.writerow([r.subnet_id, r.params, r.flops, f"{r.top1_acc:.6f}", f"{r.latency_ms:.4f}"])


def benchmark(dm, batch_size=1, warmup=3, runs=20, seed=0, accuracies=None):
    """Median forward latency per sub-net after ``warmup`` discarded runs."""
    if runs < 1:
        raise ConfigurationError("benchmark needs at least one timed run")
    x = np.random.default_rng(seed).standard_normal((batch_size, *dm.model.input_shape)).astype(np.float32)
    rows = []
    for k, entry in enumerate(dm.pool):
        dm.switch(k)
        for _ in range(warmup):
            dm.infer(x)
        times = []
        for _ in range(runs):
            t0 = time.perf_counter()
            dm.infer(x)
            times.append((time.perf_counter() - t0) * 1e3)
        acc = entry.accuracy if accuracies is None else accuracies[k]
        rows.append(LatencyRow(k, entry.cost.params, entry.cost.flops, acc, statistics.median(times)))
    rows.sort(key=lambda r: (-r.flops, r.subnet_id))
    return LatencyReport(rows)


def save_dynamic(dm, ckpt_path, pool_path):
    tensors = dict(dm.model.weights)
    for k, stats in enumerate(dm.bn_stats):
        for layer, (mean, var) in stats.items():
            tensors[BN_BLOCK.format(k=k, layer=layer, stat="running_mean")] = mean
            tensors[BN_BLOCK.format(k=k, layer=layer, stat="running_var")] = var
    checkpoint.save(ckpt_path, tensors)
    dm.pool.save(pool_path)


def load_dynamic(model, ckpt_path, pool_path):
    """Restore weights into ``model`` (a freshly built graph) and attach the pool."""
    pool = SubnetPool.load(pool_path)
    rest = checkpoint.restore_weights(model, checkpoint.load(ckpt_path))
    stats = [{} for _ in pool]
    for name, arr in rest.items():
        parts = name.split(".")
        if len(parts) != 5 or parts[0] != "subnet" or parts[2] != "bn":
            continue
        k, layer, stat = int(parts[1]), int(parts[3]), parts[4]
        if k >= len(pool):
            raise FormatError(f"BN block {name!r} refers to a sub-net outside the pool")
        mean, var = stats[k].get(layer, (None, None))
        stats[k][layer] = (arr, var) if stat == "running_mean" else (mean, arr)
    return DynamicModel(model, pool, stats)
