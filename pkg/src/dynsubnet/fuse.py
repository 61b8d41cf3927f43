"""Pool re-selection, BN post-statistics, and shared-weight fused training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvariantError, NumericError
from .nn import SGD, TrainHyper, backward, check_labels, cross_entropy, evaluate_accuracy, forward
from .pool import SubnetPool
from .runtime import DynamicModel
from .subnet import apply_config, full_config, gradient_masks, scatter_grads


def reselect(pool):
    """Keep entries whose accuracy beats every smaller survivor (strictly)."""
    if len(pool) == 0:
        raise InvariantError("cannot re-select an empty pool")
    kept = []
    best = -math.inf
    for entry in reversed(pool.entries):
        if entry.accuracy > best:
            kept.append(entry)
            best = entry.accuracy
    return SubnetPool(kept[::-1])


def recal_inputs(data, batches, batch_size=128, seed=0):
    """The fixed list of input batches used for BN recalibration."""
    rng = np.random.default_rng(seed)
    xs = []
    for x, _ in data.batches(batch_size, rng):
        if len(xs) == batches:
            break
        xs.append(x)
    return xs


def recalibrate_graph(graph, xs):
    """Overwrite the graph's BN running statistics with pooled batch statistics over ``xs``."""
    bn = graph.bn_layers()
    if not bn:
        return {}
    if not xs:
        raise ConfigurationError("BN recalibration needs at least one batch")
    acc = {}
    for x in xs:
        _, tape = forward(graph, x, train=True, update_stats=False)
        for i, (mean, var, n) in tape["bn_batch"].items():
            mean = mean.astype(np.float64)
            m2 = var.astype(np.float64) * n
            if i not in acc:
                acc[i] = [n, mean, m2]
                continue
            na, ma, m2a = acc[i]
            tot = na + n
            delta = mean - ma
            acc[i] = [tot, ma + delta * n / tot, m2a + m2 + delta * delta * na * n / tot]
    stats = {}
    for i, (n, mean, m2) in acc.items():
        dtype = graph.weights[f"{i}.running_mean"].dtype
        stats[i] = (mean.astype(dtype), (m2 / n).astype(dtype))
        graph.weights[f"{i}.running_mean"], graph.weights[f"{i}.running_var"] = stats[i]
    return stats


def bn_recalibrate(model, config, data, batches, batch_size=128, seed=0, allow_empty=False):
    """Slice ``model`` by ``config`` and recompute its BN statistics.

    Returns ``(sliced graph, {bn layer: (mean, var)})``. The shared weights
    are not modified.
    """
    if batches < 1 and model.bn_layers():
        raise ConfigurationError("BN recalibration needs batches >= 1 when the model has BN layers")
    graph = apply_config(model, config, allow_empty=allow_empty)
    return graph, recalibrate_graph(graph, recal_inputs(data, batches, batch_size, seed))


def subnet_grads(model, config, batch, allow_empty=False):
    """Loss of one sub-net on ``batch`` and its gradients in super-network shape."""
    x, y = batch
    y = check_labels(y, model.num_classes)
    masks, plan = gradient_masks(model, config, allow_empty)
    graph = apply_config(model, config, allow_empty)
    logits, tape = forward(graph, x, train=True, update_stats=False)
    loss, d = cross_entropy(logits, y)
    grads = scatter_grads(model, plan, backward(graph, tape, d))
    return loss, grads, masks


def subnet_train_step(model, config, batch, opt):
    """SGD step on the shared weights through one sub-net; outside elements stay untouched."""
    loss, grads, masks = subnet_grads(model, config, batch)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} while training a sub-net")
    opt.step(model.weights, grads, masks)
    return loss


def sandwich_sample(pool, R, rng):
    """Largest and smallest entries plus ``R`` distinct random middles (sorted indices)."""
    n = pool if isinstance(pool, int) else len(pool)
    if n < 1:
        raise InvariantError("cannot sample from an empty pool")
    if n <= R + 2:
        return list(range(n))
    middles = rng.choice(np.arange(1, n - 1), size=R, replace=False)
    return sorted({0, n - 1, *(int(m) for m in middles)})


@dataclass
class FusedConfig:
    epochs: int = 10
    subnets_per_batch: int = 2
    hyper: TrainHyper = field(default_factory=lambda: TrainHyper(0.02, 0.9, 64, 0))
    bn_recal_batches: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("fused training needs at least one epoch")
        if self.subnets_per_batch < 0:
            raise ConfigurationError("subnets_per_batch must be >= 0")


def fused_step(model, pool, indices, batch, opt):
    """Sum the losses of the chosen sub-nets, accumulate shared gradients, take one step."""
    total = 0.0
    grads, masks = {}, {}
    for k in indices:
        loss, g, m = subnet_grads(model, pool[k].config, batch)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} from sub-net {k}")
        total += loss
        for name, arr in g.items():
            if name in grads:
                grads[name] += arr
                masks[name] |= m[name]
            else:
                grads[name] = arr
                masks[name] = m[name].copy()
    opt.step(model.weights, grads, masks)
    return total


def fused_train(model, pool, cfg, data, val=None, log=None):
    """Train the shared weights over the pool, then store per-sub-net BN statistics.

    With ``val``, pool accuracies are re-measured after training.
    """
    if len(pool) == 0:
        raise InvariantError("cannot fuse-train an empty pool")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(cfg.hyper.learning_rate, cfg.hyper.momentum)
    for epoch in range(cfg.epochs):
        total = count = 0
        for batch in data.batches(cfg.hyper.batch_size, rng):
            idx = sandwich_sample(len(pool), cfg.subnets_per_batch, rng)
            total += fused_step(model, pool, idx, batch, opt)
            count += 1
        if log is not None:
            log(f"fused epoch {epoch + 1}/{cfg.epochs} mean summed loss {total / max(count, 1):.4f}")
    stats = []
    entries = []
    for k, entry in enumerate(pool):
        graph, s = bn_recalibrate(model, entry.config, data, cfg.bn_recal_batches,
                                  cfg.hyper.batch_size, cfg.seed)
        stats.append(s)
        entries.append(entry if val is None else entry.with_accuracy(evaluate_accuracy(graph, val)))
    if pool[0].config == full_config(model):
        for layer, (mean, var) in stats[0].items():
            model.weights[f"{layer}.running_mean"] = mean.copy()
            model.weights[f"{layer}.running_var"] = var.copy()
    return DynamicModel(model, SubnetPool(entries), stats)
