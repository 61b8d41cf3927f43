"""Channel-wise trainable weight noise and the importance rankings built from it.

Each prunable layer gets a per-output-channel magnitude ``beta``. Training
perturbs weights as ``w + beta[c] * eta`` with ``eta ~ N(0, var(w))``, drawn
once per mini-batch; channels that end up tolerating large noise are pruned
first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericError
from .nn import SGD, backward, check_labels, cross_entropy, forward
from .subnet import TieSets


@dataclass
class NoiseParams:
    beta: dict[int, np.ndarray]
    enabled: bool = True


@dataclass
class NoiseTrainConfig:
    epochs: int = 3
    beta_init: float = 0.25
    resample: str = "per-batch"
    train_weights: bool = True
    seed: int = 0
    learning_rate: float = 0.01
    beta_learning_rate: float = 0.002
    momentum: float = 0.9
    batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("noise training needs at least one epoch")
        if self.resample != "per-batch":
            raise ConfigurationError("only per-batch noise resampling is supported")


@dataclass
class ChannelRanking:
    """Per prunable layer: prune order (first to last) and its contiguous groups."""

    order: dict[int, np.ndarray]
    groups: dict[int, list[np.ndarray]]

    def to_json(self):
        return {
            str(k): {"order": self.order[k].tolist(), "groups": [g.tolist() for g in self.groups[k]]}
            for k in sorted(self.order)
        }

    @classmethod
    def from_json(cls, d):
        order = {int(k): np.asarray(v["order"], dtype=np.intp) for k, v in d.items()}
        groups = {int(k): [np.asarray(g, dtype=np.intp) for g in v["groups"]] for k, v in d.items()}
        return cls(order, groups)


def attach_noise(model, beta_init=0.25, layers=None):
    layers = model.prunable_layers() if layers is None else list(layers)
    for i in layers:
        if not model.layers[i].prunable:
            raise ConfigurationError(f"noise can only be attached to prunable layers; layer {i} is not")
    return NoiseParams({i: np.full(model.layers[i].out_channels, beta_init, np.float32) for i in layers})


def sample_eta(model, noise, rng):
    """One draw of eta per noisy layer, scaled by the layer's weight standard deviation."""
    eta = {}
    for i in sorted(noise.beta):
        w = model.weights[f"{i}.weight"]
        eta[i] = rng.normal(0.0, float(w.std()), w.shape).astype(w.dtype)
    return eta


def perturbed_weights(model, noise, eta):
    weights = dict(model.weights)
    if not noise.enabled:
        return weights
    for i, beta in noise.beta.items():
        w = model.weights[f"{i}.weight"]
        shape = (-1,) + (1,) * (w.ndim - 1)
        weights[f"{i}.weight"] = w + beta.astype(w.dtype).reshape(shape) * eta[i]
    return weights


def noisy_loss_and_grads(model, noise, batch, eta, train=True, update_stats=False):
    """Loss on perturbed weights plus gradients for weights and for each beta."""
    x, y = batch
    y = check_labels(y, model.num_classes)
    weights = perturbed_weights(model, noise, eta)
    logits, tape = forward(model, x, train=train, weights=weights, update_stats=update_stats)
    loss, d = cross_entropy(logits, y)
    grads = backward(model, tape, d, weights=weights)
    beta_grads = {}
    for i in noise.beta:
        g = grads[f"{i}.weight"]
        beta_grads[i] = (g * eta[i]).reshape(g.shape[0], -1).sum(axis=1)
    return loss, grads, beta_grads


def noisy_train_step(model, noise, batch, cfg, rng, weight_opt=None, beta_opt=None):
    """One step of noise-injected training; updates beta, and weights if ``cfg.train_weights``."""
    eta = sample_eta(model, noise, rng)
    loss, grads, beta_grads = noisy_loss_and_grads(model, noise, batch, eta, update_stats=cfg.train_weights)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} during noise training")
    if cfg.train_weights:
        weight_opt = weight_opt or SGD(cfg.learning_rate, cfg.momentum)
        weight_opt.step(model.weights, grads)
    beta_opt = beta_opt or SGD(cfg.beta_learning_rate, cfg.momentum)
    beta_opt.step({str(i): b for i, b in noise.beta.items()},
                  {str(i): g.astype(np.float32) for i, g in beta_grads.items()})
    return loss


def train_noise(model, dataset, cfg, noise=None, log=None):
    """Attach (or continue) noise and train for ``cfg.epochs``; returns ``(noise, losses)``."""
    noise = noise or attach_noise(model, cfg.beta_init)
    rng = np.random.default_rng(cfg.seed)
    weight_opt = SGD(cfg.learning_rate, cfg.momentum)
    beta_opt = SGD(cfg.beta_learning_rate, cfg.momentum)
    losses = []
    for epoch in range(cfg.epochs):
        total = count = 0
        for batch in dataset.batches(cfg.batch_size, rng):
            total += noisy_train_step(model, noise, batch, cfg, rng, weight_opt, beta_opt) * len(batch[1])
            count += len(batch[1])
        losses.append(total / count)
        if log is not None:
            log(f"noise epoch {epoch + 1}/{cfg.epochs} loss {losses[-1]:.4f}")
    return noise, losses


def _group(order, group_count):
    if group_count < 1:
        raise ConfigurationError(f"group count must be >= 1, got {group_count}")
    size = max(1, math.ceil(len(order) / group_count))
    return [order[s:s + size] for s in range(0, len(order), size)]


def _rank(scores, group_count, descending):
    """Sort channels by score (descending or ascending); ties go to the higher index first."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(len(scores))
    key = -scores if descending else scores
    order = np.lexsort((-idx, key)).astype(np.intp)
    return order, _group(order, group_count)


def _ranking_from_scores(model, scores, group_count, descending):
    ties = TieSets(model)
    order, groups = {}, {}
    for unit, members in ties.units.items():
        pooled = sum(np.asarray(scores[m], dtype=np.float64) for m in members)
        o, g = _rank(pooled, group_count, descending)
        for m in members:
            order[m], groups[m] = o, g
    return ChannelRanking(order, groups)


def extract_ranking(noise, group_count, model=None):
    """Largest |beta| first. Tied layers (given ``model``) rank by their summed |beta|."""
    if group_count < 1:
        raise ConfigurationError(f"group count must be >= 1, got {group_count}")
    scores = {i: np.abs(np.asarray(b, dtype=np.float64)) for i, b in noise.beta.items()}
    if model is not None:
        return _ranking_from_scores(model, scores, group_count, descending=True)
    order, groups = {}, {}
    for i, s in scores.items():
        order[i], groups[i] = _rank(s, group_count, descending=True)
    return ChannelRanking(order, groups)


def channel_l1(model, layer):
    w = model.weights[f"{layer}.weight"]
    return np.abs(w.astype(np.float64)).reshape(w.shape[0], -1).sum(axis=1)


def l1_ranking(model, group_count):
    """Smallest weight L1 norm first; tied layers rank by their summed norms."""
    if group_count < 1:
        raise ConfigurationError(f"group count must be >= 1, got {group_count}")
    scores = {i: channel_l1(model, i) for i in model.prunable_layers()}
    return _ranking_from_scores(model, scores, group_count, descending=False)
