"""Staged driver: pretrain, noise-train, search, reselect, fuse, eval, bench, report.

Every stage reads its inputs from, and writes its artifacts to, one output
directory, so any stage can be re-run alone (e.g. a threshold ablation only
re-runs ``search`` onward). All stochastic choices derive from ``cfg.seed``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
import warnings
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import archs, checkpoint
from .data import Augmented, load_dataset
from .errors import ConfigurationError, DependencyError
from .fuse import FusedConfig, fused_train, reselect
from .noise import NoiseParams, NoiseTrainConfig, extract_ranking, l1_ranking, train_noise
from .nn import TrainHyper, build_model, evaluate_accuracy, load_architecture, train_epochs
from .pool import PoolEntry, SubnetPool
from .runtime import benchmark, load_dynamic, save_dynamic
from .search import Evaluator, SearchConfig, SearchTrace, brute_force_oracle, reevaluate, run_search
from .subnet import cost_of, uniform_config

log = logging.getLogger(__name__)

STAGES = ("pretrain", "noise-train", "search", "reselect", "fuse", "eval", "bench", "report")
METHODS = ("noise", "l1", "oracle", "uniform")
REPORT_HEADER = ["method", "subnet_id", "params", "flops", "top1_acc", "latency_ms"]

DESK_DATASET = {"kind": "synthetic", "classes": 10, "samples": 4000, "size": 8,
                "separation": 0.4, "val": 1000, "test": 1000}


def derive_seed(seed, stage):
    """Independent 32-bit seed for ``stage`` from the global seed."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(stage.encode())]).generate_state(1)[0])


@dataclass
class PipelineConfig:
    arch: str = "convnet6"
    dataset: dict = field(default_factory=lambda: dict(DESK_DATASET))
    method: str = "noise"
    pretrain_epochs: int = 20
    pretrain: TrainHyper = field(default_factory=TrainHyper)
    search: SearchConfig = field(default_factory=SearchConfig)
    noise: NoiseTrainConfig = field(default_factory=NoiseTrainConfig)
    fused: FusedConfig = field(default_factory=FusedConfig)
    uniform_multipliers: list = field(default_factory=lambda: [0.25, 0.5, 0.75, 1.0])
    augment: bool = False
    bench_batch_size: int = 1
    bench_warmup: int = 3
    bench_runs: int = 20
    out: str = "runs/default"
    seed: int = 0

    _NESTED = {"pretrain": TrainHyper, "search": SearchConfig, "noise": NoiseTrainConfig, "fused": FusedConfig}

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.pretrain_epochs < 0:
            raise ConfigurationError("pretrain_epochs must be nonnegative")
        if not self.uniform_multipliers:
            raise ConfigurationError("uniform_multipliers must not be empty")

    def to_dict(self):
        d = asdict(self)
        d["fused"]["hyper"] = asdict(self.fused.hyper)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown pipeline keys {sorted(unknown)}")
        kw = dict(d)
        for name, typ in cls._NESTED.items():
            if name in kw and isinstance(kw[name], dict):
                sub = dict(kw[name])
                if typ is FusedConfig and isinstance(sub.get("hyper"), dict):
                    sub["hyper"] = TrainHyper(**sub["hyper"])
                try:
                    kw[name] = typ(**sub)
                except TypeError as exc:
                    raise ConfigurationError(f"bad {name} section: {exc}") from None
        return cls(**kw)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


class Run:
    """Per-run context: paths, derived seeds, data and model construction."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self._splits = None

    def path(self, name):
        return self.out / name

    def require(self, stage, *names):
        for name in names:
            if not self.path(name).exists():
                raise DependencyError(stage, str(self.path(name)))

    def seed(self, stage):
        return derive_seed(self.cfg.seed, stage)

    def log(self, stage, message):
        with open(self.path(f"{stage}.log"), "a") as fh:
            fh.write(message + "\n")
        log.info("[%s] %s", stage, message)

    @property
    def splits(self):
        if self._splits is None:
            desc = dict(self.cfg.dataset)
            self._splits = load_dataset(desc, seed=self.seed("data"))
        return self._splits

    def train_data(self):
        train = self.splits.train
        return Augmented(train.x, train.y) if self.cfg.augment else train

    def architecture(self):
        desc = self.cfg.dataset
        if self.cfg.arch in archs.BUILTIN:
            if desc.get("kind", "synthetic") == "cifar10":
                classes, shape = 10, (3, 32, 32)
            else:
                size = int(desc.get("size", 8))
                classes, shape = int(desc.get("classes", 4)), (int(desc.get("channels", 3)), size, size)
            return archs.builtin(self.cfg.arch, classes), classes, shape
        layers, classes, shape = load_architecture(self.cfg.arch)
        return layers, classes, tuple(shape)

    def fresh_model(self):
        layers, classes, shape = self.architecture()
        return build_model(layers, classes, seed=self.seed("init"), input_shape=shape)

    def load_model(self, name):
        model = self.fresh_model()
        rest = checkpoint.restore_weights(model, checkpoint.load(self.path(name)))
        return model, rest

    def search_cfg(self):
        return replace(self.cfg.search, seed=self.seed("search"))

    def fused_cfg(self):
        f = self.cfg.fused
        return replace(f, seed=self.seed("fuse"), hyper=replace(f.hyper, seed=self.seed("fuse")))


def stage_pretrain(run):
    cfg = run.cfg
    model = run.fresh_model()
    hyper = replace(cfg.pretrain, seed=run.seed("pretrain"))
    train_epochs(model, run.train_data(), hyper, cfg.pretrain_epochs, log=lambda m: run.log("pretrain", m))
    acc = evaluate_accuracy(model, run.splits.val)
    run.log("pretrain", f"validation accuracy {acc:.4f}")
    checkpoint.save(run.path("pretrain.ckpt"), checkpoint.model_tensors(model))


def stage_noise_train(run):
    cfg = run.cfg
    run.require("noise-train", "pretrain.ckpt")
    if cfg.method != "noise":
        run.log("noise-train", f"skipped: method {cfg.method!r} does not use noise ranking")
        return
    model, _ = run.load_model("pretrain.ckpt")
    ncfg = replace(cfg.noise, seed=run.seed("noise"))
    noise, _ = train_noise(model, run.train_data(), ncfg, log=lambda m: run.log("noise-train", m))
    checkpoint.save(run.path("noise.ckpt"), checkpoint.model_tensors(model, noise))


def _uniform_pool(run, model, scfg):
    ev = Evaluator(model, run.splits, scfg)
    entries, seen = [], set()
    for m in sorted(set(run.cfg.uniform_multipliers), reverse=True):
        config = uniform_config(model, m)
        if config in seen:
            continue
        seen.add(config)
        entries.append(PoolEntry(config, ev(config, counted=False), cost_of(model, config)))
    return SubnetPool(entries), SearchTrace(val_indices=ev.val_indices.tolist())


def _nonempty(pool):
    return SubnetPool([e for e in pool if all(idx for _, idx in e.config.retained)])


def stage_search(run):
    cfg = run.cfg
    scfg = run.search_cfg()
    ranking = None
    if cfg.method == "noise":
        run.require("search", "noise.ckpt")
        model, rest = run.load_model("noise.ckpt")
        prefix = checkpoint.NOISE_PREFIX
        beta = {int(k[len(prefix):]): v for k, v in rest.items() if k.startswith(prefix)}
        if not beta:
            raise DependencyError("search", f"noise magnitudes in {run.path('noise.ckpt')}")
        ranking = extract_ranking(NoiseParams(beta), scfg.group_count, model)
    else:
        run.require("search", "pretrain.ckpt")
        model, _ = run.load_model("pretrain.ckpt")
        if cfg.method == "l1":
            ranking = l1_ranking(model, scfg.group_count)
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if cfg.method == "uniform":
            pool, trace = _uniform_pool(run, model, scfg)
        elif cfg.method == "oracle":
            pool, trace = brute_force_oracle(model, run.splits, scfg)
            pool = _nonempty(pool)
        else:
            pool, trace = run_search(model, ranking, scfg, run.splits)
    for w in caught:
        run.log("search", f"warning: {w.message}")
    run.log("search", f"{cfg.method}: {len(pool)} entries, {json.dumps(trace.summary(), sort_keys=True)}, "
                      f"{time.perf_counter() - t0:.1f}s")
    if ranking is not None:
        run.path("ranking.json").write_text(json.dumps(ranking.to_json(), sort_keys=True) + "\n")
    checkpoint.save(run.path("search.ckpt"), checkpoint.model_tensors(model))
    pool.save(run.path("pool_search.json"))
    run.path("trace.jsonl").write_text(trace.to_jsonl())
    run.path("trace.csv").write_text(trace.to_csv())
    return pool, trace


def stage_reselect(run):
    run.require("reselect", "search.ckpt", "pool_search.json")
    model, _ = run.load_model("search.ckpt")
    pool = reevaluate(model, SubnetPool.load(run.path("pool_search.json")), run.search_cfg(), run.splits)
    if run.cfg.method == "uniform":
        kept = pool
        run.log("reselect", "uniform pool kept as-is (re-evaluated only)")
    else:
        kept = reselect(pool)
    kept.check()
    kept.save(run.path("pool_reselected.json"))
    run.log("reselect", f"{len(pool)} -> {len(kept)} entries")
    return kept


def stage_fuse(run):
    run.require("fuse", "search.ckpt", "pool_reselected.json")
    model, _ = run.load_model("search.ckpt")
    pool = SubnetPool.load(run.path("pool_reselected.json"))
    dm = fused_train(model, pool, run.fused_cfg(), run.train_data(), val=run.splits.val,
                     log=lambda m: run.log("fuse", m))
    save_dynamic(dm, run.path("dynamic.ckpt"), run.path("pool.json"))
    return dm


def load_run_dynamic(run, stage):
    run.require(stage, "dynamic.ckpt", "pool.json")
    return load_dynamic(run.fresh_model(), run.path("dynamic.ckpt"), run.path("pool.json"))


def write_accuracy_csv(path, pool, accuracies):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subnet_id", "params", "flops", "top1_acc"])
    for k, (entry, acc) in enumerate(zip(pool, accuracies)):
        w.writerow([k, entry.cost.params, entry.cost.flops, f"{acc:.6f}"])
    Path(path).write_text(buf.getvalue())


def read_accuracy_csv(path):
    with open(path) as fh:
        return [float(r["top1_acc"]) for r in csv.DictReader(fh)]


def stage_eval(run):
    dm = load_run_dynamic(run, "eval")
    accs = [dm.accuracy(k, run.splits.test) for k in range(len(dm.pool))]
    write_accuracy_csv(run.path("accuracy.csv"), dm.pool, accs)
    for k, a in enumerate(accs):
        run.log("eval", f"sub-net {k}: flops {dm.pool[k].cost.flops} test accuracy {a:.4f}")
    return accs


def stage_bench(run):
    run.require("bench", "accuracy.csv")
    dm = load_run_dynamic(run, "bench")
    cfg = run.cfg
    report = benchmark(dm, cfg.bench_batch_size, cfg.bench_warmup, cfg.bench_runs,
                       seed=run.seed("bench"), accuracies=read_accuracy_csv(run.path("accuracy.csv")))
    report.write_csv(run.path("latency.csv"))
    return report


def read_latency_csv(path):
    with open(path) as fh:
        return [
            (int(r["subnet_id"]), int(r["params"]), int(r["flops"]), float(r["top1_acc"]), float(r["latency_ms"]))
            for r in csv.DictReader(fh)
        ]


def emit_report(results, out_dir):
    """Write ``report.csv`` and one ``plot_<method>.dat`` per method.

    ``results`` maps method -> rows of (subnet_id, params, flops, top1_acc,
    latency_ms). Returns ``"ok"``, or ``"warning"`` when there is nothing to report.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    total = 0
    for method in sorted(results):
        rows = sorted(results[method], key=lambda r: (-r[2], r[0]))
        total += len(rows)
        lines = []
        for sid, params, flops, acc, lat in rows:
            w.writerow([method, sid, params, flops, f"{acc:.6f}", f"{lat:.4f}"])
            lines.append(f"{flops} {acc:.6f}\n")
        (out / f"plot_{method}.dat").write_text("".join(lines))
    (out / "report.csv").write_text(buf.getvalue())
    if total == 0:
        warnings.warn("report has no rows", RuntimeWarning, stacklevel=2)
        return "warning"
    return "ok"


def stage_report(run, extra_runs=()):
    run.require("report", "latency.csv")
    results = {run.cfg.method: read_latency_csv(run.path("latency.csv"))}
    for other in extra_runs:
        other = Path(other)
        if not (other / "latency.csv").exists():
            raise DependencyError("report", str(other / "latency.csv"))
        method = json.loads((other / "config.json").read_text())["method"]
        if method in results:
            raise ConfigurationError(f"two runs report method {method!r}")
        results[method] = read_latency_csv(other / "latency.csv")
    return emit_report(results, run.out)


RUNNERS = {
    "pretrain": stage_pretrain,
    "noise-train": stage_noise_train,
    "search": stage_search,
    "reselect": stage_reselect,
    "fuse": stage_fuse,
    "eval": stage_eval,
    "bench": stage_bench,
    "report": stage_report,
}


def run_stage(cfg, stage, run=None, **kwargs):
    if stage not in RUNNERS:
        raise ConfigurationError(f"unknown stage {stage!r}; choose from {STAGES}")
    run = run or Run(cfg)
    run.out.mkdir(parents=True, exist_ok=True)
    run.path("config.json").write_text(cfg.dumps())
    run.path(f"{stage}.log").unlink(missing_ok=True)
    return RUNNERS[stage](run, **kwargs)


def run_pipeline(cfg, stages=STAGES):
    """Run ``stages`` in order (sharing one loaded dataset); returns the last stage's result."""
    run = Run(cfg)
    result = None
    for stage in stages:
        result = run_stage(cfg, stage, run)
    return result
