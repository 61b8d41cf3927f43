"""Ordered pools of sub-nets (largest first) and their text serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .errors import InvariantError
from .subnet import CostReport, SubnetConfig, check_nesting


@dataclass(frozen=True)
class PoolEntry:
    config: SubnetConfig
    accuracy: float
    cost: CostReport

    def with_accuracy(self, accuracy):
        return replace(self, accuracy=float(accuracy))

    def to_json(self):
        return {
            "config": self.config.to_records(),
            "accuracy": self.accuracy,
            "flops": self.cost.flops,
            "params": self.cost.params,
            "size_ratio": self.cost.size_ratio,
        }

    @classmethod
    def from_json(cls, d):
        return cls(
            SubnetConfig.from_records(d["config"]),
            float(d["accuracy"]),
            CostReport(int(d["flops"]), int(d["params"]), float(d["size_ratio"])),
        )


@dataclass
class SubnetPool:
    entries: list[PoolEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)

    def configs(self):
        return [e.config for e in self.entries]

    def accuracies(self):
        return [e.accuracy for e in self.entries]

    def check(self):
        """Raise unless the pool is nested and strictly shrinking in parameters."""
        if not check_nesting(self.configs()):
            raise InvariantError("pool is not nested")
        params = [e.cost.params for e in self.entries]
        if any(b >= a for a, b in zip(params, params[1:])):
            raise InvariantError("pool parameter counts must strictly decrease")

    def dumps(self):
        return json.dumps({"entries": [e.to_json() for e in self.entries]}, indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text):
        return cls([PoolEntry.from_json(d) for d in json.loads(text)["entries"]])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())
