"""Named wall-clock stages, kept in insertion order."""

from __future__ import annotations

import time
from contextlib import contextmanager


class StageTimer:
    def __init__(self):
        self.stages: dict[str, float] = {}

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t0

    def add(self, name: str, seconds: float) -> None:
        self.stages[name] = self.stages.get(name, 0.0) + seconds

    def merge(self, other: "StageTimer") -> None:
        for k, v in other.stages.items():
            self.add(k, v)

    def table(self) -> str:
        width = max([len(k) for k in self.stages] + [5])
        lines = [f"{'stage':<{width}}  seconds", f"{'-' * width}  -------"]
        lines += [f"{k:<{width}}  {v:.6f}" for k, v in self.stages.items()]
        return "\n".join(lines)
