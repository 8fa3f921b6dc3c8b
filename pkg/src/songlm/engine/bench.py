"""Latency / dispatch report over labelled decode runs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Iterable, Sequence

import jsonschema
import numpy as np

from ..errors import EmptyBatch
from ..lm import HierLM
from ..lyrics import CondSequence
from .decode import generate
from .ops import StepMetrics
from .sampling import SamplerConfig


@dataclass(frozen=True)
class RunLabel:
    mode: str
    batch: int
    frames: int


@dataclass
class BenchRow:
    mode: str
    batch: int
    frames: int
    avg_s: float
    min_s: float
    max_s: float
    dispatch_count: int
    alloc_count: int


def bench_report(metrics: Sequence[tuple[RunLabel, StepMetrics]]) -> list[BenchRow]:
    """One row per label; repeats of a label are folded into avg/min/max.

    Counts come from the first repeat (they are identical across repeats of
    a deterministic run). Rows are sorted by average latency, slowest first.
    """
    if not metrics:
        raise EmptyBatch("no runs to report")
    groups: dict[RunLabel, list[StepMetrics]] = {}
    for label, m in metrics:
        groups.setdefault(label, []).append(m)
    rows = []
    for label, ms in groups.items():
        t = np.array([m.wall_time for m in ms])
        rows.append(BenchRow(label.mode, label.batch, label.frames, float(t.mean()), float(t.min()), float(t.max()),
                             ms[0].dispatch_count, ms[0].alloc_count))
    rows.sort(key=lambda r: -r.avg_s)
    return rows


def row_schema() -> dict:
    return json.loads(resources.files("songlm.schemas").joinpath("bench_row.schema.json").read_text())


def dumps_report(rows: Iterable[BenchRow]) -> str:
    schema = row_schema()
    lines = []
    for r in rows:
        rec = asdict(r)
        jsonschema.validate(rec, schema)
        lines.append(json.dumps(rec, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def loads_report(text: str) -> list[BenchRow]:
    schema = row_schema()
    rows = []
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            jsonschema.validate(rec, schema)
            rows.append(BenchRow(**rec))
    return rows


def run_grid(model: HierLM, cond: CondSequence, modes: Sequence[str], frames: Sequence[int],
             batches: Sequence[int] = (1,), sampler: SamplerConfig | None = None,
             repeats: int = 1, seed: int = 0) -> list[BenchRow]:
    runs = []
    for mode in modes:
        for n in frames:
            for b in batches:
                for _ in range(repeats):
                    _, m = generate(model, cond, n, sampler, mode=mode, batch=b, seed=seed)
                    runs.append((RunLabel(mode, b, n), m))
    return bench_report(runs)
