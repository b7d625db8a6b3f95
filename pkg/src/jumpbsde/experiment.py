"""Run configured pricing experiments and write their reports."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .config import ExperimentConfig, internal_measure
from .markets import price
from .paths import build_grid

CSV_COLUMNS = ("measure", "y0", "stderr", "n_paths", "n_steps", "picard_iters", "wall_ms")


@dataclass(frozen=True)
class MeasureResult:
    measure: str
    y0: float
    stderr: float
    n_paths: int
    n_steps: int
    picard_iters: int
    wall_ms: float
    gaps: tuple = ()


@dataclass(frozen=True)
class RunReport:
    """Per-measure prices plus pairwise gaps in paired standard-error units."""

    results: tuple
    pairwise: dict = field(default_factory=dict)

    def result(self, measure: str) -> MeasureResult:
        for r in self.results:
            if r.measure == measure:
                return r
        raise KeyError(measure)

    def to_json(self) -> dict:
        return {
            "results": [asdict(r) for r in self.results],
            "pairwise": [
                {"a": a, "b": b, "diff": d["diff"], "paired_stderr": d["paired_stderr"], "z": d["z"]}
                for (a, b), d in self.pairwise.items()
            ],
        }


def _simulation_key(measure: str) -> str:
    return "P" if measure in ("P", "gop") else measure


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> RunReport:
    """Price under every configured measure on shared random draws.

    All bundles use the same seed, so the raw Brownian draws (and the jump
    uniforms) coincide across measures and pairwise errors are paired.
    """
    grid = build_grid(0.0, cfg.contract.maturity, cfg.n_steps)
    order = sorted(cfg.measures, key=lambda m: (_simulation_key(internal_measure(m)), cfg.measures.index(m)))
    quotes, results = {}, {}
    cache_key, bundle = None, None
    for label in order:
        inner = internal_measure(label)
        start = time.perf_counter()
        key = _simulation_key(inner)
        if key != cache_key:
            bundle = None
            bundle = cfg.market.simulate(key, grid, cfg.n_paths, cfg.seed, workers=workers)
            cache_key = key
        q = price(cfg.market, cfg.contract, cfg.collateral, inner, bundle, cfg.solver)
        wall = (time.perf_counter() - start) * 1e3
        quotes[label] = q
        results[label] = MeasureResult(label, q.y0, q.stderr, cfg.n_paths, cfg.n_steps, q.picard_iters, wall, q.gaps)
    bundle = None
    pairwise = {}
    for a, b in itertools.combinations(cfg.measures, 2):
        se = quotes[a].paired_stderr(quotes[b])
        diff = quotes[a].y0 - quotes[b].y0
        z = diff / se if se > 0 else (0.0 if diff == 0 else math.inf)
        pairwise[(a, b)] = {"diff": diff, "paired_stderr": se, "z": z}
    return RunReport(tuple(results[m] for m in cfg.measures), pairwise)


def convergence_study(cfg: ExperimentConfig, paths_list: Sequence[int], steps_list: Sequence[int],
                      workers: Optional[int] = None) -> list:
    """One row per configured measure and ``(n_paths, n_steps)`` pair.

    Every run uses the configured seed. Path ``j`` of a run depends only on
    ``(seed, j)`` and the grid, so runs with more paths extend runs with fewer.
    """
    if not paths_list or not steps_list:
        raise ValueError("refinement lists must be nonempty")
    rows = []
    for n_paths, n_steps in itertools.product(paths_list, steps_list):
        report = run_experiment(cfg.with_overrides(n_paths=n_paths, n_steps=n_steps), workers=workers)
        rows.extend(report.results)
    return rows


def format_csv(rows: Sequence[MeasureResult], timing: bool = False) -> str:
    """CSV text. ``wall_ms`` is left empty unless ``timing`` so that output is reproducible."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r.measure, repr(r.y0), repr(r.stderr), r.n_paths, r.n_steps, r.picard_iters,
                         f"{r.wall_ms:.1f}" if timing else ""])
    return buf.getvalue()


def format_json(report: RunReport) -> str:
    return json.dumps(report.to_json(), indent=2, allow_nan=True)
