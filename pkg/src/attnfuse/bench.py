"""Benchmark scenarios: build a graph, run every requested execution mode on the
same inputs, gate on cross-mode agreement, then time and report counters.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .engine import ExecCounters, run_forward
from .graph import GraphTopology, batch_graphs, degree_stats, gen_random, gen_super_node
from .models import ConvSpec, init_weights, project
from .schedule import DEFAULT_SHARED_MEM_BYTES, Strategy, auto_plan

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "mode", "elapsed_ns", "kernel_launches", "global_bytes_read", "global_bytes_written",
    "shared_bytes", "memory_transactions", "softmax_scalar_ops", "max_group_load",
    "mean_group_load", "speedup_vs_unfused", "bandwidth_utilization",
)

AGREEMENT_TOL = {"f32": 2e-5, "f64": 1e-11}
DTYPES = {"f32": np.float32, "f64": np.float64}
MODES = ("unfused", "smmf", "pmf", "baseline", "auto")


class ModeDisagreement(RuntimeError):
    pass


def bandwidth_utilization(nbytes: int, elapsed_s: float, peak_bw_bytes_per_s: float) -> float:
    """Bytes moved over (peak bandwidth x time); not clamped to 1."""
    if elapsed_s <= 0 or peak_bw_bytes_per_s <= 0:
        raise ValueError("elapsed time and peak bandwidth must be positive")
    return nbytes / (peak_bw_bytes_per_s * elapsed_s)


def relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """Max-norm error relative to the max-norm of ``expected``."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    diff = np.abs(actual - expected).max(initial=0.0)
    ref = np.abs(expected).max(initial=0.0)
    return float(diff / ref) if ref > 0 else float(diff)


@dataclass
class BenchConfig:
    model: str = "gt"
    nodes: int = 119
    avg_degree: float = 51.1
    hub_degree: Optional[int] = None
    batch_count: int = 1024
    dim: int = 128
    dtype: str = "f32"
    seed: int = 0
    strategies: tuple = MODES
    deterministic: bool = True
    peak_bw: Optional[float] = None
    size_factor: float = 1.0
    shared_mem_bytes: int = DEFAULT_SHARED_MEM_BYTES
    repeats: int = 1

    def __post_init__(self):
        self.strategies = tuple(s.lower() for s in self.strategies)
        for s in self.strategies:
            if s not in MODES:
                raise ValueError(f"unknown mode {s!r}; choose from {MODES}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {tuple(DTYPES)}")
        if self.size_factor <= 0:
            raise ValueError("size_factor must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "BenchConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> "BenchConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @property
    def effective_batch(self) -> int:
        return max(1, math.ceil(self.batch_count * self.size_factor))


def build_graph(cfg: BenchConfig) -> GraphTopology:
    parts = []
    for i in range(cfg.effective_batch):
        seed = cfg.seed * 100_003 + i
        if cfg.hub_degree:
            parts.append(gen_super_node(cfg.nodes, cfg.avg_degree, cfg.hub_degree, seed))
        else:
            parts.append(gen_random(cfg.nodes, cfg.avg_degree, seed))
    return batch_graphs(parts)


@dataclass
class BenchRow:
    mode: str
    strategy: str
    elapsed_ns: int
    counters: ExecCounters
    speedup_vs_unfused: float
    bandwidth_utilization: float
    output_sha256: str

    def csv_record(self) -> dict:
        c = self.counters
        return {
            "mode": self.mode,
            "elapsed_ns": self.elapsed_ns,
            "kernel_launches": c.kernel_launches,
            "global_bytes_read": c.global_bytes_read,
            "global_bytes_written": c.global_bytes_written,
            "shared_bytes": c.shared_bytes_accessed,
            "memory_transactions": c.memory_transactions,
            "softmax_scalar_ops": c.softmax_scalar_ops,
            "max_group_load": c.max_group_load,
            "mean_group_load": f"{c.mean_group_load:.6g}",
            "speedup_vs_unfused": f"{self.speedup_vs_unfused:.6g}",
            "bandwidth_utilization": f"{self.bandwidth_utilization:.6g}",
        }


@dataclass
class BenchReport:
    rows: list[BenchRow]
    graph: dict
    config: BenchConfig
    selected: dict = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config.seed

    def row(self, mode: str) -> BenchRow:
        for r in self.rows:
            if r.mode == mode or r.mode.startswith(mode + ":"):
                return r
        raise KeyError(mode)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow(r.csv_record())

    def to_markdown(self) -> str:
        cfg = self.config
        lines = [
            f"# Benchmark: {cfg.model.upper()} d={cfg.dim} {cfg.dtype}",
            "",
            f"- graph: N={self.graph['num_nodes']}, E={self.graph['num_edges']}, "
            f"avg degree {self.graph['avg_degree']:.3g}, max degree {self.graph['max_degree']}",
            f"- batch: {cfg.effective_batch} x {cfg.nodes} nodes, seed {cfg.seed}",
            f"- auto selection: {self.selected.get('auto', 'n/a')}",
            "",
            "| " + " | ".join(CSV_COLUMNS) + " |",
            "|" + "---|" * len(CSV_COLUMNS),
        ]
        for r in self.rows:
            rec = r.csv_record()
            lines.append("| " + " | ".join(str(rec[c]) for c in CSV_COLUMNS) + " |")
        lines.append("")
        lines.append("CPU timings are informational; counter columns are the comparison signal.")
        return "\n".join(lines) + "\n"


def _plan_for(mode: str, g, kind, dtype_bytes, d, cfg: BenchConfig):
    geometry = {"shared_mem_budget_bytes": cfg.shared_mem_bytes}
    if mode == "auto":
        return auto_plan(g, kind, dtype_bytes, d, **geometry)
    return auto_plan(g, kind, dtype_bytes, d, strategy=Strategy.parse(mode), **geometry)


def _mode_label(mode: str, plan) -> str:
    if mode != "auto":
        return mode
    if plan.fallback_from is not None:
        return f"auto:{plan.fallback_from.value}->{plan.strategy.value}"
    return f"auto:{plan.strategy.value}"


def run_benchmark(cfg: BenchConfig) -> BenchReport:
    """Run every requested mode on shared inputs.

    Outputs are first compared against the unfused pipeline (the reference
    mode, always run); a disagreement beyond tolerance raises
    ModeDisagreement before any timing is recorded.
    """
    dtype = DTYPES[cfg.dtype]
    g = build_graph(cfg)
    stats = degree_stats(g)
    spec = ConvSpec(cfg.model, cfg.dim)
    kind = spec.kind
    rng = np.random.default_rng(cfg.seed)
    X = rng.standard_normal((g.num_nodes, cfg.dim)).astype(dtype)
    weights = init_weights(spec, cfg.dim, cfg.seed + 1, dtype)
    Q, K, V = project(spec, X, weights)
    b = np.dtype(dtype).itemsize

    modes = ["unfused"] + [m for m in cfg.strategies if m != "unfused"]
    plans = {m: _plan_for(m, g, kind, b, cfg.dim, cfg) for m in modes}

    # agreement gate
    outputs = {}
    for m in modes:
        outputs[m], _ctx, _c = run_forward(g, Q, K, V, kind, plans[m],
                                           deterministic=cfg.deterministic)
    ref = outputs["unfused"]
    tol = AGREEMENT_TOL[cfg.dtype]
    for m in modes:
        err = relative_error(outputs[m], ref)
        if err > tol:
            diff = np.abs(outputs[m].astype(np.float64) - ref)
            loc = np.unravel_index(int(np.argmax(diff)), diff.shape)
            raise ModeDisagreement(
                f"mode {m} disagrees with unfused: relative error {err:.3g} > {tol:g}; "
                f"max abs diff {diff[loc]:.3g} at (row {loc[0]}, col {loc[1]}): "
                f"{outputs[m][loc]!r} vs {ref[loc]!r}")

    # timing
    runs = {}
    for m in modes:
        best = None
        for _ in range(max(1, cfg.repeats)):
            O, _ctx, counters = run_forward(g, Q, K, V, kind, plans[m],
                                            deterministic=cfg.deterministic)
            if best is None or counters.elapsed_ns < best[1].elapsed_ns:
                best = (O, counters)
        runs[m] = best
        log.info("mode %s: %d ns", m, best[1].elapsed_ns)

    base_ns = runs["unfused"][1].elapsed_ns
    rows = []
    for m in modes:
        if m == "unfused" and "unfused" not in cfg.strategies:
            continue
        O, counters = runs[m]
        elapsed = counters.elapsed_ns
        moved = counters.global_bytes_read + counters.global_bytes_written
        util = (bandwidth_utilization(moved, elapsed * 1e-9, cfg.peak_bw)
                if cfg.peak_bw and elapsed > 0 else float("nan"))
        rows.append(BenchRow(
            mode=_mode_label(m, plans[m]),
            strategy=plans[m].strategy.value,
            elapsed_ns=elapsed,
            counters=counters,
            speedup_vs_unfused=1.0 if m == "unfused" else base_ns / max(elapsed, 1),
            bandwidth_utilization=util,
            output_sha256=hashlib.sha256(np.ascontiguousarray(O).tobytes()).hexdigest(),
        ))
    graph_info = {
        "num_nodes": g.num_nodes,
        "num_edges": g.num_edges,
        "avg_degree": stats.avg_degree,
        "max_degree": stats.max_degree,
        "min_degree": stats.min_degree,
    }
    selected = {"auto": _mode_label("auto", plans["auto"])} if "auto" in plans else {}
    return BenchReport(rows, graph_info, cfg, selected)


def config_dict(cfg: BenchConfig) -> dict:
    d = asdict(cfg)
    d["strategies"] = list(cfg.strategies)
    return d
