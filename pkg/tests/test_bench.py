import csv
import json
import math

import numpy as np
import pytest

from attnfuse import bench, engine
from attnfuse.bench import BenchConfig, ModeDisagreement, run_benchmark

# PATTERN-shaped config (119 nodes, avg degree 51.1, d=128) at 1/256 of the batch
PATTERN_SMALL = dict(model="gt", nodes=119, avg_degree=51.1, batch_count=1024, dim=128,
                     dtype="f32", seed=0, size_factor=1 / 256, peak_bw=2e10)


def test_bandwidth_utilization():
    assert bench.bandwidth_utilization(1_000, 1e-6, 1e9) == pytest.approx(1.0)
    assert bench.bandwidth_utilization(500, 1e-6, 1e9) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        bench.bandwidth_utilization(1, 0.0, 1e9)
    with pytest.raises(ValueError):
        bench.bandwidth_utilization(1, 1.0, 0.0)


def test_relative_error():
    assert bench.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert bench.relative_error(np.array([1.0, 2.5]), np.array([1.0, 2.0])) == 0.25
    assert bench.relative_error(np.zeros(2), np.zeros(2)) == 0.0


def test_config_validation(tmp_path):
    with pytest.raises(ValueError, match="unknown config keys"):
        BenchConfig.from_dict({"model": "gt", "speed": 1})
    with pytest.raises(ValueError):
        BenchConfig(strategies=("smmf", "turbo"))
    with pytest.raises(ValueError):
        BenchConfig(dtype="f16")
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": "gat", "nodes": 20, "strategies": ["SMMF"]}))
    cfg = BenchConfig.from_json(path)
    assert cfg.model == "gat" and cfg.strategies == ("smmf",)
    assert BenchConfig(batch_count=1024, size_factor=1 / 64).effective_batch == 16


def test_pattern_scaled_runs_all_modes(tmp_path):
    cfg = BenchConfig(**PATTERN_SMALL)
    report = run_benchmark(cfg)
    assert [r.mode for r in report.rows] == ["unfused", "smmf", "pmf", "baseline", "auto:smmf"]
    assert report.row("unfused").speedup_vs_unfused == 1.0
    assert report.graph["num_nodes"] == 4 * 119
    for r in report.rows:
        assert r.elapsed_ns > 0
        assert math.isfinite(r.bandwidth_utilization) and r.bandwidth_utilization > 0
    sm, bl = report.row("smmf").counters, report.row("baseline").counters
    assert bl.softmax_scalar_ops == 4 * sm.softmax_scalar_ops
    # auto runs the same plan as explicit smmf
    assert report.row("auto").output_sha256 == report.row("smmf").output_sha256

    out = tmp_path / "r.csv"
    report.write_csv(out)
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == bench.CSV_COLUMNS
    assert len(rows) == 1 + len(report.rows)
    md = report.to_markdown()
    assert "| mode |" in md and "auto selection: auto:smmf" in md


def test_hub_scenario_selection():
    base = dict(nodes=2000, avg_degree=2.0, hub_degree=1990, batch_count=1, dim=8, seed=1,
                strategies=("auto",), shared_mem_bytes=4096)
    gt = run_benchmark(BenchConfig(model="gt", **base))
    assert gt.selected["auto"] == "auto:pmf"
    gat = run_benchmark(BenchConfig(model="gat", **base))
    assert gat.selected["auto"] == "auto:smmf->unfused"
    assert gat.row("auto").counters.fallback


def test_explicit_smmf_on_hub_raises():
    cfg = BenchConfig(model="gt", nodes=2000, avg_degree=2.0, hub_degree=1990, batch_count=1,
                      dim=8, strategies=("smmf",), shared_mem_bytes=4096)
    with pytest.raises(engine.SharedMemoryError):
        run_benchmark(cfg)


def test_reproducible_counters():
    cfg = BenchConfig(model="agnn", nodes=60, avg_degree=5.0, batch_count=8, dim=16, seed=3)
    a, b = run_benchmark(cfg), run_benchmark(cfg)
    for ra, rb in zip(a.rows, b.rows):
        assert ra.output_sha256 == rb.output_sha256
        assert ra.counters.deterministic_view() == rb.counters.deterministic_view()


def test_disagreement_gate(monkeypatch):
    real = bench.run_forward

    def corrupt(g, Q, K, V, kind, plan, **kw):
        O, ctx, c = real(g, Q, K, V, kind, plan, **kw)
        if plan.strategy.value == "pmf":
            O = O.copy()
            O[3, 1] += 1.0
        return O, ctx, c

    monkeypatch.setattr(bench, "run_forward", corrupt)
    cfg = BenchConfig(model="gt", nodes=30, avg_degree=3.0, batch_count=1, dim=4)
    with pytest.raises(ModeDisagreement, match=r"pmf.*row 3, col 1"):
        run_benchmark(cfg)
