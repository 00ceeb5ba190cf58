"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line
in the terminal summary."""
import itertools
import time

import numpy as np

from conftest import ACCEPTANCE_RESULTS
from attnfuse import graph
from attnfuse.autograd import fused_backward, gradient_errors, unfused_backward
from attnfuse.bench import BenchConfig, relative_error, run_benchmark
from attnfuse.engine import run_forward
from attnfuse.kernels import SddmmKind, dense_oracle_forward, edge_softmax
from attnfuse.models import ConvSpec, random_inputs
from attnfuse.schedule import FusionPlan, Strategy, select_strategy

MODELS = ("gt", "agnn", "gat")
MODES = (Strategy.UNFUSED, Strategy.PMF, Strategy.SMMF, Strategy.FEATURE_PARALLEL_BASELINE)


def record(n, passed, detail):
    ACCEPTANCE_RESULTS[n] = (bool(passed), detail)
    assert passed, detail


def test_ac01_oracle_equivalence():
    tol = {np.float32: 2e-5, np.float64: 1e-11}
    rng = np.random.default_rng(2024)
    combos = itertools.cycle(itertools.product(MODELS, (1, 4, 32, 128), (np.float32, np.float64)))
    worst = {np.float32: 0.0, np.float64: 0.0}
    failures = []
    t0 = time.perf_counter()
    for i in range(200):
        model, d, dtype = next(combos)
        n = int(rng.integers(1, 513))
        avg = float(rng.uniform(0, min(8.0, n - 1))) if n > 1 else 0.0
        g = graph.gen_random(n, avg, seed=i)
        kind = ConvSpec(model, d).kind
        Q, K, V = random_inputs(g, kind, d, 10_000 + i, dtype, kink_margin=0.0)
        _, ref = dense_oracle_forward(g, Q, K, V, kind)
        for mode in MODES:
            O, _, _ = run_forward(g, Q, K, V, kind, FusionPlan(mode))
            err = relative_error(O, ref)
            worst[dtype] = max(worst[dtype], err)
            if err > tol[dtype]:
                failures.append((i, model, d, dtype.__name__, mode.value, err))
    elapsed = time.perf_counter() - t0
    detail = (f"200 instances x 4 modes; worst f32 {worst[np.float32]:.2e}, "
              f"f64 {worst[np.float64]:.2e}; {elapsed:.1f} s")
    record(1, not failures and elapsed < 60, detail + (f"; failures {failures[:3]}" if failures else ""))


def test_ac02_gradient_fidelity():
    worst = 0.0
    t0 = time.perf_counter()
    for seed, model in itertools.product(range(20), MODELS):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 33))
        d = int(rng.integers(1, 9))
        g = graph.gen_random(n, min(3.0, n - 1), seed)
        kind = ConvSpec(model, d).kind
        Q, K, V = random_inputs(g, kind, d, seed + 100)
        worst = max(worst, max(gradient_errors(g, Q, K, V, kind, h=1e-5).values()))
    elapsed = time.perf_counter() - t0
    record(2, worst < 1e-5 and elapsed < 30,
           f"20 seeds x GT/AGNN/GAT, max rel err {worst:.2e}; {elapsed:.1f} s")


def test_ac03_launch_counts():
    g = graph.gen_random(200, 6.0, seed=1)
    kind = SddmmKind.dot(0.25)
    Q, K, V = random_inputs(g, kind, 16, 0)
    dO = np.random.default_rng(0).standard_normal(V.shape)
    fwd, bwd = {}, {}
    for mode in MODES:
        _, ctx, c = run_forward(g, Q, K, V, kind, FusionPlan(mode))
        fwd[mode.value] = c.kernel_launches
        bwd[mode.value] = fused_backward(g, ctx, dO)[1].kernel_launches
    _, ctx, _ = run_forward(g, Q, K, V, kind, FusionPlan(Strategy.UNFUSED))
    unfused_bwd = unfused_backward(g, ctx, dO)[1].kernel_launches
    ok = (fwd["unfused"] == 3 and fwd["pmf"] == 2 and fwd["smmf"] == 1
          and unfused_bwd == 5 and bwd["smmf"] <= 3 and bwd["pmf"] <= 3)
    record(3, ok, f"forward {fwd}; backward unfused {unfused_bwd}, fused smmf {bwd['smmf']}, "
                  f"pmf {bwd['pmf']}")


def test_ac04_traffic_substitution():
    cases = []
    ok = True
    for model, dtype, seed in [("gt", np.float32, 0), ("gat", np.float64, 1), ("agnn", np.float32, 2)]:
        g = graph.gen_random(2000, 5.0, seed)
        assert g.num_edges == 10_000
        kind = ConvSpec(model, 8).kind
        Q, K, V = random_inputs(g, kind, 8, seed, dtype, kink_margin=0.0)
        b = np.dtype(dtype).itemsize
        sm = run_forward(g, Q, K, V, kind, FusionPlan(Strategy.SMMF))[2]
        un = run_forward(g, Q, K, V, kind, FusionPlan(Strategy.UNFUSED))[2]
        got = (sm.global_bytes("S"), sm.global_bytes("F"), un.global_bytes("S"), un.global_bytes("F"))
        ok &= got == (0, 0, 2 * 10_000 * b, 2 * 10_000 * b)
        cases.append(f"{model}/{np.dtype(dtype).name}: smmf S,F={got[:2]} unfused S,F={got[2:]}")
    record(4, ok, "; ".join(cases))


def test_ac05_warp_balance():
    g = graph.gen_super_node(100, 4.0, 90, seed=7)
    kind = SddmmKind.dot(0.5)
    Q, K, V = random_inputs(g, kind, 8, 0)
    sm = run_forward(g, Q, K, V, kind, FusionPlan(Strategy.SMMF))[2]
    bl = run_forward(g, Q, K, V, kind, FusionPlan(Strategy.FEATURE_PARALLEL_BASELINE))[2]
    spread = max(max(t) - min(t) for t in sm.group_loads)
    ok = spread <= 1 and bl.max_group_load == 90
    record(5, ok, f"smmf max in-block group spread {spread} (max load {sm.max_group_load}); "
                  f"baseline max group load {bl.max_group_load}")


def test_ac06_redundancy_elimination():
    g = graph.gen_random(300, 8.0, seed=3)
    kind = SddmmKind.dot(0.1)
    Q, K, V = random_inputs(g, kind, 128, 0, np.float32)
    plan = dict(group_width=32)
    sm = run_forward(g, Q, K, V, kind, FusionPlan(Strategy.SMMF, **plan))[2]
    bl = run_forward(g, Q, K, V, kind, FusionPlan(Strategy.FEATURE_PARALLEL_BASELINE, **plan))[2]
    record(6, bl.softmax_scalar_ops == 4 * sm.softmax_scalar_ops,
           f"baseline {bl.softmax_scalar_ops} / redundancy-free {sm.softmax_scalar_ops} "
           f"= {bl.softmax_scalar_ops / sm.softmax_scalar_ops:g}")


def test_ac07_strategy_selection():
    big = graph.degree_stats(graph.gen_super_node(13000, 1.0, 12288, seed=0))
    edge = graph.degree_stats(graph.gen_super_node(13000, 1.0, 12287, seed=0))
    assert (big.max_degree, edge.max_degree) == (12288, 12287)
    got = (select_strategy(big, SddmmKind.dot(), 49152, 4),
           select_strategy(big, SddmmKind.add(), 49152, 4),
           select_strategy(edge, SddmmKind.dot(), 49152, 4))
    want = (Strategy.PMF, Strategy.SMMF, Strategy.SMMF)
    record(7, got == want, "12288/dot -> {}, 12288/add -> {}, 12287/dot -> {}".format(
        *(s.value for s in got)))


def test_ac08_softmax_stability():
    rng = np.random.default_rng(8)
    lens = rng.integers(1, 257, size=1000)
    n = int(lens.max())
    src = np.concatenate([rng.choice(n, size=k, replace=False) for k in lens])
    dst = np.repeat(np.arange(1000), lens)
    g = graph.from_coo(max(n, 1000), src, dst)
    S = rng.uniform(-1e4, 1e4, g.num_edges).astype(np.float32)
    # extremes in every row
    S[g.csr_row_ptr[:-1][lens > 1]] = np.float32(1e4)
    P = edge_softmax(g, S)
    eps = float(np.finfo(np.float32).eps)

    def row_errors(P):
        sums = np.add.reduceat(P.astype(np.float64), g.csr_row_ptr[:1000])
        return np.abs(sums - 1.0) / (4 * eps * lens)

    # same rows through the fused engine: add-scores with slope 1 give s_uv = el_u
    el = rng.uniform(-1e4, 1e4, (g.num_nodes, 1)).astype(np.float32)
    er = np.zeros_like(el)
    V = np.ones((g.num_nodes, 4), dtype=np.float32)
    _, ctx, _ = run_forward(g, el, er, V, SddmmKind.add(1.0), FusionPlan(Strategy.SMMF,
                            shared_mem_budget_bytes=1 << 20))
    worst = max(row_errors(P).max(), row_errors(ctx.P).max())
    finite = bool(np.isfinite(P).all() and np.isfinite(ctx.P).all())
    record(8, finite and worst <= 1.0,
           f"1000 rows, |sum-1| / (4 eps len) max {worst:.3f} (kernel and fused engine)")


def test_ac09_determinism():
    cfg = BenchConfig(model="gt", nodes=119, avg_degree=51.1, batch_count=1024, dim=128,
                      dtype="f32", seed=0, size_factor=1 / 64, deterministic=True)
    runs = [run_benchmark(cfg) for _ in range(3)]
    views = [[(r.mode, r.output_sha256, r.counters.deterministic_view()) for r in rep.rows]
             for rep in runs]
    same = views[0] == views[1] == views[2]
    record(9, same, f"3 runs x {len(runs[0].rows)} modes on N={runs[0].graph['num_nodes']}, "
                    f"E={runs[0].graph['num_edges']}: {'bit-identical' if same else 'differ'}")


def test_ac10_vectorization_counter():
    d = 128
    g = graph.gen_random(300, 6.0, seed=4)
    kind = SddmmKind.dot(0.1)
    Q, K, V = random_inputs(g, kind, d, 0, np.float32)
    ratios = {}
    ok = True
    for mode in (Strategy.SMMF, Strategy.PMF, Strategy.UNFUSED):
        t = {w: run_forward(g, Q, K, V, kind, FusionPlan(mode, vector_width=w))[2]
             .transactions_by_stage["spmm"] for w in (1, 4)}
        ok &= 4 * t[4] == t[1]
        ratios[mode.value] = f"{t[4]}/{t[1]}"
    record(10, ok, f"d={d} spmm transactions w=4 / w=1: {ratios}")
