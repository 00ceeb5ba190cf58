"""Fused attention pipelines executed block by block on the CPU.

A "launch" is one parallel-for over blocks followed by a synchronization
point. Each block writes a disjoint set of output rows and ``P`` slots, so
blocks may run on a thread pool; counters are merged in block order.

Counter model (``b`` = dtype bytes, ``ib`` = index bytes, ``w`` = vector width):

* Global reads/writes are attributed to a tensor name: ``Q``, ``K``, ``V``,
  ``O``, ``S`` (raw edge scores), ``F`` (softmax values handed to SpMM),
  ``P`` (normalized weights saved for backward) and ``index``.
* A dense row access of ``n`` elements costs ``ceil(n / w)`` memory
  transactions; only dense rows are charged transactions.
* Softmax costs four scalar ops per edge (max, exp, sum, divide) per group
  that performs the row reduction.
"""
from __future__ import annotations

import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .graph import GraphTopology
from .kernels import SddmmKind, check_rows, l2_normalize_rows, leaky_relu
from .schedule import (
    FusionPlan,
    Strategy,
    edge_parallel_partition,
    partition_blocks,
    pmf_num_blocks,
    smmf_feasibility,
    split_even,
    warp_balance,
)

INDEX_BYTES = 4  # device indices are int32

SOFTMAX_OPS_PER_EDGE = 4


class SharedMemoryError(RuntimeError):
    """An SMMF block needs more shared memory than the plan's budget."""

    def __init__(self, block_id: int, required_bytes: int, budget_bytes: int):
        self.block_id = block_id
        self.required_bytes = required_bytes
        self.budget_bytes = budget_bytes
        super().__init__(
            f"SMMF block {block_id} needs {required_bytes} bytes of shared memory "
            f"(budget {budget_bytes}); use PMF for this graph")


@dataclass
class ExecCounters:
    global_bytes_read: int = 0
    global_bytes_written: int = 0
    shared_bytes_accessed: int = 0
    memory_transactions: int = 0
    kernel_launches: int = 0
    softmax_scalar_ops: int = 0
    elapsed_ns: int = 0
    # per-block tuples of per-group SDDMM edge loads
    group_loads: list = field(default_factory=list)
    # per-block edge loads of edge-parallel SDDMM launches
    block_edge_loads: list = field(default_factory=list)
    read_by_tensor: Counter = field(default_factory=Counter)
    written_by_tensor: Counter = field(default_factory=Counter)
    transactions_by_stage: Counter = field(default_factory=Counter)
    fallback: bool = False

    def read(self, tensor: str, nbytes: int) -> None:
        self.global_bytes_read += nbytes
        self.read_by_tensor[tensor] += nbytes

    def write(self, tensor: str, nbytes: int) -> None:
        self.global_bytes_written += nbytes
        self.written_by_tensor[tensor] += nbytes

    def shared(self, nbytes: int) -> None:
        self.shared_bytes_accessed += nbytes

    def transactions(self, stage: str, count: int) -> None:
        self.memory_transactions += count
        self.transactions_by_stage[stage] += count

    def merge(self, other: "ExecCounters") -> None:
        self.global_bytes_read += other.global_bytes_read
        self.global_bytes_written += other.global_bytes_written
        self.shared_bytes_accessed += other.shared_bytes_accessed
        self.memory_transactions += other.memory_transactions
        self.kernel_launches += other.kernel_launches
        self.softmax_scalar_ops += other.softmax_scalar_ops
        self.group_loads.extend(other.group_loads)
        self.block_edge_loads.extend(other.block_edge_loads)
        self.read_by_tensor.update(other.read_by_tensor)
        self.written_by_tensor.update(other.written_by_tensor)
        self.transactions_by_stage.update(other.transactions_by_stage)
        self.fallback = self.fallback or other.fallback

    def global_bytes(self, tensor: str) -> int:
        """Total global traffic (read + written) attributed to ``tensor``."""
        return self.read_by_tensor[tensor] + self.written_by_tensor[tensor]

    @property
    def max_group_load(self) -> int:
        return max((max(t) for t in self.group_loads if t), default=0)

    @property
    def mean_group_load(self) -> float:
        n = sum(len(t) for t in self.group_loads)
        return sum(sum(t) for t in self.group_loads) / n if n else 0.0

    def as_flat(self) -> dict[str, int]:
        flat = {
            "global_bytes_read": self.global_bytes_read,
            "global_bytes_written": self.global_bytes_written,
            "shared_bytes": self.shared_bytes_accessed,
            "memory_transactions": self.memory_transactions,
            "kernel_launches": self.kernel_launches,
            "softmax_scalar_ops": self.softmax_scalar_ops,
            "max_group_load": self.max_group_load,
            "elapsed_ns": self.elapsed_ns,
            "fallback": int(self.fallback),
        }
        for name in sorted(set(self.read_by_tensor) | set(self.written_by_tensor)):
            flat[f"global_bytes_{name}"] = self.global_bytes(name)
        for stage in sorted(self.transactions_by_stage):
            flat[f"transactions_{stage}"] = self.transactions_by_stage[stage]
        return flat

    def deterministic_view(self) -> dict:
        """Everything except wall-clock time, for reproducibility checks."""
        flat = self.as_flat()
        flat.pop("elapsed_ns")
        flat["group_loads"] = [tuple(t) for t in self.group_loads]
        flat["block_edge_loads"] = list(self.block_edge_loads)
        return flat


@dataclass
class ForwardContext:
    g: GraphTopology
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    kind: SddmmKind
    plan: FusionPlan
    P: np.ndarray
    # inputs actually fed to the score operator (L2-normalized for AGNN)
    Q_eff: np.ndarray = None
    K_eff: np.ndarray = None


def vectorized_transactions(d: int, vector_width: int) -> int:
    """Transactions needed to move one ``d``-element row."""
    return math.ceil(d / vector_width)


# ---------------------------------------------------------------------------
# launch machinery
# ---------------------------------------------------------------------------

def launch(items: Sequence, body: Callable[[int, object], ExecCounters], counters: ExecCounters,
           deterministic: bool = True, workers: Optional[int] = None) -> None:
    """One kernel launch: run ``body`` for every block, then merge counters in block order."""
    if deterministic or len(items) < 2:
        parts = [body(i, item) for i, item in enumerate(items)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(body, range(len(items)), items))
    counters.kernel_launches += 1
    for part in parts:
        counters.merge(part)


@dataclass
class _Inputs:
    g: GraphTopology
    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    Qe: np.ndarray
    Ke: np.ndarray
    kind: SddmmKind
    plan: FusionPlan
    b: int
    dq: int
    d: int


def _prepare(g, Q, K, V, kind: SddmmKind, plan: FusionPlan) -> _Inputs:
    n = g.num_nodes
    if kind.is_dot:
        check_rows("Q", Q, n)
        check_rows("K", K, n, Q.shape[1])
    else:
        check_rows("el", Q, n, 1)
        check_rows("er", K, n, 1)
    check_rows("V", V, n)
    dtype = V.dtype
    if dtype not in (np.float32, np.float64) or Q.dtype != dtype or K.dtype != dtype:
        raise ValueError(f"Q, K, V must share dtype float32 or float64 "
                         f"(got {Q.dtype}, {K.dtype}, {V.dtype})")
    plan = replace(plan, dtype_bytes=dtype.itemsize)
    Qe, Ke = Q, K
    if kind.l2_normalize_inputs:
        Qe = l2_normalize_rows(Q, kind.eps)
        Ke = l2_normalize_rows(K, kind.eps)
    return _Inputs(g, Q, K, V, Qe, Ke, kind, plan, dtype.itemsize, Q.shape[1], V.shape[1])


def _scores(x: _Inputs, lo: int, hi: int) -> np.ndarray:
    src = x.g.coo_src[lo:hi]
    dst = x.g.coo_dst[lo:hi]
    if x.kind.is_dot:
        s = np.einsum("ij,ij->i", x.Qe[src], x.Ke[dst])
        return s * x.kind.scale if x.kind.scale != 1.0 else s
    return leaky_relu(x.Qe[src, 0] + x.Ke[dst, 0], x.kind.leaky_slope)


def _charge_sddmm(c: ExecCounters, x: _Inputs, n_edges: int, w: int) -> None:
    c.read("Q", n_edges * x.dq * x.b)
    c.read("K", n_edges * x.dq * x.b)
    c.transactions("sddmm", 2 * n_edges * vectorized_transactions(x.dq, w))


def _row_softmax(S: np.ndarray, local_ptr: np.ndarray):
    """Two-round softmax on a block's edge buffer: returns ``(F, z_sum, P)``.

    ``z_sum`` has one entry per non-empty row.
    """
    lens = np.diff(local_ptr)
    starts = local_ptr[:-1][lens > 0]
    if starts.size == 0:
        empty = S[:0]
        return empty, empty, empty
    lens = lens[lens > 0]
    z_max = np.maximum.reduceat(S, starts)
    F = np.exp(S - np.repeat(z_max, lens))
    z_sum = np.add.reduceat(F, starts)
    return F, z_sum, F / np.repeat(z_sum, lens)


def gather_aggregate(weights: np.ndarray, X: np.ndarray, idx: np.ndarray, local_ptr: np.ndarray,
                     d: int, chunk: int, dtype) -> np.ndarray:
    """Segment sums of ``weights[e] * X[idx[e]]``; the outer loop walks feature chunks."""
    rows = local_ptr.size - 1
    tile = np.zeros((rows, d), dtype=dtype)
    lens = np.diff(local_ptr)
    nz = np.flatnonzero(lens)
    if nz.size == 0:
        return tile
    starts = local_ptr[:-1][nz]
    for f0 in range(0, d, chunk):
        f1 = min(f0 + chunk, d)
        contrib = weights[:, None] * X[idx, f0:f1]
        tile[nz, f0:f1] = np.add.reduceat(contrib, starts, axis=0)
    return tile


# ---------------------------------------------------------------------------
# shared stage bodies
# ---------------------------------------------------------------------------

def _sddmm_edge_parallel(x: _Inputs, S: np.ndarray, counters: ExecCounters,
                         deterministic: bool, workers) -> None:
    plan = x.plan
    ranges = edge_parallel_partition(x.g, pmf_num_blocks(x.g, plan))

    def body(_i, rng):
        lo, hi = rng
        c = ExecCounters()
        chunks = split_even(lo, hi, plan.groups_per_block)
        for s, e in chunks:
            if e > s:
                S[s:e] = _scores(x, s, e)
        n = hi - lo
        c.block_edge_loads.append(n)
        c.group_loads.append(tuple(e - s for s, e in chunks))
        c.read("index", 2 * n * INDEX_BYTES)
        _charge_sddmm(c, x, n, plan.vector_width)
        c.write("S", n * x.b)
        return c

    launch(ranges, body, counters, deterministic, workers)


def _softmax_spmm_block(x: _Inputs, S_blk: np.ndarray, r0: int, r1: int,
                        O: np.ndarray, P: np.ndarray, c: ExecCounters) -> None:
    """Redundancy-free softmax then vectorized SpMM for rows ``[r0, r1)``.

    ``S_blk`` holds the block's edge scores; F stays in shared memory.
    """
    g, plan, b, d = x.g, x.plan, x.b, x.d
    e0, e1 = int(g.csr_row_ptr[r0]), int(g.csr_row_ptr[r1])
    n_e, rows = e1 - e0, r1 - r0
    local_ptr = g.csr_row_ptr[r0:r1 + 1] - e0
    w = plan.vector_width

    F, z_sum, P_blk = _row_softmax(S_blk, local_ptr)
    P[e0:e1] = P_blk
    c.softmax_scalar_ops += SOFTMAX_OPS_PER_EDGE * n_e
    c.shared(n_e * b)  # write F
    c.write("P", n_e * b)

    chunk = plan.group_width * w
    n_chunks = max(1, math.ceil(d / chunk))
    tile = gather_aggregate(F, x.V, g.coo_src[e0:e1], local_ptr, d, chunk, O.dtype)
    lens = np.diff(local_ptr)
    nz = np.flatnonzero(lens)
    if nz.size:
        tile[nz] /= z_sum[:, None]
    O[r0:r1] = tile
    c.read("index", n_e * INDEX_BYTES)
    c.read("V", n_e * d * b)
    c.transactions("spmm", n_e * vectorized_transactions(d, w))
    c.shared(n_e * b * n_chunks)          # read F once per feature chunk
    c.shared(2 * n_e * d * b)             # accumulate into the shared tile
    c.shared(rows * d * b)                # read the tile back
    c.write("O", rows * d * b)
    c.transactions("spmm", rows * vectorized_transactions(d, w))


# ---------------------------------------------------------------------------
# execution modes
# ---------------------------------------------------------------------------

def _finish(x: _Inputs, O, P, counters, t0) -> tuple:
    counters.elapsed_ns = time.perf_counter_ns() - t0
    ctx = ForwardContext(x.g, x.Q, x.K, x.V, x.kind, x.plan, P, x.Qe, x.Ke)
    return O, ctx, counters


def _alloc(x: _Inputs):
    dtype = x.V.dtype
    return (np.zeros((x.g.num_nodes, x.d), dtype=dtype),
            np.zeros(x.g.num_edges, dtype=dtype))


def run_smmf(g, Q, K, V, kind: SddmmKind, plan: FusionPlan = FusionPlan(),
             deterministic: bool = True, workers: Optional[int] = None):
    """Single fused launch: warp-balanced SDDMM, softmax and SpMM share node-parallel blocks."""
    x = _prepare(g, Q, K, V, kind, plan.with_strategy(Strategy.SMMF))
    feas = smmf_feasibility(g, x.plan, x.d)
    if not feas.feasible:
        raise SharedMemoryError(feas.worst_block, feas.required_bytes, feas.budget_bytes)
    t0 = time.perf_counter_ns()
    O, P = _alloc(x)
    counters = ExecCounters()
    plan = x.plan
    w = plan.vector_width

    def body(block_id, row_range):
        r0, r1 = row_range
        c = ExecCounters()
        e0, e1 = int(g.csr_row_ptr[r0]), int(g.csr_row_ptr[r1])
        n_e = e1 - e0
        c.read("index", (r1 - r0 + 1) * INDEX_BYTES)
        # stage 1: warp-balanced SDDMM into the shared S buffer
        assign = warp_balance(g, row_range, plan.groups_per_block, block_id)
        S_sh = np.empty(n_e, dtype=V.dtype)
        for _gid, (s, e) in assign.per_group_edges:
            if e > s:
                S_sh[s - e0:e - e0] = _scores(x, s, e)
        c.group_loads.append(assign.loads)
        c.read("index", n_e * INDEX_BYTES)
        _charge_sddmm(c, x, n_e, w)
        c.shared(n_e * x.b)
        # barrier; stage 2+3: one group per row, S read twice (max, exp)
        c.shared(2 * n_e * x.b)
        _softmax_spmm_block(x, S_sh, r0, r1, O, P, c)
        return c

    launch(partition_blocks(g, plan.rows_per_block), body, counters, deterministic, workers)
    return _finish(x, O, P, counters, t0)


def run_pmf(g, Q, K, V, kind: SddmmKind, plan: FusionPlan = FusionPlan(Strategy.PMF),
            deterministic: bool = True, workers: Optional[int] = None):
    """Edge-parallel SDDMM launch, then a fused node-parallel softmax + SpMM launch."""
    x = _prepare(g, Q, K, V, kind, plan.with_strategy(Strategy.PMF))
    t0 = time.perf_counter_ns()
    O, P = _alloc(x)
    counters = ExecCounters()
    S = np.empty(g.num_edges, dtype=V.dtype)
    _sddmm_edge_parallel(x, S, counters, deterministic, workers)

    def body(_i, row_range):
        r0, r1 = row_range
        c = ExecCounters()
        e0, e1 = int(g.csr_row_ptr[r0]), int(g.csr_row_ptr[r1])
        c.read("index", (r1 - r0 + 1) * INDEX_BYTES)
        c.read("S", (e1 - e0) * x.b)
        _softmax_spmm_block(x, S[e0:e1], r0, r1, O, P, c)
        return c

    launch(partition_blocks(g, x.plan.rows_per_block), body, counters, deterministic, workers)
    return _finish(x, O, P, counters, t0)


def run_feature_parallel_baseline(g, Q, K, V, kind: SddmmKind,
                                  plan: FusionPlan = FusionPlan(Strategy.FEATURE_PARALLEL_BASELINE),
                                  deterministic: bool = True, workers: Optional[int] = None):
    """Fixed feature-parallel fusion: every stage maps lanes to feature columns.

    Rows are dealt to groups one at a time, so a hub row lands on a single
    group. Each of the ``ceil(d / group_width)`` feature groups of a row
    repeats the softmax reductions, and F is recomputed inside SpMM instead of
    being cached. Dense rows are read with scalar (width 1) accesses.
    """
    x = _prepare(g, Q, K, V, kind, plan.with_strategy(Strategy.FEATURE_PARALLEL_BASELINE))
    t0 = time.perf_counter_ns()
    O, P = _alloc(x)
    counters = ExecCounters()
    p = x.plan
    b, d = x.b, x.d
    feature_groups = max(1, math.ceil(d / p.group_width))

    def body(_i, row_range):
        r0, r1 = row_range
        c = ExecCounters()
        e0, e1 = int(g.csr_row_ptr[r0]), int(g.csr_row_ptr[r1])
        n_e, rows = e1 - e0, r1 - r0
        local_ptr = g.csr_row_ptr[r0:r1 + 1] - e0
        c.read("index", (rows + 1 + n_e) * INDEX_BYTES)
        # SDDMM: group j owns rows r0 + j, r0 + j + G, ...
        loads = [0] * p.groups_per_block
        S_sh = np.empty(n_e, dtype=V.dtype)
        for i, v in enumerate(range(r0, r1)):
            lo, hi = int(g.csr_row_ptr[v]), int(g.csr_row_ptr[v + 1])
            loads[i % p.groups_per_block] += hi - lo
            if hi > lo:
                S_sh[lo - e0:hi - e0] = _scores(x, lo, hi)
        c.group_loads.append(tuple(loads))
        _charge_sddmm(c, x, n_e, 1)
        c.shared(n_e * b)
        # softmax, repeated by each feature group
        _F, z_sum, P_blk = _row_softmax(S_sh, local_ptr)
        P[e0:e1] = P_blk
        c.softmax_scalar_ops += SOFTMAX_OPS_PER_EDGE * n_e * feature_groups
        c.shared(2 * n_e * b * feature_groups)
        c.write("P", n_e * b)
        # SpMM recomputes F from S for every feature group
        lens = np.diff(local_ptr)
        nz = lens > 0
        z_max = np.maximum.reduceat(S_sh, local_ptr[:-1][nz]) if n_e else S_sh[:0]
        F = np.exp(S_sh - np.repeat(z_max, lens[nz]))
        tile = gather_aggregate(F, x.V, g.coo_src[e0:e1], local_ptr, d, p.group_width, O.dtype)
        if n_e:
            tile[np.flatnonzero(nz)] /= z_sum[:, None]
        O[r0:r1] = tile
        c.shared(n_e * b * feature_groups)
        c.read("V", n_e * d * b)
        c.transactions("spmm", n_e * d)
        c.write("O", rows * d * b)
        c.transactions("spmm", rows * d)
        return c

    launch(partition_blocks(g, p.rows_per_block), body, counters, deterministic, workers)
    return _finish(x, O, P, counters, t0)


def run_unfused(g, Q, K, V, kind: SddmmKind, plan: Optional[FusionPlan] = None,
                deterministic: bool = True, workers: Optional[int] = None):
    """Three separate launches; S and F round-trip through global memory."""
    plan = FusionPlan(Strategy.UNFUSED) if plan is None else plan
    fallback = plan.fallback_from is not None
    x = _prepare(g, Q, K, V, kind, replace(plan, strategy=Strategy.UNFUSED))
    t0 = time.perf_counter_ns()
    O, P = _alloc(x)
    counters = ExecCounters(fallback=fallback)
    b, d, w = x.b, x.d, x.plan.vector_width
    S = np.empty(g.num_edges, dtype=V.dtype)
    F = np.empty(g.num_edges, dtype=V.dtype)
    _sddmm_edge_parallel(x, S, counters, deterministic, workers)
    blocks = partition_blocks(g, x.plan.rows_per_block)

    def softmax_body(_i, row_range):
        r0, r1 = row_range
        c = ExecCounters()
        e0, e1 = int(g.csr_row_ptr[r0]), int(g.csr_row_ptr[r1])
        n_e = e1 - e0
        c.read("index", (r1 - r0 + 1) * INDEX_BYTES)
        c.read("S", n_e * b)
        _f, _z, P_blk = _row_softmax(S[e0:e1], g.csr_row_ptr[r0:r1 + 1] - e0)
        F[e0:e1] = P_blk
        P[e0:e1] = P_blk
        c.softmax_scalar_ops += SOFTMAX_OPS_PER_EDGE * n_e
        c.write("F", n_e * b)
        c.write("P", n_e * b)
        return c

    def spmm_body(_i, row_range):
        r0, r1 = row_range
        c = ExecCounters()
        e0, e1 = int(g.csr_row_ptr[r0]), int(g.csr_row_ptr[r1])
        n_e, rows = e1 - e0, r1 - r0
        local_ptr = g.csr_row_ptr[r0:r1 + 1] - e0
        c.read("index", (rows + 1 + n_e) * INDEX_BYTES)
        c.read("F", n_e * b)
        O[r0:r1] = gather_aggregate(F[e0:e1], x.V, g.coo_src[e0:e1], local_ptr, d,
                                    x.plan.group_width * w, O.dtype)
        c.read("V", n_e * d * b)
        c.transactions("spmm", n_e * vectorized_transactions(d, w))
        c.write("O", rows * d * b)
        c.transactions("spmm", rows * vectorized_transactions(d, w))
        return c

    launch(blocks, softmax_body, counters, deterministic, workers)
    launch(blocks, spmm_body, counters, deterministic, workers)
    return _finish(x, O, P, counters, t0)


_RUNNERS = {
    Strategy.SMMF: run_smmf,
    Strategy.PMF: run_pmf,
    Strategy.FEATURE_PARALLEL_BASELINE: run_feature_parallel_baseline,
    Strategy.UNFUSED: run_unfused,
}


def run_forward(g, Q, K, V, kind: SddmmKind, plan: FusionPlan,
                deterministic: bool = True, workers: Optional[int] = None):
    """Dispatch on ``plan.strategy``; returns ``(O, ctx, counters)``."""
    return _RUNNERS[plan.strategy](g, Q, K, V, kind, plan,
                                   deterministic=deterministic, workers=workers)
