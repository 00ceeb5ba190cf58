"""Bi-level scheduling: node/edge-parallel block partitions, warp-balanced
intra-block edge splitting, the shared-memory usage model, and the rule that
picks between the single-kernel (SMMF) and split-SDDMM (PMF) fusions.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .graph import DegreeStats, GraphTopology, degree_stats, super_node_threshold
from .kernels import SddmmKind

DEFAULT_SHARED_MEM_BYTES = 48 * 1024


class Strategy(enum.Enum):
    SMMF = "smmf"
    PMF = "pmf"
    UNFUSED = "unfused"
    FEATURE_PARALLEL_BASELINE = "baseline"

    @classmethod
    def parse(cls, name: "str | Strategy") -> "Strategy":
        if isinstance(name, Strategy):
            return name
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(
                f"unknown strategy {name!r}; choose from {[s.value for s in cls]}") from None


@dataclass(frozen=True)
class FusionPlan:
    strategy: Strategy = Strategy.SMMF
    rows_per_block: int = 4
    groups_per_block: int = 4
    group_width: int = 32
    vector_width: int = 4
    shared_mem_budget_bytes: int = DEFAULT_SHARED_MEM_BYTES
    dtype_bytes: int = 4
    # set when an automatically chosen SMMF plan was infeasible and replaced
    fallback_from: Optional[Strategy] = None

    def __post_init__(self):
        if self.rows_per_block < 1 or self.groups_per_block < 1 or self.group_width < 1:
            raise ValueError("block geometry entries must be >= 1")
        if self.vector_width not in (1, 2, 4):
            raise ValueError(f"vector_width must be 1, 2 or 4, got {self.vector_width}")
        if self.dtype_bytes <= 0:
            raise ValueError("dtype_bytes must be positive")

    def with_strategy(self, strategy: "Strategy | str") -> "FusionPlan":
        return replace(self, strategy=Strategy.parse(strategy), fallback_from=None)


@dataclass(frozen=True)
class BlockAssignment:
    block_id: int
    row_range: tuple[int, int]
    per_group_edges: list[tuple[int, tuple[int, int]]]

    @property
    def loads(self) -> tuple[int, ...]:
        return tuple(e - s for _, (s, e) in self.per_group_edges)


def select_strategy(stats: DegreeStats, kind: SddmmKind,
                    shared_mem_bytes: int = DEFAULT_SHARED_MEM_BYTES,
                    dtype_bytes: int = 4) -> Strategy:
    """PMF exactly when a super node exists and the scores are dot products."""
    if kind.is_dot and stats.max_degree >= super_node_threshold(shared_mem_bytes, dtype_bytes):
        return Strategy.PMF
    return Strategy.SMMF


def partition_blocks(g: GraphTopology, rows_per_block: int) -> list[tuple[int, int]]:
    if rows_per_block < 1:
        raise ValueError("rows_per_block must be >= 1")
    n = g.num_nodes
    return [(s, min(s + rows_per_block, n)) for s in range(0, n, rows_per_block)]


def split_even(start: int, stop: int, parts: int) -> list[tuple[int, int]]:
    """Contiguous split of ``[start, stop)`` into ``parts`` chunks; larger chunks first."""
    q, r = divmod(stop - start, parts)
    out, lo = [], start
    for i in range(parts):
        hi = lo + q + (1 if i < r else 0)
        out.append((lo, hi))
        lo = hi
    return out


def warp_balance(g: GraphTopology, row_range: tuple[int, int], groups_per_block: int,
                 block_id: int = 0) -> BlockAssignment:
    """Split the block's edges into ``groups_per_block`` contiguous chunks.

    Chunks follow edge order and may cross row boundaries.
    """
    if groups_per_block < 1:
        raise ValueError("groups_per_block must be >= 1")
    r0, r1 = row_range
    e0, e1 = int(g.csr_row_ptr[r0]), int(g.csr_row_ptr[r1])
    chunks = split_even(e0, e1, groups_per_block)
    return BlockAssignment(block_id, (r0, r1), list(enumerate(chunks)))


def edge_parallel_partition(g: GraphTopology, num_blocks: int) -> list[tuple[int, int]]:
    if num_blocks < 1:
        raise ValueError("num_blocks must be >= 1")
    return split_even(0, g.num_edges, num_blocks)


def pmf_num_blocks(g: GraphTopology, plan: FusionPlan) -> int:
    return max(1, math.ceil(g.num_edges / (plan.groups_per_block * plan.group_width)))


def shared_mem_usage(plan: FusionPlan, block_max_edges: int, d: int) -> int:
    """Bytes of shared memory one SMMF block needs: S and F edge buffers plus the output tile."""
    return plan.dtype_bytes * (2 * block_max_edges + plan.rows_per_block * d)


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    worst_block: int
    required_bytes: int
    budget_bytes: int


def smmf_feasibility(g: GraphTopology, plan: FusionPlan, d: int) -> Feasibility:
    """Check every node-parallel block against the shared-memory budget."""
    ranges = partition_blocks(g, plan.rows_per_block)
    if not ranges:
        return Feasibility(True, -1, 0, plan.shared_mem_budget_bytes)
    starts = np.array([r[0] for r in ranges] + [g.num_nodes])
    block_edges = np.diff(g.csr_row_ptr[starts])
    worst = int(np.argmax(block_edges))
    need = shared_mem_usage(plan, int(block_edges[worst]), d)
    return Feasibility(need <= plan.shared_mem_budget_bytes, worst, need,
                       plan.shared_mem_budget_bytes)


def auto_plan(g: GraphTopology, kind: SddmmKind, dtype_bytes: int, d: int,
              strategy: "Strategy | str | None" = None, **geometry) -> FusionPlan:
    """Build a plan for ``g``.

    With ``strategy=None`` the selection rule decides; if that yields SMMF
    but some block overflows shared memory, the plan falls back to the
    unfused pipeline and records ``fallback_from=SMMF``. An explicit strategy
    is returned as-is (the engine reports infeasibility).
    """
    base = FusionPlan(dtype_bytes=dtype_bytes, **geometry)
    if strategy is not None:
        return base.with_strategy(strategy)
    chosen = select_strategy(degree_stats(g), kind, base.shared_mem_budget_bytes, dtype_bytes)
    plan = base.with_strategy(chosen)
    if chosen is Strategy.SMMF and not smmf_feasibility(g, plan, d).feasible:
        plan = replace(plan, strategy=Strategy.UNFUSED, fallback_from=Strategy.SMMF)
    return plan
