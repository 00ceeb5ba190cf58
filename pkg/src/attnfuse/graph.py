"""Sparse adjacency storage (CSR + COO + CSC hybrid), degree statistics,
batching and synthetic generators.

Rows of the CSR view are destination nodes; row ``v`` lists the in-neighbors
``u`` of ``v`` sorted by source id. Every per-edge array in the package is
aligned to this CSR edge order.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

INDEX_DTYPE = np.int64


class GraphError(ValueError):
    """Invalid graph construction input."""


@dataclass(frozen=True, eq=False)
class GraphTopology:
    num_nodes: int
    num_edges: int
    csr_row_ptr: np.ndarray
    csr_col_idx: np.ndarray
    coo_dst: np.ndarray
    coo_src: np.ndarray
    csc_col_ptr: np.ndarray
    csc_row_idx: np.ndarray
    csc_edge_perm: np.ndarray

    def __post_init__(self):
        for name in ("csr_row_ptr", "csr_col_idx", "coo_dst", "coo_src",
                     "csc_col_ptr", "csc_row_idx", "csc_edge_perm"):
            getattr(self, name).setflags(write=False)

    @property
    def in_degrees(self) -> np.ndarray:
        return np.diff(self.csr_row_ptr)

    @property
    def out_degrees(self) -> np.ndarray:
        return np.diff(self.csc_col_ptr)

    def row_edges(self, v: int) -> range:
        return range(int(self.csr_row_ptr[v]), int(self.csr_row_ptr[v + 1]))

    def same_structure(self, other: "GraphTopology") -> bool:
        if self.num_nodes != other.num_nodes or self.num_edges != other.num_edges:
            return False
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("csr_row_ptr", "csr_col_idx", "csc_col_ptr",
                      "csc_row_idx", "csc_edge_perm")
        )

    def __repr__(self) -> str:
        return f"GraphTopology(num_nodes={self.num_nodes}, num_edges={self.num_edges})"

    def validate(self) -> None:
        """Check every structural invariant; raises GraphError on the first violation."""
        n, e = self.num_nodes, self.num_edges
        rp = self.csr_row_ptr
        if len(rp) != n + 1 or rp[0] != 0 or rp[-1] != e or np.any(np.diff(rp) < 0):
            raise GraphError("malformed csr_row_ptr")
        for arr in (self.csr_col_idx, self.coo_src, self.coo_dst, self.csc_row_idx):
            if len(arr) != e or (e and (arr.min() < 0 or arr.max() >= n)):
                raise GraphError("node id array out of range or wrong length")
        if not np.array_equal(self.coo_src, self.csr_col_idx):
            raise GraphError("coo_src does not match csr_col_idx")
        if not np.array_equal(self.coo_dst, np.repeat(np.arange(n), np.diff(rp))):
            raise GraphError("coo_dst does not match csr rows")
        if not np.array_equal(np.sort(self.csc_edge_perm), np.arange(e)):
            raise GraphError("csc_edge_perm is not a permutation")
        if not np.array_equal(self.csc_row_idx, self.coo_dst[self.csc_edge_perm]):
            raise GraphError("csc_row_idx inconsistent with csc_edge_perm")
        if not np.array_equal(self.csc_col_ptr, _offsets(self.coo_src, n)):
            raise GraphError("csc_col_ptr inconsistent with sources")
        if not np.all(np.diff(self.coo_src[self.csc_edge_perm]) >= 0):
            raise GraphError("csc columns out of order")
        # strictly increasing columns within each row
        same_row = self.coo_dst[1:] == self.coo_dst[:-1]
        if np.any(np.diff(self.csr_col_idx)[same_row] <= 0):
            raise GraphError("csr row not strictly increasing")


def _offsets(keys: np.ndarray, n: int) -> np.ndarray:
    ptr = np.zeros(n + 1, dtype=INDEX_DTYPE)
    np.cumsum(np.bincount(keys, minlength=n), out=ptr[1:])
    return ptr


def from_coo(num_nodes: int, src: Sequence[int], dst: Sequence[int]) -> GraphTopology:
    """Build the canonical topology from an unordered edge list ``src[i] -> dst[i]``."""
    n = int(num_nodes)
    if n < 0:
        raise GraphError(f"negative node count {n}")
    src = np.asarray(src, dtype=INDEX_DTYPE).reshape(-1)
    dst = np.asarray(dst, dtype=INDEX_DTYPE).reshape(-1)
    if src.shape != dst.shape:
        raise GraphError(f"src/dst length mismatch: {len(src)} vs {len(dst)}")
    for name, arr in (("src", src), ("dst", dst)):
        bad = np.flatnonzero((arr < 0) | (arr >= n))
        if bad.size:
            i = int(bad[0])
            raise GraphError(
                f"{name} node id {int(arr[i])} out of range for {n} nodes "
                f"(edge {int(src[i])}->{int(dst[i])})")

    order = np.lexsort((src, dst))
    src, dst = src[order], dst[order]
    dup = np.flatnonzero((src[1:] == src[:-1]) & (dst[1:] == dst[:-1]))
    if dup.size:
        i = int(dup[0])
        raise GraphError(f"duplicate edge {int(src[i])}->{int(dst[i])}")

    e = len(src)
    perm = np.lexsort((dst, src)).astype(INDEX_DTYPE)
    return GraphTopology(
        num_nodes=n,
        num_edges=e,
        csr_row_ptr=_offsets(dst, n),
        csr_col_idx=src,
        coo_dst=dst,
        coo_src=src.copy(),
        csc_col_ptr=_offsets(src, n),
        csc_row_idx=dst[perm],
        csc_edge_perm=perm,
    )


@dataclass(frozen=True)
class DegreeStats:
    avg_degree: float
    max_degree: int
    min_degree: int
    num_nodes: int = 0
    num_edges: int = 0

    @property
    def avg_exact(self) -> Fraction:
        return Fraction(self.num_edges, self.num_nodes) if self.num_nodes else Fraction(0)


def degree_stats(g: GraphTopology) -> DegreeStats:
    deg = g.in_degrees
    if g.num_nodes == 0:
        return DegreeStats(0.0, 0, 0, 0, 0)
    return DegreeStats(
        avg_degree=g.num_edges / g.num_nodes,
        max_degree=int(deg.max()),
        min_degree=int(deg.min()),
        num_nodes=g.num_nodes,
        num_edges=g.num_edges,
    )


def super_node_threshold(shared_mem_bytes: int, dtype_bytes: int) -> int:
    """Smallest in-degree that counts as a super node for the given shared-memory capacity."""
    if dtype_bytes <= 0:
        raise ValueError(f"dtype_bytes must be positive, got {dtype_bytes}")
    return int(shared_mem_bytes) // int(dtype_bytes)


def has_super_node(stats: DegreeStats, shared_mem_bytes: int, dtype_bytes: int) -> bool:
    return stats.max_degree >= super_node_threshold(shared_mem_bytes, dtype_bytes)


def batch_graphs(gs: Sequence[GraphTopology]) -> GraphTopology:
    """Block-diagonal union; graph ``i`` keeps its structure shifted by the node offset."""
    if not gs:
        raise GraphError("batch_graphs needs at least one graph")
    if len(gs) == 1:
        return gs[0]
    srcs, dsts, offset = [], [], 0
    for g in gs:
        srcs.append(g.coo_src + offset)
        dsts.append(g.coo_dst + offset)
        offset += g.num_nodes
    return from_coo(offset, np.concatenate(srcs), np.concatenate(dsts))


def _check_avg_degree(n: int, avg_degree: float) -> int:
    if n < 0 or avg_degree < 0:
        raise GraphError("node count and average degree must be non-negative")
    if avg_degree > 0 and avg_degree >= n:
        raise GraphError(f"average degree {avg_degree} infeasible for {n} nodes")
    return int(round(n * avg_degree))


def _sample_pairs(rng: np.random.Generator, num_src: int, dst_pool: np.ndarray,
                  count: int) -> tuple[np.ndarray, np.ndarray]:
    total = num_src * len(dst_pool)
    if count > total:
        raise GraphError(f"cannot place {count} distinct edges among {total} pairs")
    flat = rng.choice(total, size=count, replace=False)
    return flat % num_src, dst_pool[flat // num_src]


def gen_random(n: int, avg_degree: float, seed: int) -> GraphTopology:
    """Uniform random directed graph with ``round(n * avg_degree)`` distinct edges."""
    e = _check_avg_degree(n, avg_degree)
    rng = np.random.default_rng(seed)
    src, dst = _sample_pairs(rng, n, np.arange(n), e)
    return from_coo(n, src, dst)


def gen_super_node(n: int, avg_degree: float, hub_degree: int, seed: int) -> GraphTopology:
    """Random graph plus one hub whose in-degree is exactly ``hub_degree``.

    The remaining ``round(n * avg_degree) - hub_degree`` edges (if any) land on
    non-hub destinations.
    """
    if not 0 <= hub_degree <= n:
        raise GraphError(f"hub_degree {hub_degree} must lie in [0, {n}]")
    e = _check_avg_degree(n, avg_degree)
    rng = np.random.default_rng(seed)
    hub = int(rng.integers(n))
    hub_src = rng.choice(n, size=hub_degree, replace=False)
    others = np.delete(np.arange(n), hub)
    src, dst = _sample_pairs(rng, n, others, max(e - hub_degree, 0))
    return from_coo(
        n,
        np.concatenate([hub_src, src]),
        np.concatenate([np.full(hub_degree, hub), dst]),
    )


def write_graph(g: GraphTopology, path: str | Path) -> None:
    """Text format: ``N E`` header, then one ``src dst`` line per edge in CSR order."""
    with open(path, "w") as fh:
        fh.write(f"{g.num_nodes} {g.num_edges}\n")
        for u, v in zip(g.coo_src.tolist(), g.coo_dst.tolist()):
            fh.write(f"{u} {v}\n")


def read_graph(path: str | Path) -> GraphTopology:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise GraphError(f"{path}: header must be 'N E'")
        n, e = int(header[0]), int(header[1])
        tokens = fh.read().split()
    if len(tokens) != 2 * e:
        raise GraphError(f"{path}: expected {e} edge lines, found {len(tokens) / 2:g}")
    body = np.array(tokens, dtype=INDEX_DTYPE).reshape(e, 2)
    return from_coo(n, body[:, 0], body[:, 1])
