"""Backward pass of the sparse attention pipeline.

Reference (unfused) ops mirror the forward kernels; ``fused_backward`` runs
the same math with the forward engine's block machinery. With the query at
the source of each edge, the row-fused chain (dP SDDMM, softmax backward,
SpMM) produces the key gradient; query and value gradients aggregate over
out-edges through the CSC view.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .engine import (
    INDEX_BYTES,
    ExecCounters,
    ForwardContext,
    gather_aggregate,
    launch,
    run_forward,
    vectorized_transactions,
)
from .graph import GraphTopology
from .kernels import (
    NonFiniteError,
    SddmmKind,
    attention_forward,
    check_rows,
    l2_normalize_rows,
    l2_normalize_rows_backward,
    leaky_relu_grad,
    segment_reduce,
    spmm,
)
from .schedule import (
    FusionPlan,
    Strategy,
    auto_plan,
    edge_parallel_partition,
    partition_blocks,
    pmf_num_blocks,
    smmf_feasibility,
    split_even,
    warp_balance,
)


@dataclass
class GradBundle:
    """Gradients w.r.t. the pipeline inputs.

    For add-scores ``dQ``/``dK`` hold the ``N x 1`` gradients of ``el``/``er``.
    """

    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    dS: np.ndarray
    dP: np.ndarray

    @property
    def d_el(self) -> np.ndarray:
        return self.dQ

    @property
    def d_er(self) -> np.ndarray:
        return self.dK

    def arrays(self) -> dict[str, np.ndarray]:
        return {"dQ": self.dQ, "dK": self.dK, "dV": self.dV, "dS": self.dS, "dP": self.dP}


def csc_aggregate(g: GraphTopology, w: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``out[u] = sum over out-edges u->v of w[e] * X[v]`` (``w`` in CSR edge order)."""
    perm = g.csc_edge_perm
    out = np.zeros((g.num_nodes, X.shape[1]), dtype=np.result_type(w, X))
    cols = np.flatnonzero(np.diff(g.csc_col_ptr))
    if cols.size:
        out[cols] = segment_reduce(np.add, w[perm][:, None] * X[g.csc_row_idx], g.csc_col_ptr)
    return out


# ---------------------------------------------------------------------------
# reference backward ops
# ---------------------------------------------------------------------------

def spmm_backward(g: GraphTopology, ctx: ForwardContext, dO: np.ndarray):
    """Returns ``(dP, dV)`` for ``O = spmm(P, V)``."""
    check_rows("dO", dO, g.num_nodes, ctx.V.shape[1])
    dP = np.einsum("ij,ij->i", dO[g.coo_dst], ctx.V[g.coo_src])
    dV = csc_aggregate(g, ctx.P, dO)
    return dP, dV


def softmax_backward(g: GraphTopology, P: np.ndarray, dP: np.ndarray) -> np.ndarray:
    """Row-wise softmax Jacobian: ``dS = P * (dP - sum_row(P * dP))``."""
    lens = np.diff(g.csr_row_ptr)
    t = segment_reduce(np.add, P * dP, g.csr_row_ptr)
    return P * (dP - np.repeat(t, lens[lens > 0]))


def sddmm_backward(g: GraphTopology, Q: np.ndarray, K: np.ndarray, dS: np.ndarray,
                   kind: SddmmKind):
    """Gradients of the score operator: ``(dQ, dK)``, or ``(d_el, d_er)`` for add-scores."""
    n = g.num_nodes
    if dS.shape != (g.num_edges,):
        raise ValueError(f"dS has shape {dS.shape}, expected ({g.num_edges},)")
    if not kind.is_dot:
        check_rows("el", Q, n, 1)
        check_rows("er", K, n, 1)
        z = Q[g.coo_src, 0] + K[g.coo_dst, 0]
        dz = dS * leaky_relu_grad(z, kind.leaky_slope)
        ones = np.ones((n, 1), dtype=dz.dtype)
        return csc_aggregate(g, dz, ones), spmm(g, dz, ones)
    check_rows("Q", Q, n)
    check_rows("K", K, n, Q.shape[1])
    Qe, Ke = Q, K
    if kind.l2_normalize_inputs:
        Qe = l2_normalize_rows(Q, kind.eps)
        Ke = l2_normalize_rows(K, kind.eps)
    coef = dS * kind.scale if kind.scale != 1.0 else dS
    dQ = csc_aggregate(g, coef, Ke)
    dK = spmm(g, coef, Qe)
    if kind.l2_normalize_inputs:
        dQ = l2_normalize_rows_backward(Q, dQ, kind.eps)
        dK = l2_normalize_rows_backward(K, dK, kind.eps)
    return dQ, dK


def unfused_backward(g: GraphTopology, ctx: ForwardContext, dO: np.ndarray,
                     plan: Optional[FusionPlan] = None, fallback: bool = False):
    """Five separate launches: dP SDDMM, dV SpMM, softmax backward, dQ SpMM, dK SpMM."""
    t0 = time.perf_counter_ns()
    plan = plan or ctx.plan
    w = plan.vector_width
    b = ctx.V.dtype.itemsize
    d, dq = ctx.V.shape[1], ctx.Q.shape[1]
    n, e = g.num_nodes, g.num_edges
    c = ExecCounters(fallback=fallback)
    row_txn_d = vectorized_transactions(d, w)
    row_txn_q = vectorized_transactions(dq, w)

    dP, dV = spmm_backward(g, ctx, dO)
    c.kernel_launches += 1  # dP = (dO V^T) masked
    c.read("index", 2 * e * INDEX_BYTES)
    c.read("dO", e * d * b)
    c.read("V", e * d * b)
    c.transactions("sddmm", 2 * e * row_txn_d)
    c.write("dP", e * b)
    c.kernel_launches += 1  # dV = P^T dO
    c.read("index", (n + 1 + e) * INDEX_BYTES)
    c.read("P", e * b)
    c.read("dO", e * d * b)
    c.write("dV", n * d * b)
    c.transactions("spmm", (e + n) * row_txn_d)

    dS = softmax_backward(g, ctx.P, dP)
    c.kernel_launches += 1
    c.read("index", (n + 1) * INDEX_BYTES)
    c.read("P", e * b)
    c.read("dP", e * b)
    c.write("dS", e * b)

    dQ, dK = sddmm_backward(g, ctx.Q, ctx.K, dS, ctx.kind)
    for name, other in (("dQ", "K"), ("dK", "Q")):
        c.kernel_launches += 1
        c.read("index", (n + 1 + e) * INDEX_BYTES)
        c.read("dS", e * b)
        c.read(other, e * dq * b)
        c.write(name, n * dq * b)
        c.transactions("spmm", (e + n) * row_txn_q)
    c.elapsed_ns = time.perf_counter_ns() - t0
    return GradBundle(dQ, dK, dV, dS, dP), c


# ---------------------------------------------------------------------------
# fused backward
# ---------------------------------------------------------------------------

def fused_backward(g: GraphTopology, ctx: ForwardContext, dO: np.ndarray,
                   plan: Optional[FusionPlan] = None, deterministic: bool = True,
                   workers: Optional[int] = None):
    """Fused backward; returns ``(GradBundle, ExecCounters)``.

    Launch model: SMMF-family plans use two launches (row-fused dP SDDMM +
    softmax backward + key SpMM, then one CSC launch for query and value
    gradients); PMF plans split the dP SDDMM into its own edge-parallel
    launch (three total). Unfused plans, and SMMF plans whose blocks overflow
    shared memory, run ``unfused_backward`` (five launches); the latter sets
    ``counters.fallback``.
    """
    plan = plan or ctx.plan
    kind = ctx.kind
    check_rows("dO", dO, g.num_nodes, ctx.V.shape[1])
    if dO.dtype != ctx.V.dtype:
        raise ValueError(f"dO dtype {dO.dtype} differs from forward dtype {ctx.V.dtype}")
    if plan.strategy is Strategy.UNFUSED:
        return unfused_backward(g, ctx, dO, plan, fallback=plan.fallback_from is not None)
    split_sddmm = plan.strategy is Strategy.PMF
    b = ctx.V.dtype.itemsize
    plan = replace(plan, dtype_bytes=b)
    dq = ctx.Q.shape[1]
    if not split_sddmm and not smmf_feasibility(g, plan, dq).feasible:
        return unfused_backward(g, ctx, dO, plan, fallback=True)

    t0 = time.perf_counter_ns()
    n, d = g.num_nodes, ctx.V.shape[1]
    dtype = ctx.V.dtype
    w = plan.vector_width
    chunk = plan.group_width * w
    Qe = ctx.Q_eff if ctx.Q_eff is not None else ctx.Q
    Ke = ctx.K_eff if ctx.K_eff is not None else ctx.K
    P = ctx.P
    dP = np.empty(g.num_edges, dtype=dtype)
    dS = np.empty(g.num_edges, dtype=dtype)
    dQ = np.zeros_like(ctx.Q)
    dK = np.zeros_like(ctx.K)
    dV = np.zeros_like(ctx.V)
    counters = ExecCounters()
    row_txn_d = vectorized_transactions(d, w)
    row_txn_q = vectorized_transactions(dq, w)
    blocks = partition_blocks(g, plan.rows_per_block)

    def dp_values(lo, hi):
        return np.einsum("ij,ij->i", dO[g.coo_dst[lo:hi]], ctx.V[g.coo_src[lo:hi]])

    if split_sddmm:
        def dp_body(_i, rng):
            lo, hi = rng
            c = ExecCounters()
            chunks = split_even(lo, hi, plan.groups_per_block)
            for s, e in chunks:
                if e > s:
                    dP[s:e] = dp_values(s, e)
            c.block_edge_loads.append(hi - lo)
            c.group_loads.append(tuple(e - s for s, e in chunks))
            c.read("index", 2 * (hi - lo) * INDEX_BYTES)
            c.read("dO", (hi - lo) * d * b)
            c.read("V", (hi - lo) * d * b)
            c.transactions("sddmm", 2 * (hi - lo) * row_txn_d)
            c.write("dP", (hi - lo) * b)
            return c

        launch(edge_parallel_partition(g, pmf_num_blocks(g, plan)), dp_body, counters,
               deterministic, workers)

    def row_body(block_id, row_range):
        r0, r1 = row_range
        c = ExecCounters()
        e0, e1 = int(g.csr_row_ptr[r0]), int(g.csr_row_ptr[r1])
        n_e, rows = e1 - e0, r1 - r0
        local_ptr = g.csr_row_ptr[r0:r1 + 1] - e0
        src = g.coo_src[e0:e1]
        c.read("index", (rows + 1 + n_e) * INDEX_BYTES)
        if split_sddmm:
            c.read("dP", n_e * b)
        else:
            assign = warp_balance(g, row_range, plan.groups_per_block, block_id)
            for _gid, (s, e) in assign.per_group_edges:
                if e > s:
                    dP[s:e] = dp_values(s, e)
            c.group_loads.append(assign.loads)
            c.read("dO", n_e * d * b)
            c.read("V", n_e * d * b)
            c.transactions("sddmm", 2 * n_e * row_txn_d)
            c.write("dP", n_e * b)
            c.shared(n_e * b)
        # softmax backward on the block's rows
        lens = np.diff(local_ptr)
        p_blk, dp_blk = P[e0:e1], dP[e0:e1]
        c.read("P", n_e * b)
        if n_e:
            t = np.add.reduceat(p_blk * dp_blk, local_ptr[:-1][lens > 0])
            dS[e0:e1] = p_blk * (dp_blk - np.repeat(t, lens[lens > 0]))
        c.shared(3 * n_e * b)
        c.write("dS", n_e * b)
        # key-side SpMM over the same rows
        ds_blk = dS[e0:e1]
        if kind.is_dot:
            coef = ds_blk * kind.scale if kind.scale != 1.0 else ds_blk
            tile = gather_aggregate(coef, Qe, src, local_ptr, dq, chunk, dtype)
            if kind.l2_normalize_inputs:
                tile = l2_normalize_rows_backward(ctx.K[r0:r1], tile, kind.eps)
            c.read("Q", n_e * dq * b)
        else:
            z = Qe[src, 0] + Ke[g.coo_dst[e0:e1], 0]
            dz = ds_blk * leaky_relu_grad(z, kind.leaky_slope)
            tile = gather_aggregate(dz, np.ones((n, 1), dtype=dtype), src, local_ptr, 1, chunk, dtype)
            c.read("Q", n_e * b)
            c.read("K", rows * b)
        dK[r0:r1] = tile
        c.transactions("spmm", (n_e + rows) * row_txn_q)
        c.write("dK", rows * dq * b)
        return c

    def col_body(_i, col_range):
        u0, u1 = col_range
        c = ExecCounters()
        c0, c1 = int(g.csc_col_ptr[u0]), int(g.csc_col_ptr[u1])
        n_e, cols = c1 - c0, u1 - u0
        local_ptr = g.csc_col_ptr[u0:u1 + 1] - c0
        perm = g.csc_edge_perm[c0:c1]
        dst = g.csc_row_idx[c0:c1]
        c.read("index", (cols + 1 + 2 * n_e) * INDEX_BYTES)
        dV[u0:u1] = gather_aggregate(P[perm], dO, dst, local_ptr, d, chunk, dtype)
        c.read("P", n_e * b)
        c.read("dO", n_e * d * b)
        c.write("dV", cols * d * b)
        c.transactions("spmm", (n_e + cols) * row_txn_d)
        ds_blk = dS[perm]
        c.read("dS", n_e * b)
        if kind.is_dot:
            coef = ds_blk * kind.scale if kind.scale != 1.0 else ds_blk
            tile = gather_aggregate(coef, Ke, dst, local_ptr, dq, chunk, dtype)
            if kind.l2_normalize_inputs:
                tile = l2_normalize_rows_backward(ctx.Q[u0:u1], tile, kind.eps)
            c.read("K", n_e * dq * b)
        else:
            src = np.repeat(np.arange(u0, u1), np.diff(local_ptr))
            z = Qe[src, 0] + Ke[dst, 0]
            dz = ds_blk * leaky_relu_grad(z, kind.leaky_slope)
            tile = gather_aggregate(dz, np.ones((n, 1), dtype=dtype), dst, local_ptr, 1, chunk, dtype)
            c.read("K", n_e * b)
            c.read("Q", cols * b)
        dQ[u0:u1] = tile
        c.transactions("spmm", (n_e + cols) * row_txn_q)
        c.write("dQ", cols * dq * b)
        return c

    launch(blocks, row_body, counters, deterministic, workers)
    launch(blocks, col_body, counters, deterministic, workers)
    counters.elapsed_ns = time.perf_counter_ns() - t0
    return GradBundle(dQ, dK, dV, dS, dP), counters


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def _loss_weights(loss, shape, dtype) -> np.ndarray:
    if isinstance(loss, str):
        if loss != "sum":
            raise ValueError(f"unknown loss {loss!r}; pass 'sum' or an array of weights")
        return np.ones(shape, dtype=dtype)
    weights = np.asarray(loss, dtype=dtype)
    if weights.shape != shape:
        raise ValueError(f"loss weights have shape {weights.shape}, expected {shape}")
    return weights


def gradient_errors(g: GraphTopology, Q, K, V, kind: SddmmKind, loss="sum", h: float = 1e-5,
                    plan: Optional[FusionPlan] = None) -> dict[str, float]:
    """Normwise relative error between analytic and central-difference gradients.

    The loss is ``sum(weights * O)`` with ``weights`` all-ones for ``"sum"``.
    Analytic gradients come from the fused engine; numeric ones from the
    reference forward pipeline.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"h must lie in [1e-7, 1e-4], got {h}")
    arrays = {"Q": Q, "K": K, "V": V}
    for name, arr in arrays.items():
        if arr.dtype != np.float64:
            raise ValueError(f"finite differences need float64 inputs; {name} is {arr.dtype}")
    R = _loss_weights(loss, (g.num_nodes, V.shape[1]), np.float64)
    plan = plan or auto_plan(g, kind, 8, Q.shape[1])
    _O, ctx, _c = run_forward(g, Q, K, V, kind, plan)
    grads, _c = fused_backward(g, ctx, R, plan)
    analytic = {"Q": grads.dQ, "K": grads.dK, "V": grads.dV}

    def loss_of(q, k, v) -> float:
        O, _ = attention_forward(g, q, k, v, kind)
        val = float(np.sum(R * O))
        if not np.isfinite(val):
            raise NonFiniteError("loss is not finite")
        return val

    loss_of(Q, K, V)
    errors = {}
    for name, arr in arrays.items():
        numeric = np.zeros_like(arr)
        work = {k: v.copy() for k, v in arrays.items()}
        x = work[name]
        for idx in np.ndindex(arr.shape):
            orig = x[idx]
            x[idx] = orig + h
            up = loss_of(work["Q"], work["K"], work["V"])
            x[idx] = orig - h
            down = loss_of(work["Q"], work["K"], work["V"])
            x[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic[name]).max(initial=0.0))
        diff = np.abs(numeric - analytic[name]).max(initial=0.0)
        errors[name] = float(diff / scale) if scale > 0 else 0.0
    return errors


def finite_difference_check(g: GraphTopology, Q, K, V, kind: SddmmKind, loss="sum",
                            h: float = 1e-5, plan: Optional[FusionPlan] = None) -> float:
    """Max normwise relative gradient error over Q, K and V."""
    return max(gradient_errors(g, Q, K, V, kind, loss, h, plan).values())
