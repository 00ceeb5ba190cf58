"""Reference (unfused) kernels: SDDMM variants, stable edge softmax, SpMM, and a
dense oracle that materializes the whole N x N attention matrix.

Edge ``e`` runs from ``u = coo_src[e]`` to ``v = coo_dst[e]``. Dot scores put
the query at the source and the key at the destination: ``s_uv = scale *
<q_u, k_v>``. Softmax normalizes over each destination's incoming edges.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .graph import GraphTopology

ORACLE_MAX_NODES = 4096


class NonFiniteError(FloatingPointError):
    pass


class SddmmVariant(enum.Enum):
    DOT = "dot"
    ADD = "add"


@dataclass(frozen=True)
class SddmmKind:
    """Edge-score operator.

    ``DOT`` computes ``scale * <q_u, k_v>`` on ``N x d`` inputs, optionally on
    L2-normalized rows (AGNN). ``ADD`` computes ``LeakyReLU(el_u + er_v)`` on
    ``N x 1`` per-node scalars (GAT).
    """

    variant: SddmmVariant = SddmmVariant.DOT
    scale: float = 1.0
    leaky_slope: float = 0.2
    l2_normalize_inputs: bool = False
    eps: float = 1e-12

    def __post_init__(self):
        if self.variant is SddmmVariant.ADD:
            if not 0.0 < self.leaky_slope <= 1.0:
                raise ValueError(f"leaky_slope must lie in (0, 1], got {self.leaky_slope}")
            if self.l2_normalize_inputs:
                raise ValueError("L2 input normalization only applies to dot scores")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def dot(cls, scale: float = 1.0) -> "SddmmKind":
        return cls(SddmmVariant.DOT, scale=scale)

    @classmethod
    def agnn(cls, beta: float = 1.0, eps: float = 1e-12) -> "SddmmKind":
        return cls(SddmmVariant.DOT, scale=beta, l2_normalize_inputs=True, eps=eps)

    @classmethod
    def add(cls, leaky_slope: float = 0.2) -> "SddmmKind":
        return cls(SddmmVariant.ADD, leaky_slope=leaky_slope)

    @property
    def is_dot(self) -> bool:
        return self.variant is SddmmVariant.DOT


def check_rows(name: str, x: np.ndarray, rows: int, cols: int | None = None) -> None:
    if x.ndim != 2 or x.shape[0] != rows or (cols is not None and x.shape[1] != cols):
        want = f"({rows}, {cols if cols is not None else 'd'})"
        raise ValueError(f"{name} has shape {x.shape}, expected {want}")


def check_finite(name: str, x: np.ndarray) -> None:
    """Raise NonFiniteError if ``x`` holds NaN or inf; kernels themselves never clamp."""
    bad = np.flatnonzero(~np.isfinite(np.asarray(x).reshape(-1)))
    if bad.size:
        raise NonFiniteError(f"{name} has {bad.size} non-finite entries (first at flat index {bad[0]})")


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x >= 0, x, slope * x)


def leaky_relu_grad(x: np.ndarray, slope: float) -> np.ndarray:
    # derivative at exactly 0 takes the negative-side slope
    return np.where(x > 0, 1.0, slope).astype(x.dtype, copy=False)


def nonempty_starts(row_ptr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start offsets and lengths of the non-empty segments of ``row_ptr``."""
    lens = np.diff(row_ptr)
    keep = lens > 0
    return row_ptr[:-1][keep], lens[keep]


def segment_reduce(ufunc: np.ufunc, values: np.ndarray, row_ptr: np.ndarray) -> np.ndarray:
    """Per-row reduction of edge-aligned ``values``; returns one entry per non-empty row."""
    starts, _ = nonempty_starts(row_ptr)
    if starts.size == 0:
        return np.zeros((0,) + values.shape[1:], dtype=values.dtype)
    return ufunc.reduceat(values, starts, axis=0)


def sddmm_dot(g: GraphTopology, Q: np.ndarray, K: np.ndarray, scale: float = 1.0) -> np.ndarray:
    n = g.num_nodes
    check_rows("Q", Q, n)
    check_rows("K", K, n, Q.shape[1])
    s = np.einsum("ij,ij->i", Q[g.coo_src], K[g.coo_dst])
    return s * scale if scale != 1.0 else s


def sddmm_add(g: GraphTopology, el: np.ndarray, er: np.ndarray, leaky_slope: float) -> np.ndarray:
    n = g.num_nodes
    check_rows("el", el, n, 1)
    check_rows("er", er, n, 1)
    z = el[g.coo_src, 0] + er[g.coo_dst, 0]
    return leaky_relu(z, leaky_slope)


def l2_normalize_rows(X: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.maximum(norms, eps)


def l2_normalize_rows_backward(X: np.ndarray, dY: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Vector-Jacobian product of ``l2_normalize_rows`` at ``X``."""
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    denom = np.maximum(norms, eps)
    Y = X / denom
    proj = np.sum(Y * dY, axis=1, keepdims=True)
    # below eps the map is linear: y = x / eps
    return np.where(norms > eps, (dY - Y * proj) / denom, dY / denom)


def sddmm(g: GraphTopology, Q: np.ndarray, K: np.ndarray, kind: SddmmKind) -> np.ndarray:
    """Edge scores for any ``SddmmKind``."""
    if not kind.is_dot:
        return sddmm_add(g, Q, K, kind.leaky_slope)
    if kind.l2_normalize_inputs:
        Q = l2_normalize_rows(Q, kind.eps)
        K = l2_normalize_rows(K, kind.eps)
    return sddmm_dot(g, Q, K, kind.scale)


def edge_softmax(g: GraphTopology, S: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over each destination row's incoming edges."""
    if S.shape != (g.num_edges,):
        raise ValueError(f"S has shape {S.shape}, expected ({g.num_edges},)")
    _, lens = nonempty_starts(g.csr_row_ptr)
    zmax = segment_reduce(np.maximum, S, g.csr_row_ptr)
    f = np.exp(S - np.repeat(zmax, lens))
    zsum = segment_reduce(np.add, f, g.csr_row_ptr)
    return f / np.repeat(zsum, lens)


def spmm(g: GraphTopology, P: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``O[v] = sum over in-edges u->v of P[e] * V[u]``; empty rows give zero rows."""
    check_rows("V", V, g.num_nodes)
    if P.shape != (g.num_edges,):
        raise ValueError(f"P has shape {P.shape}, expected ({g.num_edges},)")
    dtype = np.result_type(P, V)
    out = np.zeros((g.num_nodes, V.shape[1]), dtype=dtype)
    lens = np.diff(g.csr_row_ptr)
    rows = np.flatnonzero(lens)
    if rows.size:
        out[rows] = segment_reduce(np.add, P[:, None] * V[g.coo_src], g.csr_row_ptr)
    return out


def attention_forward(g: GraphTopology, Q, K, V, kind: SddmmKind):
    """Unfused composition ``spmm(edge_softmax(sddmm(...)), V)``; returns ``(O, P)``."""
    P = edge_softmax(g, sddmm(g, Q, K, kind))
    return spmm(g, P, V), P


def dense_oracle_forward(g: GraphTopology, Q, K, V, kind: SddmmKind):
    """Dense masked attention computed in float64.

    Returns ``(S_dense, O)`` where ``S_dense[v, u]`` holds the score of edge
    ``u -> v`` (zero off the adjacency pattern).
    """
    n = g.num_nodes
    if n > ORACLE_MAX_NODES:
        raise ValueError(f"dense oracle limited to {ORACLE_MAX_NODES} nodes, got {n}")
    check_rows("V", V, n)
    mask = np.zeros((n, n), dtype=bool)
    mask[g.coo_dst, g.coo_src] = True
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if kind.is_dot:
        check_rows("Q", Q, n)
        check_rows("K", K, n, Q.shape[1])
        if kind.l2_normalize_inputs:
            Q = Q / np.maximum(np.sqrt((Q * Q).sum(axis=1, keepdims=True)), kind.eps)
            K = K / np.maximum(np.sqrt((K * K).sum(axis=1, keepdims=True)), kind.eps)
        scores = kind.scale * (K @ Q.T)
    else:
        check_rows("el", Q, n, 1)
        check_rows("er", K, n, 1)
        z = K[:, 0][:, None] + Q[:, 0][None, :]
        scores = np.where(z >= 0, z, kind.leaky_slope * z)
    masked = np.where(mask, scores, -np.inf)
    row_max = masked.max(axis=1, initial=-np.inf)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    f = np.where(mask, np.exp(np.where(mask, scores, 0.0) - row_max[:, None]), 0.0)
    z_sum = f.sum(axis=1)
    P = np.divide(f, z_sum[:, None], out=np.zeros_like(f), where=z_sum[:, None] > 0)
    return np.where(mask, scores, 0.0), P @ V
