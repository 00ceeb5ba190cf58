"""GT, AGNN and GAT convolutions: dense projections feeding the fused sparse pipeline."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import GradBundle, fused_backward
from .engine import ExecCounters, ForwardContext, run_forward
from .graph import GraphTopology
from .kernels import SddmmKind
from .schedule import FusionPlan, Strategy, auto_plan


class Model(enum.Enum):
    GT = "gt"
    AGNN = "agnn"
    GAT = "gat"


@dataclass(frozen=True)
class ConvSpec:
    model: Model
    dim: int
    scale: Optional[float] = None
    leaky_slope: float = 0.2
    strategy_override: Optional[Strategy] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if isinstance(self.model, str):
            object.__setattr__(self, "model", Model(self.model.lower()))
        if isinstance(self.strategy_override, str):
            object.__setattr__(self, "strategy_override", Strategy.parse(self.strategy_override))

    @property
    def kind(self) -> SddmmKind:
        if self.model is Model.GAT:
            return SddmmKind.add(self.leaky_slope)
        if self.model is Model.AGNN:
            return SddmmKind.agnn(1.0 if self.scale is None else self.scale)
        return SddmmKind.dot(1.0 / math.sqrt(self.dim) if self.scale is None else self.scale)


def init_weights(spec: ConvSpec, in_dim: int, seed: int = 0, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    std = 1.0 / math.sqrt(in_dim)
    if spec.model is Model.GAT:
        return {
            "W": (rng.standard_normal((in_dim, spec.dim)) * std).astype(dtype),
            "a_l": (rng.standard_normal(spec.dim) / math.sqrt(spec.dim)).astype(dtype),
            "a_r": (rng.standard_normal(spec.dim) / math.sqrt(spec.dim)).astype(dtype),
        }
    return {name: (rng.standard_normal((in_dim, spec.dim)) * std).astype(dtype)
            for name in ("W_q", "W_k", "W_v")}


def project(spec: ConvSpec, X: np.ndarray, weights: dict):
    """Dense projections; returns the ``(Q, K, V)`` operands of the sparse pipeline."""
    if spec.model is Model.GAT:
        W = weights["W"]
        if W.shape != (X.shape[1], spec.dim):
            raise ValueError(f"W has shape {W.shape}, expected {(X.shape[1], spec.dim)}")
        H = X @ W
        return (H @ weights["a_l"])[:, None], (H @ weights["a_r"])[:, None], H
    out = []
    for name in ("W_q", "W_k", "W_v"):
        W = weights[name]
        if W.shape != (X.shape[1], spec.dim):
            raise ValueError(f"{name} has shape {W.shape}, expected {(X.shape[1], spec.dim)}")
        out.append(X @ W)
    return tuple(out)


@dataclass
class ConvContext:
    spec: ConvSpec
    X: np.ndarray
    weights: dict
    forward: ForwardContext
    counters: ExecCounters


def conv_forward(spec: ConvSpec, g: GraphTopology, X: np.ndarray, weights: dict,
                 plan: Optional[FusionPlan] = None, deterministic: bool = True, **geometry):
    """Project ``X`` and run the attention pipeline; returns ``(O, ConvContext)``.

    Without an explicit ``plan`` the strategy comes from ``spec.strategy_override``
    or, failing that, from the selection rule.
    """
    Q, K, V = project(spec, X, weights)
    kind = spec.kind
    if plan is None:
        plan = auto_plan(g, kind, V.dtype.itemsize, V.shape[1],
                         strategy=spec.strategy_override, **geometry)
    O, ctx, counters = run_forward(g, Q, K, V, kind, plan, deterministic=deterministic)
    return O, ConvContext(spec, X, weights, ctx, counters)


def conv_backward(spec: ConvSpec, ctx: ConvContext, dO: np.ndarray):
    """Returns ``(GradBundle, param_grads, counters)``; ``param_grads`` includes ``"X"``."""
    fwd = ctx.forward
    grads, counters = fused_backward(fwd.g, fwd, dO)
    X, w = ctx.X, ctx.weights
    if spec.model is Model.GAT:
        H = fwd.V
        d_el, d_er = grads.d_el[:, 0], grads.d_er[:, 0]
        dH = grads.dV + np.outer(d_el, w["a_l"]) + np.outer(d_er, w["a_r"])
        param_grads = {
            "W": X.T @ dH,
            "a_l": H.T @ d_el,
            "a_r": H.T @ d_er,
            "X": dH @ w["W"].T,
        }
    else:
        param_grads = {
            "W_q": X.T @ grads.dQ,
            "W_k": X.T @ grads.dK,
            "W_v": X.T @ grads.dV,
            "X": grads.dQ @ w["W_q"].T + grads.dK @ w["W_k"].T + grads.dV @ w["W_v"].T,
        }
    return grads, param_grads, counters


def random_inputs(g: GraphTopology, kind: SddmmKind, dim: int, seed: int, dtype=np.float64,
                  kink_margin: float = 1e-3):
    """Random ``(Q, K, V)`` for ``kind``.

    For add-scores, ``el``/``er`` are redrawn until every edge's pre-activation
    sits at least ``kink_margin`` away from the LeakyReLU kink.
    """
    rng = np.random.default_rng(seed)
    n = g.num_nodes
    if kind.is_dot:
        Q = rng.standard_normal((n, dim))
        K = rng.standard_normal((n, dim))
    else:
        for _ in range(1000):
            Q = rng.standard_normal((n, 1))
            K = rng.standard_normal((n, 1))
            z = Q[g.coo_src, 0] + K[g.coo_dst, 0]
            if z.size == 0 or np.abs(z).min() >= kink_margin:
                break
        else:
            raise RuntimeError("could not draw add-score inputs away from the kink")
    V = rng.standard_normal((n, dim))
    return Q.astype(dtype), K.astype(dtype), V.astype(dtype)


def layer_gradient_check(spec: ConvSpec, g: GraphTopology, X: np.ndarray, weights: dict,
                         h: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Central-difference check of ``conv_backward`` for every weight and ``X``.

    Uses a fixed random weighting of ``O`` as the loss; returns normwise
    relative error per parameter.
    """
    if X.dtype != np.float64:
        raise ValueError("layer gradient check needs float64 inputs")
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((g.num_nodes, spec.dim))
    _, ctx = conv_forward(spec, g, X, weights)
    _, param_grads, _ = conv_backward(spec, ctx, R)
    params = dict(weights, X=X)

    def loss() -> float:
        O, _ = conv_forward(spec, g, params["X"], {k: params[k] for k in weights},
                            plan=FusionPlan(Strategy.UNFUSED, dtype_bytes=8))
        return float(np.sum(R * O))

    errors = {}
    for name in params:
        params[name] = params[name].copy()
        arr = params[name]
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = loss()
            arr[idx] = orig - h
            down = loss()
            arr[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        scale = max(np.abs(numeric).max(initial=0.0), np.abs(param_grads[name]).max(initial=0.0))
        diff = np.abs(numeric - param_grads[name]).max(initial=0.0)
        errors[name] = float(diff / scale) if scale > 0 else 0.0
    return errors
