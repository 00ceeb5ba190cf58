"""Command line entry point: ``verify``, ``gradcheck``, ``bench`` and ``gen-graph``."""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .autograd import fused_backward, gradient_errors, unfused_backward
from .bench import AGREEMENT_TOL, DTYPES, BenchConfig, ModeDisagreement, relative_error, run_benchmark
from .engine import SharedMemoryError, run_forward
from .graph import GraphError, gen_random, gen_super_node, write_graph
from .kernels import dense_oracle_forward
from .models import ConvSpec, random_inputs
from .schedule import Strategy, auto_plan

GRADCHECK_TOL = 1e-5


def _graph_from_args(args):
    if args.hub_degree:
        return gen_super_node(args.nodes, args.avg_degree, args.hub_degree, args.seed)
    return gen_random(args.nodes, args.avg_degree, args.seed)


def cmd_verify(args) -> int:
    g = _graph_from_args(args)
    spec = ConvSpec(args.model, args.dim)
    kind = spec.kind
    dtype = DTYPES[args.dtype]
    tol = AGREEMENT_TOL[args.dtype]
    Q, K, V = random_inputs(g, kind, args.dim, args.seed + 1, dtype)
    _, oracle = dense_oracle_forward(g, Q, K, V, kind)
    print(f"graph: N={g.num_nodes} E={g.num_edges}; model {args.model}, d={args.dim}, {args.dtype}")
    ok = True
    ctx = None
    for strategy in Strategy:
        plan = auto_plan(g, kind, V.dtype.itemsize, args.dim, strategy=strategy)
        try:
            O, ctx_s, counters = run_forward(g, Q, K, V, kind, plan)
        except SharedMemoryError as exc:
            print(f"{strategy.value:>9}: skipped ({exc})")
            continue
        err = relative_error(O, oracle)
        passed = err <= tol
        ok &= passed
        print(f"{strategy.value:>9}: rel err {err:.3e}  launches {counters.kernel_launches}  "
              f"{'ok' if passed else 'FAIL'}")
        if strategy is Strategy.UNFUSED:
            ctx = ctx_s
    dO = np.random.default_rng(args.seed + 2).standard_normal(V.shape).astype(dtype)
    ref, _ = unfused_backward(g, ctx, dO)
    fused_plan = auto_plan(g, kind, V.dtype.itemsize, args.dim)
    grads, counters = fused_backward(g, ctx, dO, fused_plan)
    berr = max(relative_error(getattr(grads, k), getattr(ref, k)) for k in ("dQ", "dK", "dV"))
    bpass = berr <= max(tol, 1e-5 if args.dtype == "f32" else tol)
    ok &= bpass
    print(f" backward: fused ({fused_plan.strategy.value}, {counters.kernel_launches} launches) "
          f"vs unfused rel err {berr:.3e}  {'ok' if bpass else 'FAIL'}")
    return 0 if ok else 1


def cmd_gradcheck(args) -> int:
    g = _graph_from_args(args)
    spec = ConvSpec(args.model, args.dim)
    Q, K, V = random_inputs(g, spec.kind, args.dim, args.seed + 1, np.float64)
    errors = gradient_errors(g, Q, K, V, spec.kind, h=args.h)
    worst = max(errors.values())
    for name, err in errors.items():
        print(f"d{name}: {err:.3e}")
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < GRADCHECK_TOL else 1


def cmd_bench(args) -> int:
    cfg = BenchConfig.from_json(args.config)
    try:
        report = run_benchmark(cfg)
    except (ModeDisagreement, SharedMemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report.write_csv(args.out)
    if args.md:
        with open(args.md, "w") as fh:
            fh.write(report.to_markdown())
    print(report.to_markdown())
    return 0


def cmd_gen_graph(args) -> int:
    g = _graph_from_args(args)
    write_graph(g, args.out)
    print(f"wrote {args.out}: N={g.num_nodes} E={g.num_edges}")
    return 0


def _graph_args(p: argparse.ArgumentParser, nodes_default=None) -> None:
    p.add_argument("--nodes", type=int, required=nodes_default is None, default=nodes_default)
    p.add_argument("--avg-degree", type=float, default=3.0)
    p.add_argument("--hub-degree", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnfuse", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run every execution mode against the dense oracle")
    p.add_argument("--model", choices=["gt", "agnn", "gat"], required=True)
    _graph_args(p)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--dtype", choices=sorted(DTYPES), default="f32")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference check of the fused backward")
    p.add_argument("--model", choices=["gt", "agnn", "gat"], required=True)
    _graph_args(p)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--h", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="run a benchmark scenario from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--md", help="optional Markdown report path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gen-graph", help="write a synthetic graph in the text edge-list format")
    _graph_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_graph)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (GraphError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
