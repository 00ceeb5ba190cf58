"""Fused sparse attention kernels for attention GNNs, with a scheduling and
memory-traffic model, autograd, and a benchmark harness."""

from .graph import (
    DegreeStats,
    GraphError,
    GraphTopology,
    batch_graphs,
    degree_stats,
    from_coo,
    gen_random,
    gen_super_node,
    read_graph,
    super_node_threshold,
    write_graph,
)
from .kernels import (
    SddmmKind,
    SddmmVariant,
    dense_oracle_forward,
    edge_softmax,
    l2_normalize_rows,
    sddmm_add,
    sddmm_dot,
    spmm,
)
from .schedule import FusionPlan, Strategy, auto_plan, select_strategy
from .engine import (
    ExecCounters,
    ForwardContext,
    SharedMemoryError,
    run_feature_parallel_baseline,
    run_forward,
    run_pmf,
    run_smmf,
    run_unfused,
)
from .autograd import GradBundle, finite_difference_check, fused_backward
from .models import ConvSpec, Model, conv_backward, conv_forward

__version__ = "0.1.0"
