"""Differentiable logic networks for tabular classification.

Train networks of two-input boolean gates by relaxing the discrete parts
(input binarization, gate choice, wiring) into differentiable surrogates,
alternate between optimizing neuron functions and neuron connections, then
collapse the result into a pure boolean circuit for cheap, interpretable
inference with rule extraction and gate-level cost accounting.
"""

__version__ = "0.1.0"

from .binner import fit_tree_bins, pad_edges
from .data import (
    ColumnSchema,
    DataError,
    Dataset,
    FoldPlan,
    PreprocessState,
    balanced_accuracy,
    fold_split,
    from_arrays,
    load_csv,
    load_schema,
    make_folds,
    split,
)
from .discrete import DiscreteNetwork, OpCount, count_ops, evaluate, quantize
from .logic import (
    GATE_NAMES,
    GATE_PRIORITY,
    N_GATES,
    gate_subspace_mask,
    hard_logic,
    soft_logic,
    soft_logic_grad,
)
from .network import (
    ConfigError,
    NetworkParams,
    NetworkSpec,
    PhaseMode,
    STEFlags,
    forward,
    initialize_params,
    load_model,
    dump_model,
    predict,
    quantize_params,
)
from .simplify import RuleGraph, evaluate_graph, export_dot, extract, selected_features
from .simplify import simplify as simplify_rules
from .trainer import (
    SearchError,
    TrainConfig,
    TrainingDivergedError,
    backward,
    class_weights,
    cross_entropy_loss,
    optimizer_step,
    random_search,
    train,
)

__all__ = [
    "__version__",
    "fit_tree_bins",
    "pad_edges",
    "ColumnSchema",
    "DataError",
    "Dataset",
    "FoldPlan",
    "PreprocessState",
    "balanced_accuracy",
    "fold_split",
    "from_arrays",
    "load_csv",
    "load_schema",
    "make_folds",
    "split",
    "DiscreteNetwork",
    "OpCount",
    "count_ops",
    "evaluate",
    "quantize",
    "GATE_NAMES",
    "GATE_PRIORITY",
    "N_GATES",
    "gate_subspace_mask",
    "hard_logic",
    "soft_logic",
    "soft_logic_grad",
    "ConfigError",
    "NetworkParams",
    "NetworkSpec",
    "PhaseMode",
    "STEFlags",
    "forward",
    "initialize_params",
    "load_model",
    "dump_model",
    "predict",
    "quantize_params",
    "RuleGraph",
    "evaluate_graph",
    "export_dot",
    "extract",
    "selected_features",
    "simplify_rules",
    "SearchError",
    "TrainConfig",
    "TrainingDivergedError",
    "backward",
    "class_weights",
    "cross_entropy_loss",
    "optimizer_step",
    "random_search",
    "train",
]
