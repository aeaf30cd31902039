"""Cross-validation protocol, probe, metrics and aggregation."""

from .folds import FoldPlan, ProbeSplit, check_plan, check_probe_split, make_folds, probe_split
from .metrics import accuracy, aggregate_seeds, format_mean_std, multiclass_auc, roc_auc_binary, soft_vote
from .protocol import (
    RESULT_COLUMNS,
    Cell,
    GridReport,
    LeakageError,
    ProtocolConfig,
    ProtocolResult,
    audit_leakage,
    evaluate_cell,
    fold_data,
    grid_search,
    grid_search_protocol,
    results_text,
    run_cell,
    run_protocol,
    score_cell,
    write_results,
)

__all__ = [
    "RESULT_COLUMNS",
    "Cell",
    "FoldPlan",
    "GridReport",
    "LeakageError",
    "ProbeSplit",
    "ProtocolConfig",
    "ProtocolResult",
    "accuracy",
    "aggregate_seeds",
    "audit_leakage",
    "check_plan",
    "check_probe_split",
    "evaluate_cell",
    "fold_data",
    "format_mean_std",
    "grid_search",
    "grid_search_protocol",
    "make_folds",
    "multiclass_auc",
    "probe_split",
    "results_text",
    "roc_auc_binary",
    "run_cell",
    "run_protocol",
    "score_cell",
    "soft_vote",
    "write_results",
]
