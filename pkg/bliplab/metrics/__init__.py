from bliplab.metrics.metrics import (
    MetricReport,
    ece,
    evaluate_predictions,
    gaussian_crps,
    gaussian_nll,
    mae,
    mse,
    spearman,
    uq_aggregates_per_structure,
    write_report,
)

__all__ = [
    "MetricReport",
    "ece",
    "evaluate_predictions",
    "gaussian_crps",
    "gaussian_nll",
    "mae",
    "mse",
    "spearman",
    "uq_aggregates_per_structure",
    "write_report",
]
