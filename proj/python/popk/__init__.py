"""Python bindings for the popk population pharmacokinetic engine."""

from ._core import (
    DatasetError,
    __version__,
    exposure_metrics,
    fisher_exact,
    fit,
    rank_sum_test,
    run,
    simulate_dataset,
    unbound_concentration,
)

__all__ = [
    "DatasetError",
    "__version__",
    "exposure_metrics",
    "fisher_exact",
    "fit",
    "rank_sum_test",
    "run",
    "simulate_dataset",
    "unbound_concentration",
]
