"""Conditional AIC variable selection for linear mixed models under covariate shift."""

from ._shiftcai import (
    __version__,
    Breakdown,
    Design,
    all_subsets,
    criterion,
    estimate_psi,
    mc_true_cai,
    nested_chain,
    predict,
    run_cli,
    select,
)

__all__ = [
    "__version__",
    "Breakdown",
    "Design",
    "all_subsets",
    "criterion",
    "estimate_psi",
    "mc_true_cai",
    "nested_chain",
    "predict",
    "run_cli",
    "select",
]
