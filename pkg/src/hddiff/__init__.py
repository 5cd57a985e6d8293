"""Two-sample tests for high-dimensional regression and Gaussian graphical models."""

from .exceptions import (
    ConvergenceError,
    DegenerateFitError,
    HddiffError,
    InvalidInputError,
    NullDistributionError,
)
from .models import Dataset, GgmParams, RegressionParams
from .nulldist import NullWeights, pvalue, wchisq_cdf
from .permtest import PermConfig, PermResult, perm_test
from .screening import ActiveSets, ScreeningConfig
from .testing import TestConfig, TestReport, aggregate_pvalues, multi_split_test, single_split_test

__version__ = "0.1.0"

__all__ = [
    "ActiveSets",
    "ConvergenceError",
    "Dataset",
    "DegenerateFitError",
    "GgmParams",
    "HddiffError",
    "InvalidInputError",
    "NullDistributionError",
    "NullWeights",
    "PermConfig",
    "PermResult",
    "RegressionParams",
    "ScreeningConfig",
    "TestConfig",
    "TestReport",
    "aggregate_pvalues",
    "multi_split_test",
    "perm_test",
    "pvalue",
    "single_split_test",
    "wchisq_cdf",
]
