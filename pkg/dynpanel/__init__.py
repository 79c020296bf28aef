"""Dynamic panel data econometrics: estimators, GMM, panel unit-root tests and Monte Carlo."""

import logging
from importlib.metadata import PackageNotFoundError, version

from dynpanel.estimators import EstimateResult, anderson_hsiao, pooled_ols, within_estimator
from dynpanel.exceptions import DataError, NumericalError, PanelError, UsageError
from dynpanel.gmm import GMMResult, ar_test, gmm_estimate, sargan_test
from dynpanel.panel import ModelSpec, PanelDataset, load_panel, save_panel
from dynpanel.unitroot import ADFSpec, adf_regression, ips_tbar_test, levin_lin_test

try:
    __version__ = version("dynpanel")
except PackageNotFoundError:
    # Fallback for local source usage where package metadata is unavailable.
    __version__ = "0+unknown"

__all__ = [
    "ADFSpec",
    "DataError",
    "EstimateResult",
    "GMMResult",
    "ModelSpec",
    "NumericalError",
    "PanelDataset",
    "PanelError",
    "UsageError",
    "adf_regression",
    "anderson_hsiao",
    "ar_test",
    "gmm_estimate",
    "ips_tbar_test",
    "levin_lin_test",
    "load_panel",
    "pooled_ols",
    "sargan_test",
    "save_panel",
    "within_estimator",
    "__version__",
]

# Ensure library doesn't configure logging for the application.
logging.getLogger(__name__).addHandler(logging.NullHandler())
