"""Joint calibration of jump-diffusion models to implied vols and the variance term structure."""

from .types import (
    CALL,
    PUT,
    THETA_0,
    VARIANCE_SWAP,
    VIX_SQUARED,
    BatesParams,
    CalibrationConfig,
    CalibrationResult,
    MarketEnv,
    OptimizerSettings,
    OptionQuote,
    ParamBounds,
    SjdParams,
    VarianceTermStructure,
    VolSurface,
)

__version__ = "0.1.0"
