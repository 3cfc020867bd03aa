"""CTR matrix estimation, value-of-data pricing and ad link identification."""

__version__ = "0.1.0"

from .errors import DataError, DegenerateError, MalformedLogError, NumericalError, VodkitError
from .ingest import ClickRecord, IntentTensor, ObservationMatrix, aggregate, read_click_log, threshold_filter
from .matest import AlsConfig, EstimateMatrix, als, estimate, svt, svt_then_als
from .evalx import r_squared, run_sweep, split
from .vod import signal_noise, true_vod

__all__ = [
    "AlsConfig", "ClickRecord", "DataError", "DegenerateError", "EstimateMatrix", "IntentTensor",
    "MalformedLogError", "NumericalError", "ObservationMatrix", "VodkitError", "aggregate", "als",
    "estimate", "r_squared", "read_click_log", "run_sweep", "signal_noise", "split", "svt",
    "svt_then_als", "threshold_filter", "true_vod",
]
