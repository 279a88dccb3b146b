"""Factorized spatio-temporal forecasting: a quantile-forecasting temporal backbone
plus a lightweight node/calendar adapter."""

from .adapter import STAdapter, sta_forward
from .backbone import Backbone, QuantileForecast, SeriesWindow, rolling_forecast, utp_forward
from .config import AdapterConfig, BackboneConfig, TrainConfig, backbone_preset

__all__ = [
    "AdapterConfig", "Backbone", "BackboneConfig", "QuantileForecast", "STAdapter",
    "SeriesWindow", "TrainConfig", "backbone_preset", "rolling_forecast", "sta_forward",
    "utp_forward",
]
__version__ = "0.1.0"
