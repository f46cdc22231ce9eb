"""Wind power forecasting with dual transformer blocks over dual exogenous variables."""

__version__ = "0.1.0"
