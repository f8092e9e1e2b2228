"""WOLA-based GEVD-DANSE with blind sampling-rate-offset estimation and compensation."""

__version__ = "0.1.0"
