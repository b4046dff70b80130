"""Desk-scale embedding-prediction vision-language toolkit."""

__version__ = "0.1.0"
