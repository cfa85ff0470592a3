"""Collective entity linking over sliding-window candidate subgraphs."""

__version__ = "0.1.0"
