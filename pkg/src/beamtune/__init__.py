"""Hybrid extremum-seeking / DDPG tuning laboratory for a KV envelope simulator."""

__version__ = "0.1.0"
