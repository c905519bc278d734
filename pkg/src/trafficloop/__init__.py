"""Closed-loop per-flow AR / cloud-gaming / other traffic classification.

Synthetic or recorded UDP traffic is cut into per-flow windows, classified by
a decision tree or random forest, routed to per-class sinks that report
ground-truth labels, and the model is periodically retrained and hot-swapped.
"""

from .core import ClassLabel, FlowKey, Packet, RtpHeader, flow_key, parse_rtp

__version__ = "0.1.0"

__all__ = ["ClassLabel", "FlowKey", "Packet", "RtpHeader", "flow_key", "parse_rtp"]
