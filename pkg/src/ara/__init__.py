"""Receivers and benchmarks for asynchronous grant-free massive random access."""

from .config import SystemConfig, full_scale_profile
from .results import ReceiverOutput
from .sysmodel import ExpandedPilot, ReceivedSignal, Scenario

__all__ = ["SystemConfig", "full_scale_profile", "ReceiverOutput",
           "ExpandedPilot", "ReceivedSignal", "Scenario"]
