"""Deterministic discrete-event simulator for elastic multimodal serving."""

from .core import (ImageInput, InvalidTraceError, Modality, Request, SloConfig,
                   StageRole, TraceParseError, read_trace, validate_trace,
                   write_trace)
from .costmodel import CostProfile
from .engine import (DeadlockDetected, EmptyTrace, Engine, RunConfig,
                     RunResult, config_for_policy, run)
from .metrics import aggregate, max_throughput_under_slo
from .workload import BurstSpec, DatasetProfile, generate, load_trace

__version__ = "0.1.0"

__all__ = [
    "BurstSpec", "CostProfile", "DatasetProfile", "DeadlockDetected",
    "EmptyTrace", "Engine", "ImageInput", "InvalidTraceError", "Modality",
    "Request", "RunConfig", "RunResult", "SloConfig", "StageRole",
    "TraceParseError", "aggregate", "config_for_policy", "generate",
    "load_trace", "max_throughput_under_slo", "read_trace", "run",
    "validate_trace", "write_trace",
]
