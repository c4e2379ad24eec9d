"""Workload DSL: parsing, generation, and deterministic execution."""

from .script import Script, parse, print_script
from .generator import generate
from .interpreter import RunResult, Trace, TraceEvent, run

__all__ = [
    "Script",
    "parse",
    "print_script",
    "generate",
    "run",
    "RunResult",
    "Trace",
    "TraceEvent",
]
