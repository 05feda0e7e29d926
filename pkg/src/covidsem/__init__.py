"""Causal panel models of policy, behavior and Covid-19 growth."""

from .errors import ConfigError, CovidSemError, DataError, NumericalError, RankDeficientError
from .ingest import Panel, load_panel_sources, read_panel, write_panel
from .transform import Design, LagConfig, ModelSpec, TermSpec, TransformOptions, build_design

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "CovidSemError", "DataError", "NumericalError", "RankDeficientError",
    "Panel", "load_panel_sources", "read_panel", "write_panel",
    "Design", "LagConfig", "ModelSpec", "TermSpec", "TransformOptions", "build_design",
    "__version__",
]
