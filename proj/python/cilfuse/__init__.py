"""Python front end for the cilfuse C++ core.

Configs and reports are exchanged as dicts; the core sees JSON text.
"""

import json

from . import _core
from ._core import (
    ConfigError,
    DimensionError,
    Error,
    FormatError,
    ReportError,
    SpecError,
    average_accuracy,
    checkpoint_info,
    ingest_features,
    read_feature_file,
    render_report,
    round4,
    spearman,
    write_feature_file,
)

methods = list(_core.methods)


def default_config():
    return json.loads(_core.default_config())


def normalize_config(config=None):
    return json.loads(_core.normalize_config(json.dumps(config or {})))


def make_scenario(config=None, seed=0):
    return json.loads(_core.make_scenario(json.dumps(config or {}), seed))


def run(config=None, threads=1):
    """Run every configured seed and return the report as a dict."""
    return json.loads(_core.run(json.dumps(config or {}), threads))


def run_to_directory(config=None, threads=1):
    return _core.run_to_directory(json.dumps(config or {}), threads)


__all__ = [
    "ConfigError",
    "DimensionError",
    "Error",
    "FormatError",
    "ReportError",
    "SpecError",
    "average_accuracy",
    "checkpoint_info",
    "default_config",
    "ingest_features",
    "make_scenario",
    "methods",
    "normalize_config",
    "read_feature_file",
    "render_report",
    "round4",
    "run",
    "run_to_directory",
    "spearman",
    "write_feature_file",
]
