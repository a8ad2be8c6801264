"""Purkinje network identification from the 12-lead ECG."""

import json as _json

from ._core import (
    Error,
    ForwardModel,
    GaussianProcess,
    InputError,
    NumericError,
    bounds,
    default_true_theta,
    expected_improvement,
    fixtures,
    forward,
    ingest_beats,
    lead_names,
    load_ecg_csv,
    pace,
    param_names,
    solve_tree,
    tv_distance,
)
from ._core import default_config as _default_config
from ._core import fit as _fit
from ._core import normalize_config as _normalize_config


def _text(config):
    return config if isinstance(config, str) else _json.dumps(config)


def default_config():
    """Default run configuration as a dict."""
    return _json.loads(_default_config())


def normalize_config(config, base=""):
    """Validated configuration with every key filled in."""
    return _json.loads(_normalize_config(_text(config), str(base)))


def fit(config, out, base=""):
    """Run or resume an identification into `out`; returns a summary dict."""
    return _fit(_text(config), out, str(base))


__all__ = [
    "Error",
    "ForwardModel",
    "GaussianProcess",
    "InputError",
    "NumericError",
    "bounds",
    "default_config",
    "default_true_theta",
    "expected_improvement",
    "fit",
    "fixtures",
    "forward",
    "ingest_beats",
    "lead_names",
    "load_ecg_csv",
    "normalize_config",
    "pace",
    "param_names",
    "solve_tree",
    "tv_distance",
]
