"""Toolkit for studying position-ID binding in vision-language transformers.

Modules:

* :mod:`vlbind.scenegen` -- synthetic colored-shape grid stimuli and prompts
* :mod:`vlbind.backend` -- forward-pass protocol with capture and edits,
  a planted synthetic backend, and a Qwen2-VL adapter
* :mod:`vlbind.rsa` / :mod:`vlbind.dimred` -- representational analyses
* :mod:`vlbind.cma` / :mod:`vlbind.attnprof` -- head-level mediation and
  attention profiles
* :mod:`vlbind.intervene` -- position-delta key/value swaps and residual repair
* :mod:`vlbind.experiments` -- end-to-end studies
"""
from .errors import (
    ConfigError,
    DegenerateError,
    DimensionError,
    EditError,
    InvariantError,
    LayoutError,
    VLBindError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateError",
    "DimensionError",
    "EditError",
    "InvariantError",
    "LayoutError",
    "VLBindError",
]
