"""
Concept-aware continual unlearning.

Modules, bottom-up: ``numerics`` (linear algebra, Adam, gradient checks),
``world`` (synthetic task stream and mock language head), ``concepts``
(concept modules and modulator), ``refusal`` (router and refusers),
``engine`` (two-stage training per task), ``inference`` (calibrated
forward pass) and ``evaluation`` (metrics and reports).
"""

from .config import RunConfig, parse_config, resolve_seed
from .errors import UnlearningError

__version__ = "1.0.0"

__all__ = ["RunConfig", "UnlearningError", "parse_config", "resolve_seed", "__version__"]
