"""Three-stage structural design optimization toolkit.

Stage 1 runs density-based compliance minimization on a structured grid,
stage 2 extracts a smooth radial-basis-function level-set geometry matching
the optimized density field and its volume budget, and stage 3 shape-
optimizes that geometry with higher-order elements and adaptive embedded-
boundary integration.
"""

__version__ = "0.1.0"

from .pipeline import RunConfig, run_pipeline, run_study  # noqa: F401
