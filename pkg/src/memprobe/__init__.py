"""memprobe: membership-inference probes against frozen desk-scale models.

A numpy-backed toolkit that learns input-space probe patterns (additive
perturbations or soft prompts) against frozen models to amplify the score
separation between training members and non-members, plus the standard
baselines, defenses, a full evaluation engine, and a numerical lab that
checks the mathematical claims behind the method.
"""

from . import autodiff, data, evaluation, models, reprogram, scoring, theory
from .rng import Rng, derive_seed

__version__ = "0.1.0"

__all__ = ["autodiff", "data", "evaluation", "models", "reprogram", "scoring",
           "theory", "Rng", "derive_seed", "__version__"]
