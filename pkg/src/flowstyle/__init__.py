"""flowstyle: desk-scale unified style/subject-driven generation.

A procedural shape world supplies exact stylization/de-stylization experts
and curated triplets; a small in-context flow-matching transformer learns
from them in two freeze-scheduled stages; a differentiable style reward
fine-tunes it; an analytic benchmark measures content consistency, style
similarity, and text alignment.
"""

__version__ = "0.1.0"

from . import backbone, encoders, evalbench, model, objectives, rollout, synthworld, trainer

__all__ = [
    "backbone",
    "encoders",
    "evalbench",
    "model",
    "objectives",
    "rollout",
    "synthworld",
    "trainer",
]
