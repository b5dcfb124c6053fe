"""Grasp planning as inference over a learned success classifier, in a toy 2D world."""

from . import autodiff, evaluation, models, planner, trainer, world

__all__ = ["autodiff", "evaluation", "models", "planner", "trainer", "world"]
__version__ = "0.1.0"
