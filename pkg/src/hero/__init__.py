"""Hierarchical multi-agent driving: option skills, opponent models and cooperative option selection."""
from hero._accel import backend
from hero.options import N_OPTIONS, OptionId

__all__ = ["N_OPTIONS", "OptionId", "backend"]
__version__ = "0.1.0"
