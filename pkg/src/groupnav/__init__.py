"""Group-relative policy optimization for goal-directed navigation on synthetic graphs."""

__version__ = "0.1.0"
