"""Two-stage prompt distillation of a dual-encoder classifier at desk scale."""

__version__ = "0.1.0"
