"""Desk-scale score-based diffusion with step, layer and layer-step distillation."""

__version__ = "0.1.0"
