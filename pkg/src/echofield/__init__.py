"""Differentiable ultrasound neural rendering at desk scale.

Implicit scene representation (sine-activated spatial/directional MLPs with
Fourier and reflective-harmonic encodings) driving an explicit physics-based
B-mode renderer, plus a synthetic-phantom oracle simulator, trainer, metrics
and CLI.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
