"""Radar ADC-to-RAD distillation toolkit.

Synthesizes FMCW radar ADC cubes, runs a classical signal-processing
teacher to produce range-Doppler-azimuth (RAD) pseudo-labels, and distills
that chain into a learnable DFT/window module trained with hand-written
reverse-mode gradients.
"""

from .errors import FormatError, NumericalError

__version__ = "0.1.0"

__all__ = ["FormatError", "NumericalError", "__version__"]
