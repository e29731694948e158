"""Noisy-label robustness lab.

Label-noise models and down-sampling, robust supervised losses, the
representation regularizer with its InfoNCE companion, a small numpy MLP with
manual backprop, and calculators/oracles for the accompanying bounds.
"""

from noisylab.errors import ParseError, ToleranceError, ValidationError

__version__ = "0.1.0"

__all__ = ["ParseError", "ToleranceError", "ValidationError", "__version__"]
