"""Desk-scale selective state space vision classifier, built from scratch.

Layers: numerics (tensors + tape autodiff) -> ssm (discretization, scans)
and attention (baseline + operation counts) -> blocks (gated bidirectional
sequence blocks) -> model (conv stem, token sequence, heads) -> token
labeling and training -> cli.
"""

from .numerics import Tape, Tensor, backward, finite_diff_grad, rel_err

__all__ = ["Tensor", "Tape", "backward", "finite_diff_grad", "rel_err"]
__version__ = "0.1.0"
