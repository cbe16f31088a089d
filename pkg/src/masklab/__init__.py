"""Attention-guided video masking lab: tiny encoders, dual-mask co-learning,
and retrieval evaluation on synthetic video-caption pairs."""

from .numerics import Tape, Tensor, backward, finite_diff_check

__all__ = ["Tape", "Tensor", "backward", "finite_diff_check"]
__version__ = "0.1.0"
