"""Encoder-free vision-language model with a hand-rolled autodiff core.

Raw pixels enter the language decoder through a patch adapter that emits
pseudo-text tokens; a bidirectional co-attention stage fuses the visual and
text streams before a causal decoder produces next-token distributions.
"""

__version__ = "0.1.0"

from .core import Tensor, Tape, backward, no_grad

__all__ = ["Tensor", "Tape", "backward", "no_grad", "__version__"]
