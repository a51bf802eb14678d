"""Multimodal audio+gaze facial animation: dynamic per-latent fusion VAE.

Fuses 80-d mel-spectrogram audio features and 4-d normalized gaze
features at 100 Hz into a shared latent sequence through per-frame,
per-latent-coefficient convex mixture weights, and decodes 256-d facial
animation coefficients.  Ships with a from-scratch autodiff kernel, a
synthetic data world with known factor structure, training, evaluation
metrics, ablation tooling, and a real-time streaming runtime.
"""

from mmface import tensor
from mmface.tensor import Tensor, Tape, set_precision, get_precision, precision

__all__ = [
    "tensor",
    "Tensor",
    "Tape",
    "set_precision",
    "get_precision",
    "precision",
]

__version__ = "0.1.0"
