"""Cross-lingual fine-tuning workbench with consistency regularization.

A desk-scale, numpy-only implementation of two-stage fine-tuning where a
model is regularized (a) toward agreeing with itself across data
augmentations of each example and (b) toward a frozen first-stage teacher,
over four augmentation strategies: subword sampling, Gaussian embedding
noise, code-switch substitution, and translation.
"""

from . import autodiff, augment, consistency, data, evaluate, model, tokenizer, trainer

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "augment",
    "consistency",
    "data",
    "evaluate",
    "model",
    "tokenizer",
    "trainer",
]
