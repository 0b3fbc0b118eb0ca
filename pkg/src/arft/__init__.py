"""Cross-project aging-related-bug prediction with a feature-tokenizer transformer.

The numerical core (``autograd``) is a small reverse-mode engine over
numpy; everything above it (model, losses, training, baselines, the
experiment CLI) is built on that engine.
"""

__version__ = "0.1.0"
