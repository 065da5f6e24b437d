"""Region-decoupled self-supervised pretraining for bitemporal change detection.

A small, CPU-only stack: a numpy-backed reverse-mode autodiff engine, a
Siamese encoder with projection/prediction heads, masked per-region pooling
with a semantic-dissimilarity objective, a synthetic bitemporal dataset
generator, and the pre-training / fine-tuning loops that tie them together.
"""

__version__ = "0.1.0"
