"""Cyclic image-to-video domain adaptation at desk scale.

Alternates adversarial spatial alignment of an image model with
pseudo-label-supervised training of a temporal video model, on seeded
synthetic benchmarks with controllable domain shift and modality gap.
"""

__version__ = "0.1.0"
