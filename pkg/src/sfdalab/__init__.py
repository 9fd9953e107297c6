"""Source-free domain adaptation for segmentation with class-ratio priors.

A self-contained lab: a small reverse-mode autodiff engine, a fully
convolutional segmenter, adaptation losses, anatomical and tag-based priors,
a synthetic shape generator, metrics and a CLI.
"""

__version__ = "0.1.0"
