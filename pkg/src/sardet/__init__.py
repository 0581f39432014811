"""Point-object detection in SAR imagery with a windowed-attention backbone.

The package is numpy-only: a small reverse-mode autodiff engine, a Swin-style
backbone with masked-image pretraining and a pixel-shuffle heatmap head, an
adaptive foreground/background sampling scheduler, a peak decoder and
distance-based detection metrics.
"""

__version__ = "0.1.0"
