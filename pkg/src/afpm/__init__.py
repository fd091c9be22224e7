"""Calibration-free cross-dataset EEG decoding.

Spatial alignment (channel selection, per-domain Euclidean alignment,
channel mapping into a task template) feeding a frame-patch transformer
classifier, with a training/evaluation engine and a synthetic
heterogeneous-dataset generator for end-to-end verification.
"""

__version__ = "0.1.0"
