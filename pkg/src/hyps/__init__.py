"""Hybrid parallel/sequential low-rank adapters on a toy 3-D segmentation model,
with segmentation metrics and a volume-based SVM diagnosis pipeline."""

__version__ = "0.1.0"
