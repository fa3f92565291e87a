"""Class-incremental segmentation with distillation and exemplar replay."""
__version__ = "0.1.0"
