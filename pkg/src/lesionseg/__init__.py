"""Patch-based 3D lesion segmentation with symmetric modality augmentation."""

__version__ = "0.1.0"
