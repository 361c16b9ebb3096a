"""Transformer-Unet segmentation with a numpy autodiff engine."""
