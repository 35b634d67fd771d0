"""Desk-scale cascade cost-volume multi-view stereo with contrastive matching
and confidence-weighted focal training losses."""

__version__ = "0.1.0"
