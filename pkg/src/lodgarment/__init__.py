"""Garment reconstruction toolkit: parametric coarse garments, levels-of-detail
composition, skinning, implicit fields and boundary-guided registration."""

__version__ = "0.1.0"
