"""Recurrent stacked hourglass networks with cosine embeddings for
instance segmentation and tracking of objects in videos."""

__version__ = "0.1.0"
