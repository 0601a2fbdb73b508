"""Embedding exporter for the re-identification engine.

Crops each annotation to its bounding box, runs a pretrained backbone,
and writes raw (pre-normalization) feature vectors in the engine's
MREID1 binary format.
"""

__version__ = "0.1.0"

from .export import ExportJob, export_embeddings
