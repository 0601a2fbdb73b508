"""Exception types raised across the engine.

Validation errors (bad inputs, malformed files) derive from
:class:`ValidationError`; the CLI maps them to exit code 2. Everything
else is a runtime error (exit code 1).
"""

from __future__ import annotations


class ReidError(Exception):
    """Base class for all engine errors."""


class ValidationError(ReidError):
    """Input data or configuration failed validation."""


class MalformedRow(ValidationError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class DuplicateAnnotationId(ValidationError):
    def __init__(self, annotation_id: str):
        super().__init__(f"duplicate annotation_id {annotation_id!r}")
        self.annotation_id = annotation_id


class UnknownViewpoint(ValidationError):
    def __init__(self, token: str):
        super().__init__(f"unknown viewpoint token {token!r}")
        self.token = token


class ViewpointNotInAnyGroup(ValidationError):
    def __init__(self, viewpoint: str, species: str = ""):
        msg = f"viewpoint {viewpoint!r} is not assigned to any matchable group"
        if species:
            msg += f" for species {species!r} (policy splits identities by viewpoint)"
        super().__init__(msg)
        self.viewpoint = viewpoint
        self.species = species


class EmptyCatalog(ValidationError):
    pass


class SpeciesTooSmall(ReidError):
    def __init__(self, species: str):
        super().__init__(
            f"species {species!r}: no test identity survives split filtering"
        )
        self.species = species


class DimensionMismatch(ValidationError):
    pass


class ZeroVector(ValidationError):
    def __init__(self, annotation_id: str):
        super().__init__(f"zero vector for annotation {annotation_id!r}")
        self.annotation_id = annotation_id


class UnknownId(ValidationError):
    def __init__(self, annotation_id: str):
        super().__init__(f"annotation {annotation_id!r} not in store")
        self.annotation_id = annotation_id


class EmptyStore(ValidationError):
    pass


class DisjointSpecies(ValidationError):
    pass


class InvalidCount(ValidationError):
    def __init__(self, index: int, count: int):
        super().__init__(f"class {index}: count {count} < 1")
        self.index = index
        self.count = count


class LabelOutOfRange(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


class DegenerateDataset(ValidationError):
    pass


class MissingEmbedding(ValidationError):
    def __init__(self, annotation_ids: list[str]):
        shown = ", ".join(annotation_ids[:5])
        more = f" (+{len(annotation_ids) - 5} more)" if len(annotation_ids) > 5 else ""
        super().__init__(f"missing embeddings for: {shown}{more}")
        self.annotation_ids = annotation_ids


class FormatError(ValidationError):
    """Embedding or report file does not conform to its wire format."""
