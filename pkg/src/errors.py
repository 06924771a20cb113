from typing import List, Optional


class AmodalToolkitError(Exception):
    """
    Base class for every error raised by the toolkit.
    """


class RunSumMismatch(AmodalToolkitError, ValueError):
    """Run lengths of an RLE mask do not add up to height * width."""


class DimensionMismatch(AmodalToolkitError, ValueError):
    """Two masks (or a mask and its image) have different dimensions."""


class DegeneratePolygon(AmodalToolkitError, ValueError):
    """A polygon with fewer than three vertices."""


class ParseError(AmodalToolkitError, ValueError):
    """A dataset or detections file could not be parsed."""


class ConfigError(AmodalToolkitError, ValueError):
    """Invalid configuration (unknown category ids, bad schedules, ...)."""


class ImageIdMismatch(AmodalToolkitError, ValueError):
    """An image id of one dataset is missing in the other."""


class NoValidPlacement(AmodalToolkitError, RuntimeError):
    """No donor placement was accepted within the attempt budget."""


class ShapeMismatch(AmodalToolkitError, ValueError):
    """Tensor shapes are inconsistent with the head parameters."""


class GraphCycle(AmodalToolkitError, RuntimeError):
    """The recorded computation graph is not a DAG."""


class DatasetIOError(AmodalToolkitError, OSError):
    """Reading or writing a dataset file failed."""


class Violation:
    """
    One violated dataset invariant.
    """

    def __init__(self, message: str, annotation_id: Optional[int] = None, image_id: Optional[int] = None):
        self.message = message
        self.annotation_id = annotation_id
        self.image_id = image_id

    def __str__(self) -> str:
        where = []
        if self.image_id is not None:
            where.append(f"image {self.image_id}")
        if self.annotation_id is not None:
            where.append(f"annotation {self.annotation_id}")
        prefix = f"[{', '.join(where)}] " if where else ""
        return f"{prefix}{self.message}"

    def __repr__(self) -> str:
        return f"Violation({str(self)!r})"


class DatasetValidationError(AmodalToolkitError, ValueError):
    """
    Raised when a dataset violates one or more invariants.
    Every violation is kept so the CLI can list all of them at once.
    """

    def __init__(self, violations: List[Violation]):
        self.violations = list(violations)
        lines = "\n".join(f"  - {v}" for v in self.violations)
        super().__init__(f"Dataset validation failed with {len(self.violations)} violation(s):\n{lines}")
