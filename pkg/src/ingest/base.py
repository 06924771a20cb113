import json
import logging
import os
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Optional, Tuple

from pydantic import ValidationError

from src import masks
from src.errors import DatasetIOError, ParseError
from src.masks import BinaryMask, Polygon
from src.models import Dataset, InstanceAnnotation, Padding

logger = logging.getLogger(__name__)


class DatasetReader(ABC):
    """
    Abstract base class for dataset file readers.
    """

    def read(self, file_path: str, split_name: Optional[str] = None) -> Dataset:
        """
        Reads a dataset file. Invariants are not checked here; see dataset.load_dataset.

        Args:
            file_path (str): Path to the JSON file.
            split_name (str, optional): Overrides the split name stored in the file.

        Returns:
            Dataset: Parsed dataset.
        """
        document = read_json(file_path)
        if not isinstance(document, dict):
            raise ParseError(f"{file_path}: top-level JSON value must be an object")
        try:
            dataset = self.parse(document)
        except (KeyError, TypeError) as e:
            raise ParseError(f"{file_path}: malformed {self.format_name} document ({type(e).__name__}: {e})") from e
        except ValidationError as e:
            raise ParseError(f"{file_path}: invalid {self.format_name} document\n{e}") from e
        if split_name is not None:
            dataset = dataset.model_copy(update={"split_name": split_name})
        elif dataset.split_name == "unnamed":
            base = os.path.splitext(os.path.basename(file_path))[0]
            dataset = dataset.model_copy(update={"split_name": base})
        return dataset

    @property
    @abstractmethod
    def format_name(self) -> str:
        pass

    @abstractmethod
    def parse(self, document: Dict[str, Any]) -> Dataset:
        """
        Converts a decoded JSON document into a Dataset.
        """
        pass


def read_json(file_path: str) -> Any:
    if not os.path.exists(file_path):
        raise DatasetIOError(f"File not found: {file_path}")
    try:
        with open(file_path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"{file_path}: not valid JSON ({e})") from e
    except OSError as e:
        raise DatasetIOError(f"Could not read {file_path}: {e}") from e


def decode_amodal(seg: Any, height: int, width: int) -> Tuple[BinaryMask, Optional[Tuple[Polygon, ...]], Padding]:
    """
    Decodes an amodal segmentation. Polygons reaching past the image are clipped
    by rasterization; the source polygons and the clipped amounts are returned so
    zero-padding can restore the full extent later.
    """
    mask = masks.from_segmentation(seg, height, width)
    if not isinstance(seg, list):
        return mask, None, Padding()
    polygons = tuple(masks.polygons_from_segmentation(seg))
    overflow = Padding()
    for poly in polygons:
        extent = masks.polygon_extent(poly)
        if extent is None:
            continue
        x0, y0, x1, y1 = extent
        overflow = overflow.maximum(Padding(
            left=max(0, -x0),
            top=max(0, -y0),
            right=max(0, x1 - (width - 1)),
            bottom=max(0, y1 - (height - 1)),
        ))
    if overflow.is_zero():
        return mask, None, overflow
    return mask, polygons, overflow


def build_annotation(
    ann_id: int,
    image_id: int,
    height: int,
    width: int,
    category_id: int,
    amodal_seg: Any,
    visible_seg: Any = None,
    invisible_seg: Any = None,
    occluded: bool = False,
    depth_order: int = 0,
    is_crowd: bool = False,
    overflow_hint: Optional[Dict[str, int]] = None,
    polygons_hint: Optional[List[List[float]]] = None,
) -> InstanceAnnotation:
    """
    Builds an annotation from raw segmentations.

    A missing visible mask means 'fully visible' (visible := amodal). A missing
    invisible mask is synthesized as amodal minus visible only when the record
    is flagged as occluded; otherwise it stays absent.
    """
    if amodal_seg is None:
        raise ParseError(f"Annotation {ann_id} has no amodal segmentation")
    amodal, polygons, overflow = decode_amodal(amodal_seg, height, width)
    if polygons is not None:
        logger.info("Annotation %s: amodal polygon clipped at image border by %s", ann_id, overflow.model_dump())
    if overflow_hint:
        overflow = overflow.maximum(Padding(**overflow_hint))
    if polygons_hint:
        polygons = tuple(Polygon.from_flat(p) for p in polygons_hint)
    visible = amodal if visible_seg is None else masks.from_segmentation(visible_seg, height, width)
    if invisible_seg is not None:
        invisible: Optional[BinaryMask] = masks.from_segmentation(invisible_seg, height, width)
    elif occluded:
        invisible = masks.difference(amodal, visible)
    else:
        invisible = None
    return InstanceAnnotation(
        id=int(ann_id),
        image_id=int(image_id),
        category_id=int(category_id),
        amodal=amodal,
        visible=visible,
        invisible=invisible,
        depth_order=int(depth_order),
        is_crowd=bool(is_crowd),
        amodal_polygons=polygons,
        amodal_overflow=overflow,
    )
