import json
import logging
import os
from collections import Counter
from typing import List, Optional, Tuple

from src import masks
from src.errors import DatasetIOError, DatasetValidationError, Violation
from src.ingest.factory import get_dataset_reader
from src.ingest.native import to_document
from src.models import Dataset, ImageRecord, InstanceAnnotation

logger = logging.getLogger(__name__)


def occlusion_rate(a: InstanceAnnotation) -> float:
    """
    Fraction of the amodal region that is invisible; 0 when no invisible mask was annotated.
    """
    if a.invisible is None or a.amodal.is_empty():
        return 0.0
    return a.invisible.area / a.amodal.area


def _check_annotation(a: InstanceAnnotation, img: ImageRecord, slack: int) -> Tuple[InstanceAnnotation, List[Violation], bool]:
    violations: List[Violation] = []
    repaired = False

    def fail(msg: str) -> None:
        violations.append(Violation(msg, annotation_id=a.id, image_id=img.id))

    if a.image_id != img.id:
        fail(f"image_id {a.image_id} does not match containing image {img.id}")
    shape = (img.height, img.width)
    for name in ("amodal", "visible", "invisible"):
        m = getattr(a, name)
        if m is not None and m.shape != shape:
            fail(f"{name} mask is {m.shape[0]}x{m.shape[1]}, image is {shape[0]}x{shape[1]}")
        if m is not None and sum(m.runs) != m.height * m.width:
            fail(f"{name} mask runs sum to {sum(m.runs)}, expected {m.height * m.width}")
    if violations:
        return a, violations, repaired

    if a.amodal.is_empty():
        fail("amodal mask is empty")

    excess = masks.difference(a.visible, a.amodal).area
    if excess:
        if excess <= slack:
            a = a.model_copy(update={"visible": masks.intersection(a.visible, a.amodal)})
            repaired = True
        else:
            fail(f"visible mask is not contained in the amodal mask ({excess} pixels outside)")
            return a, violations, repaired

    if a.invisible is not None:
        expected = masks.difference(a.amodal, a.visible)
        if a.invisible != expected:
            fail("invisible mask differs from amodal minus visible")
        elif not masks.intersection(a.visible, a.invisible).is_empty():
            fail("visible and invisible masks overlap")
    return a, violations, repaired


def depth_violations(img: ImageRecord) -> List[Violation]:
    """
    Checks the occluder relation: when a is in front of b (smaller depth order)
    and their amodal masks overlap, the overlap must be invisible for b.
    """
    out: List[Violation] = []
    anns = img.annotations
    for a in anns:
        for b in anns:
            if a.depth_order >= b.depth_order:
                continue
            overlap = masks.intersection(a.amodal, b.amodal)
            if overlap.is_empty():
                continue
            hidden = b.invisible if b.invisible is not None else masks.empty(img.height, img.width)
            if not masks.is_subset(overlap, hidden):
                out.append(Violation(
                    f"overlap with front object {a.id} (depth {a.depth_order}) is not invisible for depth {b.depth_order}",
                    annotation_id=b.id,
                    image_id=img.id,
                ))
    return out


def validate_dataset(ds: Dataset, repair_slack: int = 0, strict_depth: bool = False) -> Tuple[Dataset, List[Violation]]:
    """
    Checks every dataset invariant and returns the (possibly repaired) dataset
    together with all violations found.

    Args:
        ds (Dataset): Dataset to check.
        repair_slack (int): Visible masks exceeding the amodal mask by at most this
            many pixels are repaired by intersecting them with the amodal mask.
        strict_depth (bool): Report depth-order inconsistencies as violations
            (synthesized data) instead of logging a warning (real data).

    Returns:
        Tuple[Dataset, List[Violation]]: Repaired dataset and violations.
    """
    violations: List[Violation] = []

    cat_counts = Counter(c.id for c in ds.categories)
    for cid, n in cat_counts.items():
        if n > 1:
            violations.append(Violation(f"category id {cid} is used {n} times"))
    img_counts = Counter(img.id for img in ds.images)
    for iid, n in img_counts.items():
        if n > 1:
            violations.append(Violation(f"image id {iid} is used {n} times", image_id=iid))
    ann_counts = Counter(a.id for a in ds.iter_annotations())
    for aid, n in ann_counts.items():
        if n > 1:
            violations.append(Violation(f"annotation id {aid} is used {n} times", annotation_id=aid))

    known_categories = set(cat_counts)
    repairs = 0
    images = []
    for img in ds.images:
        if img.file_name == "<missing>":
            for a in img.annotations:
                violations.append(Violation(f"refers to unknown image {img.id}", annotation_id=a.id))
        new_anns = []
        for a in img.annotations:
            if a.category_id not in known_categories:
                violations.append(Violation(f"unknown category id {a.category_id}", annotation_id=a.id, image_id=img.id))
            a, found, repaired = _check_annotation(a, img, repair_slack)
            violations.extend(found)
            repairs += int(repaired)
            new_anns.append(a)
        img = img.model_copy(update={"annotations": new_anns})
        if not any(v.image_id == img.id for v in violations):
            depth = depth_violations(img)
            if strict_depth:
                violations.extend(depth)
            else:
                for v in depth:
                    logger.warning("Depth order inconsistency: %s", v)
        images.append(img)

    if repairs:
        logger.warning("Repaired %d visible mask(s) exceeding their amodal mask by <= %d pixels", repairs, repair_slack)
    return ds.model_copy(update={"images": images}), violations


def load_dataset(path: str, format: str = "native", repair_slack: int = 0, strict_depth: bool = False,
                 split_name: Optional[str] = None) -> Dataset:
    """
    Loads and validates a dataset file.

    Raises:
        DatasetIOError: If the file is missing or unreadable.
        ParseError: If the file cannot be parsed.
        DatasetValidationError: Listing every violated invariant.
    """
    reader = get_dataset_reader(format)
    ds = reader.read(path, split_name=split_name)
    ds, violations = validate_dataset(ds, repair_slack=repair_slack, strict_depth=strict_depth)
    if violations:
        raise DatasetValidationError(violations)
    logger.info("Loaded %s: %d images, %d annotations", path, len(ds.images), ds.num_annotations)
    return ds


def dumps_dataset(ds: Dataset) -> str:
    return json.dumps(to_document(ds), separators=(",", ":"))


def save_dataset(ds: Dataset, path: str) -> None:
    """
    Writes a dataset in native format. load_dataset(path) returns an equal Dataset.
    """
    directory = os.path.dirname(path)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(dumps_dataset(ds))
    except OSError as e:
        raise DatasetIOError(f"Could not write dataset to {path}: {e}") from e


def filter_stuff(ds: Dataset) -> Dataset:
    """
    'No stuff' variant of a split: annotations of stuff categories are removed.
    """
    stuff_ids = {c.id for c in ds.categories if c.is_stuff}
    images = [
        img.model_copy(update={"annotations": [a for a in img.annotations if a.category_id not in stuff_ids]})
        for img in ds.images
    ]
    return ds.model_copy(update={
        "images": images,
        "categories": [c for c in ds.categories if not c.is_stuff],
        "split_name": f"{ds.split_name}_no_stuff",
    })
