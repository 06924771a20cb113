import logging
from typing import Any, Dict, List

from src.ingest.base import DatasetReader, build_annotation
from src.models import Category, Dataset, ImageRecord, InstanceAnnotation

logger = logging.getLogger(__name__)

THING_CATEGORY = Category(id=1, name="object", is_stuff=False)
STUFF_CATEGORY = Category(id=2, name="stuff", is_stuff=True)


class CocoaDatasetReader(DatasetReader):
    """
    Reader for COCO amodal (COCOA) files.

    COCOA is class-less: each image-level annotation holds a `regions` list
    whose entries carry an amodal polygon (`segmentation`), optional
    `visible_mask` / `invisible_mask` RLEs, an `isstuff` flag and a depth
    `order`. Regions are mapped to the categories 'object' and 'stuff'.
    """

    @property
    def format_name(self) -> str:
        return "cocoa"

    def parse(self, document: Dict[str, Any]) -> Dataset:
        images_meta = {int(img["id"]): img for img in document.get("images", [])}
        per_image: Dict[int, List[InstanceAnnotation]] = {i: [] for i in images_meta}
        next_id = 1

        for record in document.get("annotations", []):
            image_id = int(record["image_id"])
            meta = images_meta.get(image_id)
            if meta is None:
                logger.warning("COCOA annotation for unknown image %s skipped", image_id)
                continue
            height, width = int(meta["height"]), int(meta["width"])
            for region in record.get("regions", []):
                is_stuff = bool(region.get("isstuff", 0))
                visible_seg = region.get("visible_mask")
                invisible_seg = region.get("invisible_mask")
                occluded = visible_seg is not None or float(region.get("occlude_rate", 0.0)) > 0.0
                per_image[image_id].append(build_annotation(
                    ann_id=region.get("id", next_id),
                    image_id=image_id,
                    height=height,
                    width=width,
                    category_id=STUFF_CATEGORY.id if is_stuff else THING_CATEGORY.id,
                    amodal_seg=region["segmentation"],
                    visible_seg=visible_seg,
                    invisible_seg=invisible_seg,
                    occluded=occluded,
                    depth_order=int(region.get("order", 0)),
                    is_crowd=False,
                ))
                next_id += 1

        images = [
            ImageRecord(
                id=image_id,
                width=int(meta["width"]),
                height=int(meta["height"]),
                file_name=meta.get("file_name", ""),
                annotations=per_image[image_id],
            )
            for image_id, meta in images_meta.items()
        ]
        return Dataset(categories=[THING_CATEGORY, STUFF_CATEGORY], images=images)
