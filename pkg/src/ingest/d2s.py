from typing import Any, Dict, List

from src.ingest.base import DatasetReader, build_annotation
from src.models import Category, Dataset, ImageRecord, InstanceAnnotation


class D2SAmodalDatasetReader(DatasetReader):
    """
    Reader for D2S-amodal style files: COCO layout where `segmentation` is the
    amodal mask and occluded objects additionally carry `visible_mask` and
    `invisible_mask`.
    """

    @property
    def format_name(self) -> str:
        return "d2s_amodal"

    def parse(self, document: Dict[str, Any]) -> Dataset:
        categories = [
            Category(id=int(c["id"]), name=c.get("name", str(c["id"])), is_stuff=bool(c.get("isstuff", False)))
            for c in document.get("categories", [])
        ]
        images_meta = {int(img["id"]): img for img in document.get("images", [])}
        per_image: Dict[int, List[InstanceAnnotation]] = {i: [] for i in images_meta}

        for ann in document.get("annotations", []):
            image_id = int(ann["image_id"])
            meta = images_meta[image_id]
            visible_seg = ann.get("visible_mask")
            per_image[image_id].append(build_annotation(
                ann_id=ann["id"],
                image_id=image_id,
                height=int(meta["height"]),
                width=int(meta["width"]),
                category_id=ann["category_id"],
                amodal_seg=ann["segmentation"],
                visible_seg=visible_seg,
                invisible_seg=ann.get("invisible_mask"),
                occluded=bool(ann.get("occluded", visible_seg is not None)),
                depth_order=int(ann.get("order", 0)),
                is_crowd=bool(ann.get("iscrowd", 0)),
            ))

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
        return Dataset(categories=categories, images=images)
