from collections import defaultdict
from typing import Any, Dict, List

from src.ingest.base import DatasetReader, build_annotation
from src.models import Category, Dataset, ImageRecord, InstanceAnnotation, Padding

FORMAT_TAG = "amodal-native"
FORMAT_VERSION = 1


class NativeDatasetReader(DatasetReader):
    """
    Reads the toolkit's own format: one JSON document with `categories`,
    `images` and `annotations` arrays. Annotation masks are stored in
    `amodal_seg`, `visible_seg` and `invisible_seg` (RLE or polygon).
    """

    @property
    def format_name(self) -> str:
        return "native"

    def parse(self, document: Dict[str, Any]) -> Dataset:
        categories = [Category(**c) for c in document.get("categories", [])]
        per_image: Dict[int, List[InstanceAnnotation]] = defaultdict(list)
        raw_images = document.get("images", [])
        sizes = {int(img["id"]): (int(img["height"]), int(img["width"])) for img in raw_images}

        for ann in document.get("annotations", []):
            image_id = int(ann["image_id"])
            height, width = sizes.get(image_id, (0, 0))
            if height == 0:
                # reported by validation with the annotation id
                height, width = _first_size(ann)
            per_image[image_id].append(build_annotation(
                ann_id=ann["id"],
                image_id=image_id,
                height=height,
                width=width,
                category_id=ann["category_id"],
                amodal_seg=ann.get("amodal_seg"),
                visible_seg=ann.get("visible_seg"),
                invisible_seg=ann.get("invisible_seg"),
                occluded=bool(ann.get("occluded", False)),
                depth_order=ann.get("depth_order", 0),
                is_crowd=bool(ann.get("iscrowd", 0)),
                overflow_hint=ann.get("amodal_overflow"),
                polygons_hint=ann.get("amodal_polygons"),
            ))

        images = [
            ImageRecord(
                id=int(img["id"]),
                width=int(img["width"]),
                height=int(img["height"]),
                file_name=img.get("file_name", ""),
                padding=Padding(**img.get("padding", {})),
                annotations=per_image.pop(int(img["id"]), []),
            )
            for img in raw_images
        ]
        # annotations pointing at unknown images are kept in a placeholder image
        # so that validation can name them
        for image_id, anns in per_image.items():
            h, w = anns[0].amodal.shape
            images.append(ImageRecord(id=image_id, width=w, height=h, file_name="<missing>", annotations=anns))
        return Dataset(
            categories=categories,
            images=images,
            split_name=document.get("split_name", "unnamed"),
        )


def _first_size(ann: Dict[str, Any]):
    for key in ("amodal_seg", "visible_seg", "invisible_seg"):
        seg = ann.get(key)
        if isinstance(seg, dict) and "size" in seg:
            return int(seg["size"][0]), int(seg["size"][1])
    return 1, 1


def to_document(ds: Dataset) -> Dict[str, Any]:
    """
    Native JSON document for a dataset. Masks are written as integer RLE.
    """
    annotations = []
    for img in ds.images:
        for a in img.annotations:
            record: Dict[str, Any] = {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": a.category_id,
                "amodal_seg": a.amodal.to_coco(),
                "visible_seg": a.visible.to_coco(),
            }
            if a.invisible is not None:
                record["invisible_seg"] = a.invisible.to_coco()
            record["depth_order"] = a.depth_order
            record["iscrowd"] = int(a.is_crowd)
            if not a.amodal_overflow.is_zero():
                record["amodal_overflow"] = a.amodal_overflow.model_dump()
            if a.amodal_polygons:
                record["amodal_polygons"] = [p.to_flat() for p in a.amodal_polygons]
            annotations.append(record)
    images = []
    for img in ds.images:
        record = {"id": img.id, "width": img.width, "height": img.height, "file_name": img.file_name}
        if not img.padding.is_zero():
            record["padding"] = img.padding.model_dump()
        images.append(record)
    return {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "split_name": ds.split_name,
        "categories": [c.model_dump() for c in ds.categories],
        "images": images,
        "annotations": annotations,
    }
