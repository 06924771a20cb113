import logging
from typing import Dict, Sequence

import pandas as pd

from src.dataset import occlusion_rate
from src.models import Dataset, SplitStats

logger = logging.getLogger(__name__)

ROW_LABELS = {
    "num_imgs": "number of images",
    "num_imgs_with_occl": "number of images with occlusion",
    "img_occl_rate": "image occlusion rate (%)",
    "num_objs": "number of objects",
    "num_objs_occl": "number of occluded objects",
    "obj_occl_rate": "object occlusion rate (%)",
    "avg_or_per_region_all": "avg. occlusion rate per region (all) (%)",
    "avg_or_per_region_occl": "avg. occlusion rate per region (occluded) (%)",
}


def object_frame(ds: Dataset) -> pd.DataFrame:
    """
    One row per object: image id, occluded flag and occlusion rate.
    """
    rows = [
        {
            "image_id": img.id,
            "annotation_id": a.id,
            "occluded": a.is_occluded(),
            "occlusion_rate": occlusion_rate(a),
        }
        for img in ds.images
        for a in img.annotations
    ]
    return pd.DataFrame(rows, columns=["image_id", "annotation_id", "occluded", "occlusion_rate"])


def _percent(num: float, den: float) -> float:
    return 100.0 * num / den if den else 0.0


def compute_stats(ds: Dataset) -> SplitStats:
    """
    Image and occlusion statistics of a split. An object counts as occluded when
    its invisible mask is present and non-empty; an image contains occlusion when
    at least one of its objects is occluded.
    """
    df = object_frame(ds)
    num_imgs = len(ds.images)
    num_objs = len(df)
    if num_objs == 0:
        return SplitStats(num_imgs=num_imgs)
    occluded = df[df["occluded"].astype(bool)]
    num_imgs_with_occl = int(occluded["image_id"].nunique())
    return SplitStats(
        num_imgs=num_imgs,
        num_imgs_with_occl=num_imgs_with_occl,
        img_occl_rate=_percent(num_imgs_with_occl, num_imgs),
        num_objs=num_objs,
        num_objs_occl=len(occluded),
        obj_occl_rate=_percent(len(occluded), num_objs),
        avg_or_per_region_all=100.0 * float(df["occlusion_rate"].mean()) if num_objs else 0.0,
        avg_or_per_region_occl=100.0 * float(occluded["occlusion_rate"].mean()) if len(occluded) else 0.0,
    )


def combine_stats(parts: Sequence[SplitStats]) -> SplitStats:
    """
    Statistics of the union of disjoint splits: counts add, rates become
    count-weighted means.
    """
    num_imgs = sum(p.num_imgs for p in parts)
    num_imgs_with_occl = sum(p.num_imgs_with_occl for p in parts)
    num_objs = sum(p.num_objs for p in parts)
    num_objs_occl = sum(p.num_objs_occl for p in parts)
    return SplitStats(
        num_imgs=num_imgs,
        num_imgs_with_occl=num_imgs_with_occl,
        img_occl_rate=_percent(num_imgs_with_occl, num_imgs),
        num_objs=num_objs,
        num_objs_occl=num_objs_occl,
        obj_occl_rate=_percent(num_objs_occl, num_objs),
        avg_or_per_region_all=sum(p.avg_or_per_region_all * p.num_objs for p in parts) / num_objs if num_objs else 0.0,
        avg_or_per_region_occl=(
            sum(p.avg_or_per_region_occl * p.num_objs_occl for p in parts) / num_objs_occl if num_objs_occl else 0.0
        ),
    )


def stats_table(stats: Dict[str, SplitStats], rounded: bool = True) -> pd.DataFrame:
    """
    Table with one column per split and the statistic names as row labels.
    Percentages are rounded to integers for display when `rounded` is set.
    """
    columns = {}
    for split, s in stats.items():
        values = s.model_dump()
        if rounded:
            values = {k: int(round(v)) for k, v in values.items()}
        columns[split] = [values[key] for key in ROW_LABELS]
    return pd.DataFrame(columns, index=list(ROW_LABELS.values()))
