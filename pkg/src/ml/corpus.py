import logging
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from src import masks
from src.errors import NoValidPlacement
from src.masks import Polygon
from src.ml.losses import RoiSample
from src.models import AugmentConfig, Category, Dataset, ImageRecord, InstanceAnnotation
from src.synthesis import PasteAugmenter

logger = logging.getLogger(__name__)

SHAPE_CATEGORIES = [Category(id=1, name="rectangle"), Category(id=2, name="disk")]
FEATURE_CHANNELS = ("visible", "occluder", "is_rectangle", "is_disk", "x", "y", "ones", "radius")


class CorpusConfig(BaseModel):
    """
    Synthetic overlapping-shapes corpus: each image holds one rectangle or disk,
    most of them partly covered by a shape pasted from another image.
    """
    image_size: int = Field(32, ge=8)
    roi_size: int = Field(14, ge=2)
    min_shape: int = Field(8, ge=3)
    max_shape: int = Field(16, ge=3)
    occlusion_probability: float = Field(0.75, ge=0.0, le=1.0)


def shape_polygon(kind: str, cx: float, cy: float, w: float, h: float, vertices: int = 24) -> Polygon:
    if kind == "rectangle":
        x0, y0, x1, y1 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
        return Polygon(vertices=((x0, y0), (x1, y0), (x1, y1), (x0, y1)))
    angles = 2 * np.pi * np.arange(vertices) / vertices
    return Polygon(vertices=tuple((float(cx + w / 2 * np.cos(a)), float(cy + h / 2 * np.sin(a))) for a in angles))


def random_shape(image_id: int, ann_id: int, cfg: CorpusConfig, rng: np.random.Generator) -> ImageRecord:
    size = cfg.image_size
    category = SHAPE_CATEGORIES[int(rng.integers(len(SHAPE_CATEGORIES)))]
    w = float(rng.integers(cfg.min_shape, cfg.max_shape + 1))
    h = w if category.name == "disk" else float(rng.integers(cfg.min_shape, cfg.max_shape + 1))
    cx = float(rng.uniform(w / 2 + 1, size - w / 2 - 1))
    cy = float(rng.uniform(h / 2 + 1, size - h / 2 - 1))
    mask = masks.rasterize(shape_polygon(category.name, cx, cy, w, h), size, size)
    ann = InstanceAnnotation(id=ann_id, image_id=image_id, category_id=category.id, amodal=mask, visible=mask)
    return ImageRecord(id=image_id, width=size, height=size, file_name=f"shape_{image_id}.png", annotations=[ann])


def shapes_dataset(n_images: int, cfg: CorpusConfig, rng: np.random.Generator) -> Dataset:
    """
    Builds `n_images` images; in each, a shape from a second random image is
    pasted over the first shape with probability cfg.occlusion_probability.
    """
    augmenter = PasteAugmenter(AugmentConfig(exclude_boundary_objects=False, max_placement_attempts=50))
    images = []
    for i in range(n_images):
        base = random_shape(i + 1, 1, cfg, rng)
        donor = random_shape(0, 1, cfg, rng).annotations[0]
        if rng.random() < cfg.occlusion_probability:
            try:
                base, _ = augmenter.augment(base, [donor], rng, target=base.annotations[0])
            except NoValidPlacement:
                logger.debug("Shape image %d left unoccluded: no overlapping placement", i + 1)
        images.append(base)
    return Dataset(categories=list(SHAPE_CATEGORIES), images=images, split_name="shapes")


def _grid_indices(start: int, stop: int, m: int) -> np.ndarray:
    # nearest-neighbour resampling of [start, stop] onto m cells
    length = stop - start + 1
    return start + np.floor((np.arange(m) + 0.5) * length / m).astype(np.int64)


def roi_sample(img: ImageRecord, ann: InstanceAnnotation, roi_size: int) -> RoiSample:
    """
    Crops the amodal box of `ann` to an M x M grid and renders the fixed
    featurizer channels (see FEATURE_CHANNELS).
    """
    x0, y0, x1, y1 = masks.bbox(ann.amodal)
    rows = _grid_indices(y0, y1, roi_size)
    cols = _grid_indices(x0, x1, roi_size)

    def grid(mask) -> np.ndarray:
        return masks.rle_decode(mask)[np.ix_(rows, cols)].astype(np.float64)

    occluder = masks.empty(img.height, img.width)
    for other in img.annotations:
        if other.id != ann.id and other.depth_order < ann.depth_order:
            occluder = masks.union(occluder, other.amodal)

    amodal = grid(ann.amodal)
    visible = grid(ann.visible)
    ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, roi_size), np.linspace(-1.0, 1.0, roi_size), indexing="ij")
    is_rect = float(ann.category_id == 1)
    features = np.stack([
        visible,
        grid(occluder),
        np.full((roi_size, roi_size), is_rect),
        np.full((roi_size, roi_size), 1.0 - is_rect),
        xs,
        ys,
        np.ones((roi_size, roi_size)),
        np.sqrt(xs ** 2 + ys ** 2),
    ])

    w, h = x1 - x0 + 1, y1 - y0 + 1
    vbox = masks.bbox(ann.visible)
    if vbox is None:
        delta = np.zeros(4)
    else:
        delta = np.array([(vbox[0] - x0) / w, (vbox[1] - y0) / h, (vbox[2] - x1) / w, (vbox[3] - y1) / h])
    return RoiSample(
        features=features,
        gt_class=ann.category_id - 1,
        gt_box_delta=delta,
        gt_amodal=amodal,
        gt_visible=visible,
    )


def make_corpus(n_samples: int, seed: int, cfg: Optional[CorpusConfig] = None) -> List[RoiSample]:
    """
    Deterministic list of `n_samples` RoI samples drawn from synthetic shape images.
    """
    samples, _ = make_corpus_with_images(n_samples, seed, cfg)
    return samples


def make_corpus_with_images(n_samples: int, seed: int, cfg: Optional[CorpusConfig] = None) -> Tuple[List[RoiSample], Dataset]:
    cfg = cfg or CorpusConfig()
    rng = np.random.default_rng(seed)
    samples: List[RoiSample] = []
    images: List[ImageRecord] = []
    while len(samples) < n_samples:
        batch = shapes_dataset(max(1, (n_samples - len(samples) + 1) // 2), cfg, rng)
        for img in batch.images:
            new_id = len(images) + 1
            img = img.model_copy(update={
                "id": new_id,
                "annotations": [a.model_copy(update={"image_id": new_id}) for a in img.annotations],
            })
            images.append(img)
            for ann in img.annotations:
                if ann.visible.is_empty() or len(samples) >= n_samples:
                    continue
                samples.append(roi_sample(img, ann, cfg.roi_size))
    return samples, Dataset(categories=list(SHAPE_CATEGORIES), images=images, split_name="shapes")
