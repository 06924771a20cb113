"""
Fixture builders and a dense-array reference evaluator shared by the tests.
"""
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

import numpy as np

from src import masks
from src.masks import BinaryMask
from src.models import Category, Dataset, Detection, EvalConfig, ImageRecord, InstanceAnnotation, MetricMode


def rect(h: int, w: int, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
    """Dense h x w grid with the half-open box [x0, x1) x [y0, y1) set."""
    grid = np.zeros((h, w), dtype=bool)
    grid[y0:y1, x0:x1] = True
    return grid


def rect_mask(h: int, w: int, x0: int, y0: int, x1: int, y1: int) -> BinaryMask:
    return masks.rle_encode(rect(h, w, x0, y0, x1, y1))


def annotation(ann_id: int, image_id: int, amodal: np.ndarray, visible: Optional[np.ndarray] = None,
               category_id: int = 1, depth_order: int = 0, is_crowd: bool = False) -> InstanceAnnotation:
    """
    Annotation from dense masks. The invisible mask is set exactly when some of
    the amodal mask is hidden.
    """
    amodal = np.asarray(amodal, dtype=bool)
    visible = amodal.copy() if visible is None else np.asarray(visible, dtype=bool) & amodal
    hidden = amodal & ~visible
    return InstanceAnnotation(
        id=ann_id,
        image_id=image_id,
        category_id=category_id,
        amodal=masks.rle_encode(amodal),
        visible=masks.rle_encode(visible),
        invisible=masks.rle_encode(hidden) if hidden.any() else None,
        depth_order=depth_order,
        is_crowd=is_crowd,
    )


def image(image_id: int, h: int, w: int, annotations: Sequence[InstanceAnnotation] = ()) -> ImageRecord:
    return ImageRecord(id=image_id, width=w, height=h, file_name=f"img_{image_id}.png", annotations=list(annotations))


def dataset(images: Sequence[ImageRecord], categories: Optional[Sequence[Category]] = None,
            split_name: str = "fixture") -> Dataset:
    if categories is None:
        categories = [Category(id=1, name="thing")]
    return Dataset(categories=list(categories), images=list(images), split_name=split_name)


def detection(image_id: int, score: float, amodal: np.ndarray, visible: Optional[np.ndarray] = None,
              invisible: Optional[np.ndarray] = None, category_id: int = 1) -> Detection:
    return Detection(
        image_id=image_id,
        category_id=category_id,
        score=score,
        amodal=masks.rle_encode(amodal),
        visible=None if visible is None else masks.rle_encode(visible),
        invisible=None if invisible is None else masks.rle_encode(invisible),
    )


def identity_detections(ds: Dataset) -> List[Detection]:
    """One perfect detection (all three masks) per ground truth."""
    dets = []
    for img in ds.images:
        for a in img.annotations:
            invisible = a.invisible if a.invisible is not None else masks.empty(img.height, img.width)
            dets.append(Detection(image_id=img.id, category_id=a.category_id, score=1.0,
                                  amodal=a.amodal, visible=a.visible, invisible=invisible))
    return dets


def occlusion_fixture() -> Dataset:
    """
    Two 10x10 images. Image 1 has an object at depth 1 whose right half is
    covered by an object at depth 0; image 2 has one unoccluded object.
    """
    back = rect(10, 10, 1, 1, 7, 7)
    front = rect(10, 10, 4, 2, 9, 9)
    img1 = image(1, 10, 10, [
        annotation(1, 1, front, depth_order=0),
        annotation(2, 1, back, back & ~front, depth_order=1),
    ])
    img2 = image(2, 10, 10, [annotation(3, 2, rect(10, 10, 2, 2, 6, 8))])
    return dataset([img1, img2])


# ---------------------------------------------------------------- random micro datasets

def _random_rect(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    x0 = int(rng.integers(0, w - 1))
    y0 = int(rng.integers(0, h - 1))
    x1 = int(rng.integers(x0 + 1, w + 1))
    y1 = int(rng.integers(y0 + 1, h + 1))
    return rect(h, w, x0, y0, x1, y1)


def _jitter(rng: np.random.Generator, grid: np.ndarray) -> np.ndarray:
    dy, dx = (int(v) for v in rng.integers(-1, 2, size=2))
    return np.roll(np.roll(grid, dy, axis=0), dx, axis=1)


def random_micro_case(rng: np.random.Generator, max_images: int = 3, max_dets: int = 4,
                      max_size: int = 12, one_per_category: bool = False) -> Tuple[Dataset, List[Detection]]:
    """
    A random dataset of at most `max_images` small images and up to `max_dets`
    detections per image. Detections are either jittered copies of ground truth
    or random boxes; scores repeat so ties occur. With `one_per_category` an
    image holds at most one ground truth per category.
    """
    categories = [Category(id=1, name="a"), Category(id=2, name="b")]
    images = []
    dets: List[Detection] = []
    ann_id = 1
    for image_id in range(1, int(rng.integers(1, max_images + 1)) + 1):
        h, w = (int(v) for v in rng.integers(3, max_size + 1, size=2))
        anns = []
        n_gts = int(rng.integers(0, 3 if one_per_category else 4))
        gt_categories = [int(c) for c in rng.permutation([1, 2])] if one_per_category else None
        for k in range(n_gts):
            amodal = _random_rect(rng, h, w)
            visible = amodal & ~_random_rect(rng, h, w) if rng.random() < 0.6 else amodal
            if not visible.any():
                visible = amodal
            category_id = gt_categories[k] if gt_categories else int(rng.integers(1, 3))
            anns.append(annotation(ann_id, image_id, amodal, visible, category_id=category_id,
                                   is_crowd=bool(rng.random() < 0.1)))
            ann_id += 1
        images.append(image(image_id, h, w, anns))

        for _ in range(int(rng.integers(0, max_dets + 1))):
            if anns and rng.random() < 0.7:
                src = anns[int(rng.integers(len(anns)))]
                amodal = _jitter(rng, masks.rle_decode(src.amodal)) if rng.random() < 0.5 else masks.rle_decode(src.amodal)
                visible = masks.rle_decode(src.visible)
                category_id = src.category_id if rng.random() < 0.8 else int(rng.integers(1, 3))
            else:
                amodal = _random_rect(rng, h, w)
                visible = amodal & _random_rect(rng, h, w)
                category_id = int(rng.integers(1, 3))
            if not amodal.any():
                amodal = _random_rect(rng, h, w)
            roll = rng.random()
            if roll < 0.2:
                vis, inv = None, None
            elif roll < 0.6:
                vis, inv = visible, None
            else:
                vis, inv = visible, amodal & ~visible
            dets.append(detection(image_id, float(rng.integers(1, 6)) / 5.0, amodal, vis, inv, category_id))
    return dataset(images, categories, split_name="micro"), dets


# ---------------------------------------------------------------- dense reference evaluator

KINDS = {
    MetricMode.A: ("amodal",),
    MetricMode.V: ("visible",),
    MetricMode.AV: ("amodal", "visible"),
    MetricMode.AIVV: ("amodal", "invisible", "visible"),
    MetricMode.IV: ("invisible",),
}


def dense_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / union if union else 0.0


def _gt_dense(a: InstanceAnnotation) -> Dict[str, np.ndarray]:
    amodal = masks.rle_decode(a.amodal)
    invisible = masks.rle_decode(a.invisible) if a.invisible is not None else np.zeros_like(amodal)
    return {"amodal": amodal, "visible": masks.rle_decode(a.visible), "invisible": invisible}


def _det_dense(d: Detection) -> Dict[str, np.ndarray]:
    amodal = masks.rle_decode(d.amodal)
    visible = masks.rle_decode(d.visible) if d.visible is not None else amodal
    invisible = masks.rle_decode(d.invisible) if d.invisible is not None else amodal & ~visible
    return {"amodal": amodal, "visible": visible, "invisible": invisible}


def _reference_ap(scored: List[Tuple[float, Optional[bool]]], npos: int) -> float:
    order = sorted(range(len(scored)), key=lambda k: -scored[k][0])
    flags = [scored[k][1] for k in order if scored[k][1] is not None]
    precision, recall = [], []
    tp = 0
    for n, flag in enumerate(flags, start=1):
        tp += int(flag)
        precision.append(tp / n)
        recall.append(tp / npos)
    q = []
    for r in np.linspace(0.0, 1.0, 101):
        reachable = [p for p, rc in zip(precision, recall) if rc >= r]
        q.append(max(reachable) if reachable else 0.0)
    return float(np.mean(q))


def reference_evaluate(ds: Dataset, dets: Sequence[Detection], cfg: EvalConfig) -> Dict[int, Optional[float]]:
    """
    Per-category AP computed pixel by pixel on dense arrays with plain loops.
    """
    occluded_only = cfg.occluded_only or cfg.metric == MetricMode.IV
    thresholds = [cfg.iv_threshold] if cfg.metric == MetricMode.IV else list(cfg.iou_thresholds)
    kinds = KINDS[cfg.metric]

    def cat_of(c: int) -> int:
        return 0 if cfg.class_agnostic else c

    def ignored(a: InstanceAnnotation, dense: Dict[str, np.ndarray]) -> bool:
        return a.is_crowd or (occluded_only and not dense["invisible"].any())

    per_image: Dict[int, List[Detection]] = {}
    for d in dets:
        per_image.setdefault(d.image_id, []).append(d)
    for image_id in per_image:
        per_image[image_id] = sorted(per_image[image_id], key=lambda d: -d.score)[:cfg.max_detections_per_image]

    cats = [0] if cfg.class_agnostic else sorted(c.id for c in ds.categories)
    result: Dict[int, Optional[float]] = {}
    for cat in cats:
        npos = 0
        for img in ds.images:
            for a in img.annotations:
                if cat_of(a.category_id) == cat and not ignored(a, _gt_dense(a)):
                    npos += 1
        if npos == 0:
            result[cat] = None
            continue
        aps = []
        for t in thresholds:
            scored: List[Tuple[float, Optional[bool]]] = []
            for img in ds.images:
                gts = [(a, _gt_dense(a)) for a in img.annotations if cat_of(a.category_id) == cat]
                matched = set()
                for d in per_image.get(img.id, []):
                    if cat_of(d.category_id) != cat:
                        continue
                    dd = _det_dense(d)
                    best, best_q = None, -1.0
                    for g, (a, gd) in enumerate(gts):
                        if g in matched or ignored(a, gd):
                            continue
                        q = min(dense_iou(dd[k], gd[k]) for k in kinds)
                        if q > t and q > best_q:
                            best, best_q = g, q
                    if best is not None:
                        matched.add(best)
                        scored.append((d.score, True))
                    elif any(ignored(a, gd) and dense_iou(dd["amodal"], gd["amodal"]) >= 0.5 for a, gd in gts):
                        scored.append((d.score, None))
                    else:
                        scored.append((d.score, False))
            aps.append(_reference_ap(scored, npos))
        result[cat] = float(np.mean(aps))
    return result
