import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from src import masks
from src.errors import ConfigError, DatasetIOError, ParseError
from src.masks import BinaryMask
from src.models import Dataset, Detection, EvalConfig, EvalResult, InstanceAnnotation, MetricMode

logger = logging.getLogger(__name__)

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
IGNORE_IOU = 0.5
AGNOSTIC_CATEGORY = 0

TP = "TP"
FP = "FP"
IGNORED = "IGNORED"

# mask kinds whose IoUs must all exceed the threshold, per metric mode
CRITERIA: Dict[MetricMode, Tuple[str, ...]] = {
    MetricMode.A: ("amodal",),
    MetricMode.V: ("visible",),
    MetricMode.AV: ("amodal", "visible"),
    MetricMode.AIVV: ("amodal", "invisible", "visible"),
    MetricMode.IV: ("invisible",),
}


class MatchLabel(NamedTuple):
    kind: str
    gt_id: Optional[int] = None


def detection_masks(det: Detection) -> Dict[str, BinaryMask]:
    """
    Masks used for matching. A detection without a visible mask uses its amodal
    mask as visible prediction; a missing invisible mask is derived as amodal
    minus the (possibly substituted) visible mask.
    """
    visible = det.visible if det.visible is not None else det.amodal
    invisible = det.invisible if det.invisible is not None else masks.difference(det.amodal, visible)
    return {"amodal": det.amodal, "visible": visible, "invisible": invisible}


def gt_masks(gt: InstanceAnnotation) -> Dict[str, BinaryMask]:
    invisible = gt.invisible if gt.invisible is not None else masks.empty(*gt.amodal.shape)
    return {"amodal": gt.amodal, "visible": gt.visible, "invisible": invisible}


def is_ignored_gt(gt: InstanceAnnotation, cfg: EvalConfig) -> bool:
    if gt.is_crowd:
        return True
    return cfg.occluded_only and not gt.is_occluded()


def uses_fallback(det: Detection, metric: MetricMode) -> bool:
    needed = CRITERIA[metric]
    if "visible" in needed and det.visible is None:
        return True
    return "invisible" in needed and det.invisible is None


@dataclass
class ImageMatchInput:
    """
    Pairwise IoUs between the detections and ground truths of one image and category.
    """
    gt_ids: List[int]
    gt_ignored: List[bool]
    ious: Dict[str, np.ndarray]
    ignore_ious: np.ndarray


def prepare_match_input(gts: Sequence[InstanceAnnotation], dets: Sequence[Detection], cfg: EvalConfig) -> ImageMatchInput:
    det_m = [detection_masks(d) for d in dets]
    gt_m = [gt_masks(g) for g in gts]
    ious = {}
    for kind in CRITERIA[cfg.metric]:
        ious[kind] = masks.iou_matrix([m[kind] for m in det_m], [m[kind] for m in gt_m])
    ignore_ious = masks.iou_matrix([d.amodal for d in dets], [g.amodal for g in gts])
    return ImageMatchInput(
        gt_ids=[g.id for g in gts],
        gt_ignored=[is_ignored_gt(g, cfg) for g in gts],
        ious=ious,
        ignore_ious=ignore_ious,
    )


def match_prepared(data: ImageMatchInput, num_dets: int, t: float) -> List[MatchLabel]:
    """
    Greedy matching in detection order. Ignored ground truths never match. A
    detection left unmatched is labelled IGNORED instead of FP when its amodal
    IoU with an ignored ground truth is at least 0.5.
    """
    labels: List[MatchLabel] = []
    matched = [False] * len(data.gt_ids)
    kinds = list(data.ious)
    for d in range(num_dets):
        best_g, best_quality = -1, -1.0
        for g in range(len(data.gt_ids)):
            if matched[g] or data.gt_ignored[g]:
                continue
            values = [data.ious[k][d, g] for k in kinds]
            # strict inequality as in the metric definition
            if all(v > t for v in values):
                quality = min(values)
                if quality > best_quality:
                    best_g, best_quality = g, quality
        if best_g >= 0:
            matched[best_g] = True
            labels.append(MatchLabel(TP, data.gt_ids[best_g]))
        elif any(ign and data.ignore_ious[d, g] >= IGNORE_IOU for g, ign in enumerate(data.gt_ignored)):
            labels.append(MatchLabel(IGNORED))
        else:
            labels.append(MatchLabel(FP))
    return labels


def match_image(gts: Sequence[InstanceAnnotation], dets: Sequence[Detection], t: float, cfg: EvalConfig) -> List[MatchLabel]:
    """
    Labels each detection of one image and category as TP (with gt id), FP or IGNORED.

    Args:
        gts: Ground truths of the image and category.
        dets: Detections of the same image and category, sorted by descending score.
        t (float): IoU threshold (a match needs IoU > t for every mask kind of the metric).
        cfg (EvalConfig): Metric mode and occluded-only switch.

    Returns:
        List[MatchLabel]: One label per detection.
    """
    if not dets:
        return []
    return match_prepared(prepare_match_input(gts, dets, cfg), len(dets), t)


def _ranked(labels: Sequence[MatchLabel]) -> Tuple[np.ndarray, np.ndarray]:
    kept = [lab for lab in labels if lab.kind != IGNORED]
    is_tp = np.array([lab.kind == TP for lab in kept], dtype=np.float64)
    return np.cumsum(is_tp), np.cumsum(1.0 - is_tp)


def interpolated_precision(labels: Sequence[MatchLabel], total_positives: int) -> Optional[np.ndarray]:
    """
    Precision envelope sampled at the 101 recall points 0.00:0.01:1.00.
    IGNORED detections are removed from the ranking first.

    Each recall point r takes the envelope at the first rank whose recall is
    >= r (searchsorted side="left"), so at recall 0.5 the points 0.00..0.50
    (51 of them) are reached and 0.51..1.00 (50) are not.
    """
    if total_positives == 0:
        return None
    tp, fp = _ranked(labels)
    q = np.zeros(len(RECALL_POINTS))
    if tp.size == 0:
        return q
    recall = tp / total_positives
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    inds = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = inds < len(recall)
    q[valid] = envelope[inds[valid]]
    return q


def average_precision(labels: Sequence[MatchLabel], total_positives: int) -> Optional[float]:
    """
    101-point interpolated AP of a globally score-sorted label list; None when
    there are no positives.
    """
    q = interpolated_precision(labels, total_positives)
    if q is None:
        return None
    return float(np.mean(q))


def average_recall(labels_per_threshold: Sequence[Sequence[MatchLabel]], total_positives: int) -> Optional[float]:
    """
    Recall averaged over IoU thresholds (one label list per threshold); None when
    there are no positives.
    """
    if total_positives == 0:
        return None
    if not labels_per_threshold:
        return 0.0
    recalls = [sum(lab.kind == TP for lab in labels) / total_positives for labels in labels_per_threshold]
    return float(np.mean(recalls))


def _mean_defined(values: Sequence[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return float(np.mean(defined))


class AmodalEvaluator:
    """
    Extended AP/AR evaluation over amodal, visible and invisible masks.
    """

    def __init__(self, ds: Dataset, detections: Sequence[Detection], cfg: EvalConfig):
        """
        Args:
            ds (Dataset): Ground truth.
            detections (Sequence[Detection]): Model outputs.
            cfg (EvalConfig): Evaluation settings.
        """
        self.ds = ds
        self.detections = list(detections)
        if cfg.metric == MetricMode.IV and not cfg.occluded_only:
            # invisible masks of unoccluded objects are empty and could never match
            logger.info("AP_IV is evaluated on occluded ground truth only; enabling occluded_only")
            cfg = cfg.model_copy(update={"occluded_only": True})
        self.cfg = cfg
        self.fallback_used = False
        self._image_order = {img.id: i for i, img in enumerate(ds.images)}

    def _category_of(self, category_id: int) -> int:
        return AGNOSTIC_CATEGORY if self.cfg.class_agnostic else category_id

    def _check_categories(self) -> None:
        if self.cfg.class_agnostic:
            return
        known = {c.id for c in self.ds.categories}
        unknown = sorted({d.category_id for d in self.detections if d.category_id not in known})
        if unknown:
            raise ConfigError(f"Detections use category ids {unknown} that are not in the ground truth (use class-agnostic mode?)")

    def category_ids(self) -> List[int]:
        if self.cfg.class_agnostic:
            return [AGNOSTIC_CATEGORY]
        return sorted(c.id for c in self.ds.categories)

    def group(self) -> Dict[Tuple[int, int], Tuple[List[InstanceAnnotation], List[Detection]]]:
        """
        Groups ground truths and (capped, score-sorted) detections by (image, category).
        """
        groups: Dict[Tuple[int, int], Tuple[List[InstanceAnnotation], List[Detection]]] = defaultdict(lambda: ([], []))
        for img in self.ds.images:
            for gt in img.annotations:
                groups[(img.id, self._category_of(gt.category_id))][0].append(gt)

        per_image: Dict[int, List[Detection]] = defaultdict(list)
        for det in self.detections:
            if det.image_id not in self._image_order:
                logger.warning("Detection for unknown image %s skipped", det.image_id)
                continue
            per_image[det.image_id].append(det)
        for image_id, dets in per_image.items():
            # stable: ties keep input order
            ranked = sorted(dets, key=lambda d: -d.score)[: self.cfg.max_detections_per_image]
            for det in ranked:
                if uses_fallback(det, self.cfg.metric):
                    self.fallback_used = True
                groups[(image_id, self._category_of(det.category_id))][1].append(det)
        return dict(groups)

    def _match_group(self, item):
        key, (gts, dets) = item
        data = prepare_match_input(gts, dets, self.cfg)
        per_t = [match_prepared(data, len(dets), t) for t in self.cfg.effective_thresholds()]
        return key, per_t, sum(data.gt_ignored)

    def run(self) -> EvalResult:
        self._check_categories()
        groups = self.group()
        keys = sorted(groups, key=lambda k: (self._image_order.get(k[0], len(self._image_order)), k[1]))
        items = [(k, groups[k]) for k in keys]
        if self.cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
                matched = list(pool.map(self._match_group, items))
        else:
            matched = [self._match_group(item) for item in items]

        thresholds = self.cfg.effective_thresholds()
        categories = self.category_ids()
        # category -> threshold index -> [(score, label)] in image order
        ranked: Dict[int, List[List[Tuple[float, MatchLabel]]]] = {c: [[] for _ in thresholds] for c in categories}
        positives: Dict[int, int] = {c: 0 for c in categories}
        ignored_gts = 0
        ignored_dets = 0
        for (image_id, cat), per_t, n_ignored in matched:
            gts, dets = groups[(image_id, cat)]
            positives[cat] = positives.get(cat, 0) + len(gts) - n_ignored
            ignored_gts += n_ignored
            if per_t:
                ignored_dets += sum(lab.kind == IGNORED for lab in per_t[0])
            for ti, labels in enumerate(per_t):
                ranked.setdefault(cat, [[] for _ in thresholds])[ti].extend(zip((d.score for d in dets), labels))

        per_category_ap: Dict[int, Optional[float]] = {}
        per_category_ar: Dict[int, Optional[float]] = {}
        per_threshold_ap: Dict[str, Dict[int, Optional[float]]] = {f"{t:.2f}": {} for t in thresholds}
        pr_curves: Dict[str, Dict[int, List[float]]] = {f"{t:.2f}": {} for t in thresholds}
        for cat in categories:
            npos = positives.get(cat, 0)
            sorted_labels = []
            for ti, t in enumerate(thresholds):
                entries = ranked[cat][ti]
                order = np.argsort([-s for s, _ in entries], kind="stable")
                labels = [entries[i][1] for i in order]
                sorted_labels.append(labels)
                key = f"{t:.2f}"
                q = interpolated_precision(labels, npos)
                per_threshold_ap[key][cat] = None if q is None else float(np.mean(q))
                if q is not None:
                    pr_curves[key][cat] = q.tolist()
            aps = [per_threshold_ap[f"{t:.2f}"][cat] for t in thresholds]
            per_category_ap[cat] = None if npos == 0 else float(np.mean(aps))
            per_category_ar[cat] = average_recall(sorted_labels, npos)

        if self.fallback_used:
            logger.info("Some detections lack visible/invisible masks; amodal masks used as visible predictions")
        return EvalResult(
            metric=self.cfg.metric,
            thresholds=thresholds,
            per_category_ap=per_category_ap,
            mean_ap=_mean_defined(list(per_category_ap.values())),
            per_category_ar=per_category_ar,
            mean_ar=_mean_defined(list(per_category_ar.values())),
            per_threshold_ap=per_threshold_ap,
            pr_curves=pr_curves,
            num_ignored_detections=ignored_dets,
            num_ignored_gts=ignored_gts,
            fallback_used=self.fallback_used,
            occluded_only=self.cfg.occluded_only,
            class_agnostic=self.cfg.class_agnostic,
        )


def evaluate(ds: Dataset, dets: Sequence[Detection], cfg: EvalConfig) -> EvalResult:
    """
    Computes the requested metric over a dataset.

    Raises:
        ConfigError: If detections use unknown category ids without class-agnostic mode.
    """
    return AmodalEvaluator(ds, dets, cfg).run()


SUITE_COLUMNS = (
    ("AP_AV", MetricMode.AV, False),
    ("AP_A", MetricMode.A, False),
    ("AP_V", MetricMode.V, False),
    ("AP_AV (occl)", MetricMode.AV, True),
    ("AP_A (occl)", MetricMode.A, True),
    ("AP_V (occl)", MetricMode.V, True),
    ("AP^0.5_IV", MetricMode.IV, True),
)


def evaluate_suite(ds: Dataset, dets: Sequence[Detection], base: Optional[EvalConfig] = None) -> Dict[str, EvalResult]:
    """
    The full column set: AP_AV, AP_A, AP_V on all objects, the same on occluded
    objects only, and AP^0.5_IV.
    """
    base = base or EvalConfig()
    out = {}
    for name, metric, occluded in SUITE_COLUMNS:
        cfg = base.model_copy(update={"metric": metric, "occluded_only": occluded})
        out[name] = evaluate(ds, dets, cfg)
    return out


def load_detections(path: str, ds: Dataset) -> List[Detection]:
    """
    Reads a detections JSON array of {image_id, category_id, score, amodal_seg,
    visible_seg?, invisible_seg?}. Mask sizes are taken from the ground-truth images.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            records = json.load(f)
    except FileNotFoundError as e:
        raise DatasetIOError(f"File not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(records, list):
        raise ParseError(f"{path}: detections must be a JSON array")
    images = ds.image_by_id()
    out = []
    for i, rec in enumerate(records):
        try:
            img = images.get(int(rec["image_id"]))
            if img is None:
                raise ParseError(f"{path}: detection {i} refers to unknown image {rec['image_id']}")
            h, w = img.height, img.width
            out.append(Detection(
                image_id=int(rec["image_id"]),
                category_id=int(rec["category_id"]),
                score=float(rec["score"]),
                amodal=masks.from_segmentation(rec["amodal_seg"], h, w),
                visible=masks.from_segmentation(rec["visible_seg"], h, w) if rec.get("visible_seg") is not None else None,
                invisible=masks.from_segmentation(rec["invisible_seg"], h, w) if rec.get("invisible_seg") is not None else None,
            ))
        except (KeyError, TypeError, ValidationError) as e:
            raise ParseError(f"{path}: malformed detection {i} ({e})") from e
    return out


def dump_detections(dets: Sequence[Detection]) -> str:
    records = []
    for d in dets:
        rec = {"image_id": d.image_id, "category_id": d.category_id, "score": d.score, "amodal_seg": d.amodal.to_coco()}
        if d.visible is not None:
            rec["visible_seg"] = d.visible.to_coco()
        if d.invisible is not None:
            rec["invisible_seg"] = d.invisible.to_coco()
        records.append(rec)
    return json.dumps(records, separators=(",", ":"))
