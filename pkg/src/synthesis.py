import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt

from src import masks
from src.errors import DatasetIOError, ImageIdMismatch, NoValidPlacement
from src.masks import BinaryMask, Polygon
from src.models import (
    AugmentConfig,
    CompositingEntry,
    Dataset,
    ImageRecord,
    InstanceAnnotation,
    MergeConfig,
    Padding,
    Placement,
)

logger = logging.getLogger(__name__)


class Donor(BaseModel):
    """
    An object to paste. Its masks are in the frame of its source image.
    """
    annotation: InstanceAnnotation
    source_image: str = ""


class PlacementRejected(Exception):
    """A sampled offset did not give a usable paste; another one is drawn."""


def touches_boundary(a: InstanceAnnotation) -> bool:
    if not a.amodal_overflow.is_zero():
        return True
    box = masks.bbox(a.amodal)
    if box is None:
        return False
    x0, y0, x1, y1 = box
    h, w = a.amodal.shape
    return x0 == 0 or y0 == 0 or x1 == w - 1 or y1 == h - 1


def occlude(a: InstanceAnnotation, occluder: BinaryMask) -> InstanceAnnotation:
    """
    Puts `occluder` in front of `a`. The amodal mask is untouched; an invisible
    mask that was never annotated stays absent while nothing is hidden.
    """
    visible = masks.difference(a.visible, occluder)
    invisible: Optional[BinaryMask] = masks.difference(a.amodal, visible)
    if a.invisible is None and invisible.is_empty():
        invisible = None
    return a.model_copy(update={"visible": visible, "invisible": invisible, "depth_order": a.depth_order + 1})


class PasteAugmenter:
    """
    Pastes donor objects into an image at sampled offsets, front-most, and
    updates the visible/invisible masks of everything underneath.
    """

    def __init__(self, cfg: AugmentConfig):
        self.cfg = cfg

    def _sample_offset(self, stamp: BinaryMask, height: int, width: int, rng: np.random.Generator,
                       target: Optional[BinaryMask]) -> Tuple[int, int, BinaryMask]:
        sh, sw = stamp.shape
        if self.cfg.placement == Placement.UNIFORM_INSIDE:
            if sh > height or sw > width:
                raise PlacementRejected(f"donor {sh}x{sw} does not fit into {height}x{width}")
            dx = int(rng.integers(0, width - sw + 1))
            dy = int(rng.integers(0, height - sh + 1))
        else:
            dx = int(rng.integers(-sw + 1, width))
            dy = int(rng.integers(-sh + 1, height))
        pasted = masks.translate(stamp, (dx, dy), height, width)
        if pasted.is_empty():
            raise PlacementRejected("donor lands outside the image")
        if target is not None and masks.intersection(pasted, target).is_empty():
            raise PlacementRejected("donor does not overlay the target object")
        return dx, dy, pasted

    def place(self, stamp: BinaryMask, height: int, width: int, rng: np.random.Generator,
              target: Optional[BinaryMask] = None) -> Tuple[int, int, BinaryMask]:
        """
        Samples an offset for `stamp`, retrying up to cfg.max_placement_attempts times.

        Raises:
            NoValidPlacement: When every attempt is rejected.
        """
        retryer = Retrying(
            stop=stop_after_attempt(self.cfg.max_placement_attempts),
            retry=retry_if_exception_type(PlacementRejected),
        )
        try:
            return retryer(self._sample_offset, stamp, height, width, rng, target)
        except RetryError as e:
            reason = e.last_attempt.exception()
            raise NoValidPlacement(
                f"No valid placement after {self.cfg.max_placement_attempts} attempts ({reason})"
            ) from e

    def augment(self, base: ImageRecord, donors: Sequence[Union[Donor, InstanceAnnotation]], rng: np.random.Generator,
                target: Optional[InstanceAnnotation] = None) -> Tuple[ImageRecord, List[CompositingEntry]]:
        """
        Args:
            base (ImageRecord): Image to augment.
            donors: Objects to paste, in paste order (the last one ends up front-most).
            rng (np.random.Generator): Source of placement offsets.
            target (InstanceAnnotation, optional): When given, every donor must overlay
                this object's visible mask.

        Returns:
            Tuple[ImageRecord, List[CompositingEntry]]: Augmented image and one
            compositing entry per pasted donor.
        """
        annotations = list(base.annotations)
        entries: List[CompositingEntry] = []
        next_id = max((a.id for a in annotations), default=0) + 1
        target_id = target.id if target is not None else None
        for donor in donors:
            if isinstance(donor, InstanceAnnotation):
                donor = Donor(annotation=donor)
            src = donor.annotation
            box = masks.bbox(src.amodal)
            if box is None:
                logger.warning("Donor %s has an empty amodal mask; skipped", src.id)
                continue
            stamp = masks.crop(src.amodal, box)
            target_mask = None
            if target_id is not None:
                target_mask = next((a.visible for a in annotations if a.id == target_id), None)
                if target_mask is not None and target_mask.is_empty():
                    target_mask = None
            dx, dy, pasted = self.place(stamp, base.height, base.width, rng, target_mask)
            annotations = [occlude(a, pasted) for a in annotations]
            annotations.append(InstanceAnnotation(
                id=next_id,
                image_id=base.id,
                category_id=src.category_id,
                amodal=pasted,
                visible=pasted,
                invisible=None,
                depth_order=0,
            ))
            entries.append(CompositingEntry(
                output_image_id=base.id,
                donor_annotation_id=src.id,
                donor_source_image=donor.source_image,
                dx=dx - box[0],
                dy=dy - box[1],
                z=0,
            ))
            entries = [e.model_copy(update={"z": e.z + 1}) for e in entries[:-1]] + entries[-1:]
            next_id += 1

        min_fraction = self.cfg.min_remaining_visible_fraction
        if min_fraction > 0:
            kept = [a for a in annotations if a.amodal.area > 0 and a.visible.area / a.amodal.area >= min_fraction]
            if len(kept) < len(annotations):
                logger.debug("Image %s: dropped %d mostly covered object(s)", base.id, len(annotations) - len(kept))
            annotations = kept
        return base.model_copy(update={"annotations": annotations}), entries


def paste_augment(base: ImageRecord, donors: Sequence[Union[Donor, InstanceAnnotation]], cfg: AugmentConfig,
                  rng: np.random.Generator) -> ImageRecord:
    """
    Pastes `donors` into `base` front-most and returns the updated image.

    Raises:
        NoValidPlacement: If a donor cannot be placed within the attempt budget.
    """
    image, _ = PasteAugmenter(cfg).augment(base, donors, rng)
    return image


def _eligible_donors(img: ImageRecord, stuff_ids: set, cfg: AugmentConfig) -> List[InstanceAnnotation]:
    out = []
    for a in img.annotations:
        if a.category_id in stuff_ids or a.is_crowd or a.amodal.is_empty():
            continue
        if cfg.exclude_boundary_objects and touches_boundary(a):
            continue
        out.append(a)
    return out


class AugmentedDatasetBuilder:
    """
    Synthesizes images by repeated paste_augment, with one RNG stream per output
    image derived from (seed, image index) so threaded and serial runs agree.

    `source="modal"` pastes modal objects into sampled images (only the pasted
    occlusions are annotated); `source="amodal"` overlays a non-stuff object of
    the sampled image with a non-stuff object from another image.
    """

    def __init__(self, ds: Dataset, cfg: AugmentConfig, source: str = "modal"):
        if source not in ("modal", "amodal"):
            raise ValueError(f"Unknown augmentation source: {source}")
        self.ds = ds
        self.cfg = cfg
        self.source = source
        self.augmenter = PasteAugmenter(cfg)
        stuff_ids = {c.id for c in ds.categories if c.is_stuff}
        self.donor_pool = [_eligible_donors(img, stuff_ids, cfg) for img in ds.images]
        self.stuff_ids = stuff_ids

    def _prepare_base(self, img: ImageRecord) -> ImageRecord:
        if self.source == "amodal":
            return img
        # modal source: only visible extents are known
        anns = [
            a.model_copy(update={"amodal": a.visible, "invisible": None})
            for a in img.annotations
            if not a.visible.is_empty()
        ]
        return img.model_copy(update={"annotations": anns})

    def _pick_donor(self, base_index: int, rng: np.random.Generator) -> Optional[Donor]:
        candidates = [i for i, pool in enumerate(self.donor_pool) if pool and i != base_index]
        if not candidates:
            candidates = [i for i, pool in enumerate(self.donor_pool) if pool]
        if not candidates:
            return None
        img_index = candidates[int(rng.integers(len(candidates)))]
        pool = self.donor_pool[img_index]
        ann = pool[int(rng.integers(len(pool)))]
        if self.source == "modal":
            ann = ann.model_copy(update={"amodal": ann.visible})
        return Donor(annotation=ann, source_image=self.ds.images[img_index].file_name)

    def build_one(self, index: int, seed: int) -> Tuple[ImageRecord, List[CompositingEntry]]:
        rng = np.random.default_rng([seed, index])
        base_index = int(rng.integers(len(self.ds.images)))
        base = self._prepare_base(self.ds.images[base_index])
        base = base.model_copy(update={
            "id": index + 1,
            "annotations": [a.model_copy(update={"image_id": index + 1}) for a in base.annotations],
        })
        donors = []
        for _ in range(self.cfg.donors_per_image):
            donor = self._pick_donor(base_index, rng)
            if donor is not None:
                donors.append(donor)
        if not donors:
            logger.warning("Output image %d: no eligible donor objects; image kept unchanged", index + 1)
            return base, []
        target = None
        if self.source == "amodal":
            things = [a for a in base.annotations if a.category_id not in self.stuff_ids and not a.visible.is_empty()]
            if things:
                target = things[int(rng.integers(len(things)))]
        return self.augmenter.augment(base, donors, rng, target=target)

    def build(self, n_images: int, seed: Optional[int] = None) -> Tuple[Dataset, List[CompositingEntry]]:
        seed = self.cfg.rng_seed if seed is None else seed
        suffix = "modal_aug" if self.source == "modal" else "paste_aug"
        split_name = f"{self.ds.split_name}_{suffix}"
        if n_images <= 0 or not self.ds.images:
            return Dataset(categories=list(self.ds.categories), images=[], split_name=split_name), []
        indices = list(range(n_images))
        if self.cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.threads) as pool:
                results = list(pool.map(lambda i: self.build_one(i, seed), indices))
        else:
            results = [self.build_one(i, seed) for i in indices]

        images: List[ImageRecord] = []
        manifest: List[CompositingEntry] = []
        next_id = 1
        for img, entries in results:
            anns = []
            for a in img.annotations:
                anns.append(a.model_copy(update={"id": next_id}))
                next_id += 1
            images.append(img.model_copy(update={"annotations": anns}))
            manifest.extend(entries)
        logger.info("Synthesized %d images with %d pasted objects", len(images), len(manifest))
        return Dataset(categories=list(self.ds.categories), images=images, split_name=split_name), manifest


def _seed_from(cfg: AugmentConfig, rng: Optional[np.random.Generator]) -> int:
    if rng is None:
        return cfg.rng_seed
    return int(rng.integers(2 ** 32))


def build_modal_aug(modal_ds: Dataset, cfg: AugmentConfig, n_images: int,
                    rng: Optional[np.random.Generator] = None) -> Dataset:
    """
    Builds `n_images` images by pasting modal objects into sampled images.
    Occlusion masks exist only for objects covered by a pasted object.
    """
    ds, _ = AugmentedDatasetBuilder(modal_ds, cfg, source="modal").build(n_images, _seed_from(cfg, rng))
    return ds


def build_paste_aug(amodal_ds: Dataset, cfg: AugmentConfig, n_images: int,
                    rng: Optional[np.random.Generator] = None) -> Dataset:
    """
    Builds `n_images` images by overlaying a non-stuff object with a non-stuff
    object from another image, keeping the full amodal annotations.
    """
    ds, _ = AugmentedDatasetBuilder(amodal_ds, cfg, source="amodal").build(n_images, _seed_from(cfg, rng))
    return ds


def _shift_polygon(poly: Polygon, dx: int, dy: int) -> Polygon:
    return Polygon(vertices=tuple((x + dx, y + dy) for x, y in poly.vertices))


def _pad_annotation(a: InstanceAnnotation, p: Padding, height: int, width: int) -> InstanceAnnotation:
    visible = masks.pad(a.visible, p.left, p.top, p.right, p.bottom)
    if a.amodal_polygons:
        amodal = masks.empty(height, width)
        for poly in a.amodal_polygons:
            amodal = masks.union(amodal, masks.rasterize_shifted(poly, height, width, p.left, p.top))
        polygons: Optional[Tuple[Polygon, ...]] = tuple(_shift_polygon(poly, p.left, p.top) for poly in a.amodal_polygons)
    else:
        amodal = masks.pad(a.amodal, p.left, p.top, p.right, p.bottom)
        polygons = None
    # the part that reached past the old border was never visible
    invisible: Optional[BinaryMask] = masks.difference(amodal, visible)
    if a.invisible is None and invisible.is_empty():
        invisible = None
    return a.model_copy(update={
        "amodal": amodal,
        "visible": visible,
        "invisible": invisible,
        "amodal_polygons": polygons,
        "amodal_overflow": Padding(),
    })


def pad_dataset_for_amodal(ds: Dataset) -> Dataset:
    """
    Zero-pads every image just enough that all of its amodal masks fit, and
    records the padding in the image metadata.
    """
    images = []
    for img in ds.images:
        p = Padding()
        for a in img.annotations:
            p = p.maximum(a.amodal_overflow)
        if p.is_zero():
            images.append(img)
            continue
        height = img.height + p.top + p.bottom
        width = img.width + p.left + p.right
        logger.info("Image %s padded by %s", img.id, p.model_dump())
        images.append(img.model_copy(update={
            "height": height,
            "width": width,
            "padding": img.padding.plus(p),
            "annotations": [_pad_annotation(a, p, height, width) for a in img.annotations],
        }))
    return ds.model_copy(update={"images": images})


def merge_categories(amodal_ds: Dataset, modal_ds: Dataset, cfg: MergeConfig) -> Dataset:
    """
    Transfers categories from a modal dataset onto class-less amodal annotations.

    Visible masks are compared with the modal masks of the same image; pairs with
    IoU above cfg.iou_threshold are matched greedily by descending IoU, each modal
    annotation at most once. Stuff and crowd annotations (on either side) are
    removed from the candidate pool before matching; unmatched amodal
    annotations are dropped.

    Raises:
        ImageIdMismatch: If an amodal image id is absent from the modal dataset.
    """
    modal_images = modal_ds.image_by_id()
    modal_categories = modal_ds.category_by_id()
    stuff_ids = {c.id for c in modal_ds.categories if c.is_stuff}
    amodal_stuff_ids = {c.id for c in amodal_ds.categories if c.is_stuff}
    logger.info("Category merge uses one-to-one greedy matching (each modal annotation used once)")

    def modal_candidate(m: InstanceAnnotation) -> bool:
        if cfg.drop_stuff and m.category_id in stuff_ids:
            return False
        return not (cfg.drop_crowd and m.is_crowd)

    def amodal_candidate(a: InstanceAnnotation) -> bool:
        return not (cfg.drop_stuff and a.category_id in amodal_stuff_ids)

    images = []
    kept_total = 0
    for img in amodal_ds.images:
        modal_img = modal_images.get(img.id)
        if modal_img is None:
            raise ImageIdMismatch(f"Amodal image {img.id} has no counterpart in {modal_ds.split_name}")
        sources = [a for a in img.annotations if amodal_candidate(a)]
        candidates = [m for m in modal_img.annotations if modal_candidate(m)]
        ious = masks.iou_matrix([a.visible for a in sources], [m.visible for m in candidates])
        pairs = [
            (ious[i, j], i, j)
            for i in range(ious.shape[0])
            for j in range(ious.shape[1])
            if ious[i, j] > cfg.iou_threshold
        ]
        pairs.sort(key=lambda x: (-x[0], x[1], x[2]))
        used_a, used_m = set(), set()
        assigned = {}
        for _, i, j in pairs:
            if i in used_a or j in used_m:
                continue
            used_a.add(i)
            used_m.add(j)
            assigned[i] = candidates[j]

        kept = [
            a.model_copy(update={"category_id": assigned[i].category_id})
            for i, a in enumerate(sources)
            if i in assigned
        ]
        kept_total += len(kept)
        images.append(img.model_copy(update={"annotations": kept}))

    categories = [c for c in modal_categories.values() if not (cfg.drop_stuff and c.is_stuff)]
    logger.info("Merged categories: kept %d of %d amodal annotations", kept_total, amodal_ds.num_annotations)
    return Dataset(categories=categories, images=images, split_name=f"{amodal_ds.split_name}_cls")


def write_compositing_manifest(entries: Sequence[CompositingEntry], path: str) -> None:
    directory = os.path.dirname(path)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump([e.model_dump() for e in entries], f, indent=2)
    except OSError as e:
        raise DatasetIOError(f"Could not write compositing manifest to {path}: {e}") from e
