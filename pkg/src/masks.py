from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.errors import DegeneratePolygon, DimensionMismatch, ParseError, RunSumMismatch


class BinaryMask(BaseModel):
    """
    A binary region stored as COCO-style uncompressed run-length encoding.

    Runs alternate background/foreground in column-major pixel order and the
    first run always counts background pixels (it may be 0). Masks produced by
    this module are canonical: no zero-length runs except possibly the first.
    """
    model_config = ConfigDict(frozen=True)

    height: int = Field(..., gt=0, description="Mask height in pixels.")
    width: int = Field(..., gt=0, description="Mask width in pixels.")
    runs: Tuple[int, ...] = Field(..., description="Alternating background/foreground run lengths.")

    @field_validator("runs")
    @classmethod
    def check_runs_non_negative(cls, runs: Tuple[int, ...]) -> Tuple[int, ...]:
        if any(r < 0 for r in runs):
            raise ValueError(f"Run lengths must be non-negative, got {list(runs)}")
        return runs

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.height, self.width)

    @property
    def area(self) -> int:
        return int(sum(self.runs[1::2]))

    def is_empty(self) -> bool:
        return self.area == 0

    def to_dense(self) -> np.ndarray:
        return rle_decode(self)

    def to_coco(self) -> Dict[str, Any]:
        """Native serialization: {'size': [h, w], 'counts': [...]}."""
        return {"size": [self.height, self.width], "counts": list(self.runs)}


class Polygon(BaseModel):
    """
    Implicitly closed polygon with sub-pixel (x, y) vertices.
    The vertex-count invariant is checked by `rasterize`, which raises DegeneratePolygon.
    """
    model_config = ConfigDict(frozen=True)

    vertices: Tuple[Tuple[float, float], ...]

    @field_validator("vertices")
    @classmethod
    def check_finite(cls, vertices: Tuple[Tuple[float, float], ...]) -> Tuple[Tuple[float, float], ...]:
        if vertices and not np.all(np.isfinite(np.asarray(vertices, dtype=float))):
            raise ValueError("Polygon vertices must be finite.")
        return vertices

    @classmethod
    def from_flat(cls, coords: Sequence[float]) -> "Polygon":
        """Builds a polygon from a COCO flat list [x0, y0, x1, y1, ...]."""
        if len(coords) % 2:
            raise ParseError(f"Polygon coordinate list has odd length {len(coords)}")
        pts = tuple((float(coords[i]), float(coords[i + 1])) for i in range(0, len(coords), 2))
        return cls(vertices=pts)

    def to_flat(self) -> List[float]:
        return [c for xy in self.vertices for c in xy]


def _make(height: int, width: int, runs: Sequence[int]) -> BinaryMask:
    # Internal constructor for runs that are already canonical.
    return BinaryMask.model_construct(height=int(height), width=int(width), runs=tuple(int(r) for r in runs))


def canonical_runs(runs: Sequence[int]) -> Tuple[int, ...]:
    """
    Removes interior zero-length runs by merging their neighbours.
    The leading background run is kept even when it is 0.
    """
    out: List[int] = []
    for i, r in enumerate(runs):
        r = int(r)
        if i == 0:
            out.append(r)
            continue
        if r == 0:
            # A zero run makes the next run continue the previous one.
            out.append(0)
            continue
        if len(out) >= 2 and out[-1] == 0:
            out.pop()
            out[-1] += r
        else:
            out.append(r)
    while len(out) > 1 and out[-1] == 0:
        out.pop()
    if not out:
        out = [0]
    return tuple(out)


def empty(height: int, width: int) -> BinaryMask:
    return _make(height, width, [height * width])


def full(height: int, width: int) -> BinaryMask:
    return _make(height, width, [0, height * width])


def rle_encode(dense: Any) -> BinaryMask:
    """
    Encodes a 2-D boolean grid into column-major runs starting with a background count.

    Args:
        dense: Array-like of shape (height, width); truthy pixels are foreground.

    Returns:
        BinaryMask: Canonical RLE mask.
    """
    grid = np.asarray(dense).astype(bool)
    if grid.ndim != 2 or grid.shape[0] == 0 or grid.shape[1] == 0:
        raise ValueError(f"Expected a non-empty 2-D grid, got shape {grid.shape}")
    height, width = grid.shape
    flat = grid.ravel(order="F").astype(np.int8)
    padded = np.concatenate(([0], flat, [0]))
    changes = np.flatnonzero(padded[1:] != padded[:-1])
    # changes holds alternating fg-start / fg-end positions
    boundaries = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(boundaries)
    return _make(height, width, canonical_runs(runs.tolist()))


def rle_decode(mask: BinaryMask) -> np.ndarray:
    """
    Decodes a mask into a (height, width) boolean array.

    Raises:
        RunSumMismatch: If the runs do not cover exactly height * width pixels.
    """
    total = int(sum(mask.runs))
    expected = mask.height * mask.width
    if total != expected:
        raise RunSumMismatch(f"Runs sum to {total}, expected {expected} for {mask.height}x{mask.width}")
    values = np.arange(len(mask.runs)) % 2 == 1
    flat = np.repeat(values, np.asarray(mask.runs, dtype=np.int64))
    return flat.reshape((mask.height, mask.width), order="F")


def decode_compressed_counts(counts: str, height: int, width: int) -> BinaryMask:
    """
    Decodes a compressed-string RLE (COCO 'counts' string) via pycocotools.
    Only accepted on input; the toolkit always writes integer runs.
    """
    try:
        from pycocotools import mask as mask_utils
    except ImportError:
        raise ImportError("pycocotools is required to read compressed RLE. Please install it via `pip install pycocotools`.")
    dense = mask_utils.decode({"size": [int(height), int(width)], "counts": counts.encode("ascii")})
    return rle_encode(dense)


def _even_odd_inside(vertices: np.ndarray, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    n = len(vertices)
    for i in range(n):
        xi, yi = vertices[i]
        xj, yj = vertices[i - 1]
        crosses = (yi > py) != (yj > py)
        if yi == yj:
            continue
        x_at = (xj - xi) * (py - yi) / (yj - yi) + xi
        inside ^= crosses & (px < x_at)
    return inside


def _rasterize_grid(poly: Polygon, height: int, width: int, x0: int = 0, y0: int = 0) -> np.ndarray:
    # Pixel (col, row) of the grid has its center at (x0 + col + 0.5, y0 + row + 0.5).
    if len(poly.vertices) < 3:
        raise DegeneratePolygon(f"Polygon needs at least 3 vertices, got {len(poly.vertices)}")
    verts = np.asarray(poly.vertices, dtype=np.float64)
    cols = x0 + np.arange(width) + 0.5
    rows = y0 + np.arange(height) + 0.5
    px, py = np.meshgrid(cols, rows)
    return _even_odd_inside(verts, px, py)


def rasterize(poly: Polygon, height: int, width: int) -> BinaryMask:
    """
    Rasterizes a polygon: pixel (x, y) is foreground iff its center lies inside
    the polygon under the even-odd rule. Parts outside the image are clipped.
    """
    if height <= 0 or width <= 0:
        raise ValueError(f"Image dimensions must be positive, got {height}x{width}")
    return rle_encode(_rasterize_grid(poly, height, width))


def polygon_extent(poly: Polygon) -> Optional[Tuple[int, int, int, int]]:
    """
    Pixel extent (min_col, min_row, max_col, max_row) of the unclipped rasterization,
    in image pixel coordinates (may be negative or beyond the image). None when no
    pixel center falls inside the polygon.
    """
    verts = np.asarray(poly.vertices, dtype=np.float64)
    if len(verts) < 3:
        raise DegeneratePolygon(f"Polygon needs at least 3 vertices, got {len(verts)}")
    x0 = int(np.floor(verts[:, 0].min())) - 1
    y0 = int(np.floor(verts[:, 1].min())) - 1
    x1 = int(np.ceil(verts[:, 0].max())) + 1
    y1 = int(np.ceil(verts[:, 1].max())) + 1
    grid = _rasterize_grid(poly, y1 - y0, x1 - x0, x0, y0)
    rows, cols = np.nonzero(grid)
    if rows.size == 0:
        return None
    return (int(cols.min()) + x0, int(rows.min()) + y0, int(cols.max()) + x0, int(rows.max()) + y0)


def rasterize_shifted(poly: Polygon, height: int, width: int, dx: int, dy: int) -> BinaryMask:
    """Rasterizes `poly` translated by (dx, dy) pixels into a height x width frame."""
    return rle_encode(_rasterize_grid(poly, height, width, -dx, -dy))


def _check_same_size(a: BinaryMask, b: BinaryMask) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"Mask dimensions differ: {a.shape} vs {b.shape}")


def _merge(a: BinaryMask, b: BinaryMask, op) -> BinaryMask:
    # Sweep over the union of run boundaries; membership of each segment comes
    # from the parity of the run index containing its start.
    _check_same_size(a, b)
    ends_a = np.cumsum(np.asarray(a.runs, dtype=np.int64))
    ends_b = np.cumsum(np.asarray(b.runs, dtype=np.int64))
    total = a.height * a.width
    if ends_a[-1] != total or ends_b[-1] != total:
        raise RunSumMismatch("Cannot combine masks whose runs do not cover the image")
    edges = np.unique(np.concatenate(([0], ends_a, ends_b)))
    starts = edges[:-1]
    lengths = np.diff(edges)
    in_a = np.searchsorted(ends_a, starts, side="right") % 2 == 1
    in_b = np.searchsorted(ends_b, starts, side="right") % 2 == 1
    values = op(in_a, in_b)
    return _make(a.height, a.width, _runs_from_segments(values, lengths))


def _runs_from_segments(values: np.ndarray, lengths: np.ndarray) -> Tuple[int, ...]:
    if values.size == 0:
        return (0,)
    change = np.flatnonzero(values[1:] != values[:-1]) + 1
    group_starts = np.concatenate(([0], change))
    group_lengths = np.add.reduceat(lengths, group_starts)
    runs = group_lengths.tolist()
    if values[0]:
        runs = [0] + runs
    return canonical_runs(runs)


def area(mask: BinaryMask) -> int:
    return mask.area


def intersection(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    return _merge(a, b, np.logical_and)


def union(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    return _merge(a, b, np.logical_or)


def difference(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    """Pixels of `a` that are not in `b` (houses IVM = AM - VM)."""
    return _merge(a, b, lambda x, y: x & ~y)


def is_subset(a: BinaryMask, b: BinaryMask) -> bool:
    return difference(a, b).is_empty()


def intersection_area(a: BinaryMask, b: BinaryMask) -> int:
    return intersection(a, b).area


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """
    Intersection over union; 0.0 when both masks are empty so that empty
    invisible masks never produce matches.
    """
    _check_same_size(a, b)
    inter = intersection_area(a, b)
    uni = a.area + b.area - inter
    if uni == 0:
        return 0.0
    return inter / uni


def iou_matrix(masks_a: Sequence[BinaryMask], masks_b: Sequence[BinaryMask]) -> np.ndarray:
    out = np.zeros((len(masks_a), len(masks_b)), dtype=np.float64)
    for i, a in enumerate(masks_a):
        for j, b in enumerate(masks_b):
            out[i, j] = iou(a, b)
    return out


def paste(base: BinaryMask, stamp: BinaryMask, offset: Tuple[int, int]) -> BinaryMask:
    """
    Union of `base` with `stamp` translated by offset (dx, dy). Stamp pixels that
    land outside the base frame are discarded.
    """
    dx, dy = int(offset[0]), int(offset[1])
    canvas = np.zeros(base.shape, dtype=bool)
    src = rle_decode(stamp)
    # destination window in base coordinates
    top, left = max(dy, 0), max(dx, 0)
    bottom = min(dy + stamp.height, base.height)
    right = min(dx + stamp.width, base.width)
    if bottom > top and right > left:
        canvas[top:bottom, left:right] = src[top - dy:bottom - dy, left - dx:right - dx]
    return union(base, rle_encode(canvas))


def translate(stamp: BinaryMask, offset: Tuple[int, int], height: int, width: int) -> BinaryMask:
    """Places `stamp` at `offset` in an otherwise empty height x width frame."""
    return paste(empty(height, width), stamp, offset)


def pad(mask: BinaryMask, left: int, top: int, right: int, bottom: int) -> BinaryMask:
    """
    Zero-pads a mask. The original foreground ends up translated by (left, top).
    """
    if min(left, top, right, bottom) < 0:
        raise ValueError(f"Padding amounts must be non-negative, got {(left, top, right, bottom)}")
    if left == top == right == bottom == 0:
        return mask
    dense = np.pad(rle_decode(mask), ((top, bottom), (left, right)), mode="constant", constant_values=False)
    return rle_encode(dense)


def bbox(mask: BinaryMask) -> Optional[Tuple[int, int, int, int]]:
    """Inclusive pixel box (x0, y0, x1, y1) of the foreground, None if empty."""
    if mask.is_empty():
        return None
    rows, cols = np.nonzero(rle_decode(mask))
    return (int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max()))


def crop(mask: BinaryMask, box: Tuple[int, int, int, int]) -> BinaryMask:
    """Cuts out the inclusive box (x0, y0, x1, y1); the box must lie inside the mask."""
    x0, y0, x1, y1 = box
    if x0 < 0 or y0 < 0 or x1 >= mask.width or y1 >= mask.height or x1 < x0 or y1 < y0:
        raise ValueError(f"Crop box {box} is outside the {mask.height}x{mask.width} mask")
    return rle_encode(rle_decode(mask)[y0:y1 + 1, x0:x1 + 1])


def from_segmentation(seg: Union[Dict[str, Any], List[Any]], height: int, width: int) -> BinaryMask:
    """
    Decodes a COCO-style segmentation into a mask of the given image size.

    Accepts a polygon list ([[x0, y0, x1, y1, ...], ...], all parts unioned),
    an uncompressed RLE {'size': [h, w], 'counts': [...]} or a compressed
    RLE whose 'counts' is a string.
    """
    if isinstance(seg, dict):
        if "counts" not in seg or "size" not in seg:
            raise ParseError(f"RLE segmentation needs 'size' and 'counts', got keys {sorted(seg)}")
        h, w = int(seg["size"][0]), int(seg["size"][1])
        if (h, w) != (height, width):
            raise DimensionMismatch(f"RLE size {(h, w)} does not match image size {(height, width)}")
        counts = seg["counts"]
        if isinstance(counts, str):
            return decode_compressed_counts(counts, h, w)
        mask = BinaryMask(height=h, width=w, runs=tuple(int(c) for c in counts))
        if sum(mask.runs) != h * w:
            raise RunSumMismatch(f"Runs sum to {sum(mask.runs)}, expected {h * w}")
        return _make(h, w, canonical_runs(mask.runs))
    if isinstance(seg, list):
        result = empty(height, width)
        for part in polygons_from_segmentation(seg):
            result = union(result, rasterize(part, height, width))
        return result
    raise ParseError(f"Unsupported segmentation type: {type(seg).__name__}")


def polygons_from_segmentation(seg: List[Any]) -> List[Polygon]:
    if seg and all(isinstance(c, (int, float)) for c in seg):
        # single flat polygon, as written by some COCOA exports
        return [Polygon.from_flat(seg)]
    return [Polygon.from_flat(part) for part in seg]
