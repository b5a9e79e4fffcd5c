"""Label-map algebra for seed generation.

Label maps are plain ``(H, W)`` uint8 arrays; 255 marks an unknown pixel and
class 0 is background. Score maps are ``(H, W, C)`` float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNKNOWN = 255
BACKGROUND = 0


@dataclass(frozen=True)
class Box:
    """Class-labelled box covering the half-open range [x0, x1) x [y0, y1)."""

    cls: int
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def validate(self, dims, n_classes: int | None = None) -> None:
        h, w = dims
        if not (0 <= self.x0 < self.x1 <= w and 0 <= self.y0 < self.y1 <= h):
            raise ValueError(f"box {self} outside a {h}x{w} map")
        if self.cls < 1 or self.cls == UNKNOWN or (n_classes is not None and self.cls >= n_classes):
            raise ValueError(f"box class {self.cls} out of range")

    def scaled(self, stride: int, dims) -> "Box":
        """Box on a grid downsampled by ``stride``, rounded outward."""
        h, w = dims
        return Box(self.cls, self.x0 // stride, self.y0 // stride,
                   min(-(-self.x1 // stride), w), min(-(-self.y1 // stride), h))


@dataclass
class PairLabelSet:
    """Unordered node pairs ``i < j`` with a same-class (1) / different-class (0) label."""

    i: np.ndarray
    j: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.i)


def check_label_map(m: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"label map must be a non-empty 2-D array, got shape {m.shape}")
    if n_classes is not None:
        bad = (m != UNKNOWN) & (m >= n_classes)
        if bad.any():
            raise ValueError(f"label map holds class ids >= {n_classes}")
    return m.astype(np.uint8, copy=False)


def box_order(boxes) -> list[int]:
    """Indices of ``boxes`` by descending area; later entries override earlier."""
    return sorted(range(len(boxes)), key=lambda k: (-boxes[k].area, k))


def governing_box(boxes, dims) -> np.ndarray:
    """Per pixel, the index of the box that decides it (-1 outside every box)."""
    owner = np.full(dims, -1, dtype=np.int64)
    for k in box_order(boxes):
        owner[boxes[k].slices()] = k
    return owner


def assemble_box_seeds(per_box_masks, boxes, dims) -> np.ndarray:
    """Merge per-box foreground fragments into the box seed map.

    Pixels outside every box become background. Inside, boxes are written
    largest first and only non-unknown fragment values are written, so a
    smaller box's foreground wins wherever boxes overlap.
    """
    if len(per_box_masks) != len(boxes):
        raise ValueError("need exactly one fragment per box")
    out = np.full(dims, BACKGROUND, dtype=np.uint8)
    for box in boxes:
        box.validate(dims)
        out[box.slices()] = UNKNOWN
    for k in box_order(boxes):
        box, frag = boxes[k], np.asarray(per_box_masks[k])
        if frag.shape != (box.height, box.width):
            raise ValueError(f"fragment {k} has shape {frag.shape}, box is {box.height}x{box.width}")
        if not np.isin(frag, (box.cls, UNKNOWN)).all():
            raise ValueError(f"fragment {k} holds values other than {box.cls} and 255")
        region = out[box.slices()]
        known = frag != UNKNOWN
        region[known] = frag[known]
    return out


def fuse_seeds(m_i: np.ndarray, score: np.ndarray, m_b: np.ndarray, boxes) -> np.ndarray:
    """Fuse image-level seeds ``m_i`` with box seeds ``m_b``.

    Outside the boxes the box seeds are kept. Inside, a pixel keeps its label
    when both sources agree; otherwise it falls back to the governing box's
    own seed when ``m_i`` never predicts that box's class inside the box.
    Everything else becomes unknown. The governing box's seed at a pixel is
    ``m_b`` where that equals the box class, unknown elsewhere.

    ``score`` is accepted for signature symmetry with :func:`select_confident`
    and only checked for shape.
    """
    m_i, m_b = check_label_map(m_i), check_label_map(m_b)
    if m_i.shape != m_b.shape or np.asarray(score).shape[:2] != m_i.shape:
        raise ValueError("seed maps and score map must share dimensions")
    owner = governing_box(boxes, m_i.shape)
    out = np.full(m_i.shape, UNKNOWN, dtype=np.uint8)
    outside = owner < 0
    out[outside] = m_b[outside]

    inside = ~outside
    agree = inside & (m_b == m_i)
    out[agree] = m_i[agree]

    for k, box in enumerate(boxes):
        present = np.unique(m_i[box.slices()])
        if box.cls in present:
            continue
        sel = (owner == k) & ~agree & (m_b == box.cls)
        out[sel] = box.cls
    return out


def confident_image_seeds(m_i: np.ndarray, score: np.ndarray, ratio: float = 0.4) -> np.ndarray:
    """Keep the top ``ratio`` fraction of each class's pixels in ``m_i`` by score."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    m_i = check_label_map(m_i)
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 3 or score.shape[:2] != m_i.shape:
        raise ValueError("score map must be (H, W, C) matching the label map")
    if not np.isfinite(score).all():
        raise ValueError("score map holds non-finite values")
    out = np.full(m_i.shape, UNKNOWN, dtype=np.uint8)
    for c in np.unique(m_i):
        if c == UNKNOWN:
            continue
        if c >= score.shape[2]:
            raise ValueError(f"class {c} has no score channel")
        sel = m_i == c
        s = score[..., c][sel]
        cut = np.percentile(s, 100.0 * (1.0 - ratio))
        keep = np.zeros_like(sel)
        keep[sel] = s >= cut
        out[keep] = c
    return out


def select_confident(m_f, m_b, m_i, score, ratio: float = 0.4, boxes=None) -> np.ndarray:
    """Keep fused seeds that agree with the box seeds or the confident image seeds.

    Fused seeds always agree with the box seeds where known, so without
    ``boxes`` nothing is ever removed. Given ``boxes``, agreement with the
    box seeds only counts outside every box and for in-box seeds that the
    image seeds did not support; in-box seeds taken from ``m_i`` must pass
    the confidence cut.
    """
    m_f, m_b = check_label_map(m_f), check_label_map(m_b)
    m_i = check_label_map(m_i)
    if m_f.shape != m_b.shape or m_i.shape != m_f.shape:
        raise ValueError("label maps must share dimensions")
    m_i_conf = confident_image_seeds(m_i, score, ratio)
    box_ok = m_f == m_b
    if boxes is not None:
        inside = governing_box(boxes, m_f.shape) >= 0
        box_ok &= ~inside | (m_f != m_i)
    keep = (m_f != UNKNOWN) & (box_ok | (m_f == m_i_conf))
    return np.where(keep, m_f, UNKNOWN).astype(np.uint8)


def cell_centers(n: int, stride: int) -> np.ndarray:
    starts = np.arange(0, n, stride)
    ends = np.minimum(starts + stride, n)
    return (starts + ends - 1) // 2


def downsample(m: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour sampling at cell centres; output is ceil(H/s) x ceil(W/s)."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    m = np.asarray(m)
    rows, cols = cell_centers(m.shape[0], stride), cell_centers(m.shape[1], stride)
    return m[np.ix_(rows, cols)].copy()


def _radius_offsets(r: float):
    """Offsets (dy, dx) with 0 < |offset| <= r that point to a larger flat index."""
    k = int(np.floor(r))
    out = []
    for dy in range(0, k + 1):
        for dx in range(-k, k + 1):
            if dy == 0 and dx <= 0:
                continue
            if dy * dy + dx * dx <= r * r:
                out.append((dy, dx))
    return out


def radius_pairs(h: int, w: int, r: float):
    """All unordered grid pairs (i < j) within Euclidean distance ``r``, sorted by (i, j)."""
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    ys, xs = np.mgrid[0:h, 0:w]
    ii, jj = [], []
    for dy, dx in _radius_offsets(r):
        y2, x2 = ys + dy, xs + dx
        valid = (y2 < h) & (x2 >= 0) & (x2 < w)
        ii.append((ys * w + xs)[valid])
        jj.append((y2 * w + x2)[valid])
    if not ii:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    i, j = np.concatenate(ii), np.concatenate(jj)
    order = np.lexsort((j, i))
    return i[order].astype(np.int64), j[order].astype(np.int64)


def affinity_pairs(m: np.ndarray, r: float) -> PairLabelSet:
    """Same/different-class labels for every known pixel pair within radius ``r``."""
    m = check_label_map(m)
    i, j = radius_pairs(m.shape[0], m.shape[1], r)
    flat = m.ravel()
    known = (flat[i] != UNKNOWN) & (flat[j] != UNKNOWN)
    i, j = i[known], j[known]
    return PairLabelSet(i, j, (flat[i] == flat[j]).astype(np.uint8))
