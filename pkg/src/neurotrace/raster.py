"""Pixel-grid primitives and the binary morphology used by preprocessing.

Images are plain 2D numpy arrays indexed ``[y, x]``; a ``BinaryImage`` is a
boolean array with ``True`` for foreground.  Pixel coordinates passed around
the package are ``(x, y)`` tuples.  Anything outside the image is background,
except for erosion, which ignores structuring-element offsets that fall off
the grid (so a saturated image erodes to itself).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from skimage.morphology import thin as _sk_thin

Pixel = tuple[int, int]
BinaryImage = np.ndarray

# Chain-code directions 1..8: east, then counter-clockwise with north = row - 1.
CHAIN: dict[int, Pixel] = {
    1: (1, 0),
    2: (1, -1),
    3: (0, -1),
    4: (-1, -1),
    5: (-1, 0),
    6: (-1, 1),
    7: (0, 1),
    8: (1, 1),
}
CHAIN_OF: dict[Pixel, int] = {v: k for k, v in CHAIN.items()}

EIGHT = tuple(CHAIN[d] for d in range(1, 9))
FOUR = ((1, 0), (0, -1), (-1, 0), (0, 1))
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def rotate_code(code: int, steps: int) -> int:
    """Chain code ``steps`` positions counter-clockwise from ``code`` (negative = clockwise)."""
    return (code - 1 + steps) % 8 + 1


def opposite(code: int) -> int:
    return (code + 3) % 8 + 1


def code_between(a: Pixel, b: Pixel) -> int:
    """Chain code of the unit step from ``a`` to the 8-adjacent pixel ``b``."""
    step = (b[0] - a[0], b[1] - a[1])
    if step not in CHAIN_OF:
        raise ValueError(f"{a} and {b} are not 8-adjacent")
    return CHAIN_OF[step]


def inside(shape: tuple[int, int], p: Pixel) -> bool:
    return 0 <= p[0] < shape[1] and 0 <= p[1] < shape[0]


def neighbors8(p: Pixel) -> list[Pixel]:
    return [(p[0] + dx, p[1] + dy) for dx, dy in EIGHT]


def pixel_set(mask: BinaryImage) -> set[Pixel]:
    ys, xs = np.nonzero(mask)
    return set(zip(xs.tolist(), ys.tolist()))


def raster_pixels(mask: BinaryImage) -> list[Pixel]:
    """Foreground pixels in raster order (top row first, left to right)."""
    ys, xs = np.nonzero(mask)
    return list(zip(xs.tolist(), ys.tolist()))


def neighbor_count(mask: BinaryImage) -> np.ndarray:
    """Number of foreground 8-neighbours of every pixel (off-image counts as background)."""
    m = mask.astype(np.int32)
    kernel = np.ones((3, 3), dtype=np.int32)
    kernel[1, 1] = 0
    return ndimage.convolve(m, kernel, mode="constant", cval=0)


@dataclass(frozen=True)
class StructuringElement:
    """Flat structuring element given as integer ``(dx, dy)`` offsets around the origin."""

    offsets: frozenset[Pixel]

    @property
    def radius(self) -> int:
        return max((max(abs(dx), abs(dy)) for dx, dy in self.offsets), default=0)

    def footprint(self) -> np.ndarray:
        r = self.radius
        fp = np.zeros((2 * r + 1, 2 * r + 1), dtype=bool)
        for dx, dy in self.offsets:
            fp[dy + r, dx + r] = True
        return fp

    def reflected(self) -> "StructuringElement":
        return StructuringElement(frozenset((-dx, -dy) for dx, dy in self.offsets))


def disk(radius: int) -> StructuringElement:
    """Discrete disk: every offset with ``dx**2 + dy**2 <= radius**2``."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    r = int(radius)
    return StructuringElement(
        frozenset(
            (dx, dy)
            for dy in range(-r, r + 1)
            for dx in range(-r, r + 1)
            if dx * dx + dy * dy <= r * r
        )
    )


def square(radius: int) -> StructuringElement:
    """Square of side ``2 * radius + 1``: dilation grows by ``radius`` in every 8-direction."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    r = int(radius)
    return StructuringElement(
        frozenset((dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1))
    )


def _as_mask(img: BinaryImage) -> np.ndarray:
    arr = np.asarray(img, dtype=bool)
    if arr.ndim != 2:
        raise ValueError("expected a 2D image")
    return arr


def otsu_threshold(gray: np.ndarray) -> int:
    """Threshold minimising the intra-class variance over an 8-bit histogram.

    Pixels with value ``<= t`` form the lower class.  Returns ``t``.
    """
    values = np.clip(np.asarray(gray), 0, 255).astype(np.int64).ravel()
    hist = np.bincount(values, minlength=256).astype(np.float64)
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    s0 = np.cumsum(hist * levels)
    s1 = s0[-1] - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        m0 = np.where(w0 > 0, s0 / w0, 0.0)
        m1 = np.where(w1 > 0, s1 / w1, 0.0)
    # within = total - between; minimising within == maximising between
    between = w0 * w1 * (m0 - m1) ** 2
    between[(w0 == 0) | (w1 == 0)] = -1.0
    return int(np.argmax(between))


def binarize(
    gray: np.ndarray,
    threshold: int | float | None = None,
    *,
    dark_foreground: bool = True,
) -> BinaryImage:
    """Binarise a grey-level image.

    ``threshold=None`` selects the threshold automatically (intra-class
    variance minimisation).  With ``dark_foreground`` the structure is the
    dark class (``value <= t``); otherwise the bright class (``value > t``).
    """
    arr = np.asarray(gray)
    if arr.size == 0:
        raise ValueError("empty input")
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=2)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    t = otsu_threshold(arr) if threshold is None else threshold
    return arr <= t if dark_foreground else arr > t


def erode(img: BinaryImage, se: StructuringElement) -> BinaryImage:
    mask = _as_mask(img)
    if not se.offsets:
        return np.ones_like(mask)
    return ndimage.binary_erosion(mask, structure=se.footprint(), border_value=1)


def dilate(img: BinaryImage, se: StructuringElement) -> BinaryImage:
    mask = _as_mask(img)
    if not se.offsets:
        return np.zeros_like(mask)
    # scipy reflects the structure for dilation, matching the textbook definition
    return ndimage.binary_dilation(mask, structure=se.footprint(), border_value=0)


def label_components(mask: BinaryImage) -> tuple[np.ndarray, int]:
    """8-connected component labelling."""
    return ndimage.label(_as_mask(mask), structure=EIGHT_CONNECTED)


def area_open(img: BinaryImage, min_area: int) -> BinaryImage:
    """Drop 8-connected components with fewer than ``min_area`` pixels."""
    if min_area < 1:
        raise ValueError("min_area must be >= 1")
    lab, n = label_components(img)
    if n == 0:
        return np.zeros_like(_as_mask(img))
    sizes = np.bincount(lab.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[lab]


@dataclass(frozen=True)
class HitOrMissTemplate:
    """3x3 interval template: ``hits`` must be foreground, ``misses`` background."""

    hits: frozenset[Pixel]
    misses: frozenset[Pixel]

    def __post_init__(self) -> None:
        if self.hits & self.misses:
            raise ValueError("hits and misses overlap")
        for dx, dy in self.hits | self.misses:
            if max(abs(dx), abs(dy)) > 1:
                raise ValueError("template offsets must lie in the 3x3 window")

    @classmethod
    def from_rows(cls, rows: Sequence[str]) -> "HitOrMissTemplate":
        """Build from three strings using ``1`` (hit), ``0`` (miss), ``.`` (don't care)."""
        hits, misses = set(), set()
        for dy, row in zip((-1, 0, 1), rows):
            for dx, ch in zip((-1, 0, 1), row.replace(" ", "")):
                if ch == "1":
                    hits.add((dx, dy))
                elif ch == "0":
                    misses.add((dx, dy))
        return cls(frozenset(hits), frozenset(misses))

    def transformed(self, rot: int, flip: bool) -> "HitOrMissTemplate":
        def t(p: Pixel) -> Pixel:
            x, y = p
            if flip:
                x = -x
            for _ in range(rot % 4):
                x, y = y, -x
            return (x, y)

        return HitOrMissTemplate(
            frozenset(t(p) for p in self.hits), frozenset(t(p) for p in self.misses)
        )

    def symmetries(self) -> list["HitOrMissTemplate"]:
        out: list[HitOrMissTemplate] = []
        for flip in (False, True):
            for rot in range(4):
                tpl = self.transformed(rot, flip)
                if tpl not in out:
                    out.append(tpl)
        return out

    def matches_at(self, mask: np.ndarray, p: Pixel) -> bool:
        h, w = mask.shape
        for dx, dy in self.hits:
            x, y = p[0] + dx, p[1] + dy
            if not (0 <= x < w and 0 <= y < h and mask[y, x]):
                return False
        for dx, dy in self.misses:
            x, y = p[0] + dx, p[1] + dy
            if 0 <= x < w and 0 <= y < h and mask[y, x]:
                return False
        return True


# Redundant L-corner of a staircase: the centre links its north and east
# neighbours, which already touch diagonally, and nothing hangs off its
# west/south side.  NW, NE and SE are don't-cares because anything there is
# still attached to the north or east neighbour once the centre goes.
REDUNDANT_CORNER = HitOrMissTemplate.from_rows(
    [
        ". 1 .",
        "0 1 1",
        "0 0 .",
    ]
)
REDUNDANCY_TEMPLATES: tuple[HitOrMissTemplate, ...] = tuple(REDUNDANT_CORNER.symmetries())


def _shift(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """``out[y, x] = mask[y + dy, x + dx]`` with background outside."""
    h, w = mask.shape
    out = np.zeros_like(mask)
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    ys_src = slice(max(0, dy), min(h, h + dy))
    xs_src = slice(max(0, dx), min(w, w + dx))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def hit_or_miss(img: BinaryImage, tpl: HitOrMissTemplate) -> BinaryImage:
    mask = _as_mask(img)
    out = np.ones_like(mask)
    for dx, dy in tpl.hits:
        out &= _shift(mask, dx, dy)
    for dx, dy in tpl.misses:
        out &= ~_shift(mask, dx, dy)
    return out


def thin(img: BinaryImage) -> BinaryImage:
    """Homotopic two-subiteration thinning down to an 8-connected skeleton.

    Parallel thinning can leave 2x2 blocks at junctions; those are broken by
    deleting simple pixels so the result is one pixel wide.
    """
    mask = _as_mask(img)
    if not mask.any():
        return mask.copy()
    return break_blocks(_sk_thin(mask))


def is_simple(mask: np.ndarray, p: Pixel) -> bool:
    """Deleting ``p`` keeps 8-connectivity of the object and 4-connectivity of the background."""
    x, y = p
    h, w = mask.shape
    nb = [
        0 <= x + dx < w and 0 <= y + dy < h and bool(mask[y + dy, x + dx]) for dx, dy in EIGHT
    ]
    # 8-connectivity number: background runs around the ring, counted from the 4-neighbours
    bg = [not v for v in nb]
    crossings = sum(bg[k] and not (bg[(k + 1) % 8] and bg[(k + 2) % 8]) for k in (0, 2, 4, 6))
    return crossings == 1


def break_blocks(skel: BinaryImage) -> BinaryImage:
    """Remove simple, non-end pixels from fully set 2x2 blocks, in raster order."""
    out = _as_mask(skel).copy()
    while True:
        blk = out[:-1, :-1] & out[1:, :-1] & out[:-1, 1:] & out[1:, 1:]
        if not blk.any():
            return out
        removed = False
        for y, x in zip(*np.nonzero(blk)):
            y, x = int(y), int(x)
            if not out[y : y + 2, x : x + 2].all():
                continue
            for p in ((x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)):
                if _count8(out, p) >= 2 and is_simple(out, p):
                    out[p[1], p[0]] = False
                    removed = True
                    break
        if not removed:
            return out


def _count8(mask: np.ndarray, p: Pixel) -> int:
    x, y = p
    return int(mask[max(y - 1, 0) : y + 2, max(x - 1, 0) : x + 2].sum()) - int(mask[y, x])


def prune_redundant(
    skel: BinaryImage, templates: Iterable[HitOrMissTemplate] = REDUNDANCY_TEMPLATES
) -> BinaryImage:
    """Remove redundant staircase corners matched by any of ``templates``.

    Candidates come from a parallel hit-or-miss pass, but deletion is
    sequential in raster order with a re-check, so two corners of a 2x2 block
    are never removed together.
    """
    templates = tuple(templates)
    out = _as_mask(skel).copy()
    while True:
        cand = np.zeros_like(out)
        for tpl in templates:
            cand |= hit_or_miss(out, tpl)
        if not cand.any():
            return out
        removed = 0
        for p in raster_pixels(cand):
            if any(tpl.matches_at(out, p) for tpl in templates):
                out[p[1], p[0]] = False
                removed += 1
        if removed == 0:
            return out


def _walk_terminal_segment(
    mask: np.ndarray, counts: np.ndarray, start: Pixel, limit: int
) -> list[Pixel] | None:
    """Pixels from a termination up to (excluding) the first junction pixel.

    Returns ``None`` when the walk is longer than ``limit`` or never meets a
    junction (an isolated path is not a spur).
    """
    h, w = mask.shape
    path = [start]
    prev: Pixel | None = None
    cur = start
    while True:
        nxt = []
        for dx, dy in EIGHT:
            q = (cur[0] + dx, cur[1] + dy)
            if q == prev or not (0 <= q[0] < w and 0 <= q[1] < h) or not mask[q[1], q[0]]:
                continue
            if q in path:
                continue
            nxt.append(q)
        if not nxt:
            return None
        junction = [q for q in nxt if counts[q[1], q[0]] > 2]
        if junction or len(nxt) > 1:
            return path
        prev, cur = cur, nxt[0]
        path.append(cur)
        if len(path) > limit:
            return None


def prune_spurs(
    skel: BinaryImage, max_spur_len: int, *, keep: BinaryImage | None = None
) -> BinaryImage:
    """Iteratively remove terminal segments of at most ``max_spur_len`` pixels.

    A terminal segment runs from a termination to the nearest junction
    (a pixel with more than two skeleton neighbours).  Terminations lying in
    ``keep`` are never pruned.
    """
    out = _as_mask(skel).copy()
    if max_spur_len <= 0:
        return out
    protect = None if keep is None else _as_mask(keep)
    while True:
        counts = neighbor_count(out)
        ends = raster_pixels(out & (counts == 1))
        spurs: list[list[Pixel]] = []
        for e in ends:
            if protect is not None and protect[e[1], e[0]]:
                continue
            seg = _walk_terminal_segment(out, counts, e, max_spur_len)
            if seg is not None:
                spurs.append(seg)
        if not spurs:
            return out
        for seg in spurs:
            for x, y in seg:
                out[y, x] = False
