"""Contour following over the union of soma and labelled skeleton.

The follower walks background pixels that touch the object, keeping the
object on its left, which on screen is a counter-clockwise tour of the outer
boundary.  Bifurcations are walked around like any other shape.  When the walk
arrives next to a crossing or superposition, it looks up the stored pairing
for the segment it has been following and jumps to the matching side of the
paired segment along a digital straight line, so that each branch is outlined
as if the overlap were not there.
"""
from __future__ import annotations

import enum
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from skimage.draw import line as _sk_line

from .raster import BinaryImage, Pixel, code_between
from .tracker import ContinuationMap, TrackState


class ContourError(RuntimeError):
    pass


class Policy(enum.Enum):
    BRANCH = "branch"
    SOMA = "soma"


@dataclass(frozen=True)
class ParametricContour:
    points: tuple[Pixel, ...]
    bridge: tuple[bool, ...]
    closed: bool
    consumed: Counter = field(default_factory=Counter, compare=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.points) != len(self.bridge):
            raise ValueError("points and bridge flags differ in length")
        if self.closed and self.points and self.points[0] != self.points[-1]:
            raise ValueError("closed contour must end where it starts")

    def __len__(self) -> int:
        return len(self.points)

    def point_set(self) -> set[Pixel]:
        return set(self.points)

    @property
    def bridge_count(self) -> int:
        """Number of jumps (runs of bridge-flagged points plus their landing pixel)."""
        return sum(self.consumed.values())


@dataclass(frozen=True)
class ContourCursor:
    current: Pixel
    previous: Pixel
    prev_label: int = 0
    cur_label: int = 0

    def __post_init__(self) -> None:
        code_between(self.current, self.previous)

    @property
    def d_cp(self) -> int:
        return code_between(self.current, self.previous)


@dataclass
class ContourInput:
    """Everything the follower needs, detached from the tracker state."""

    union: BinaryImage
    labels: np.ndarray
    overlap: np.ndarray  # cluster id at critical pixels of crossings/superpositions, else -1
    soma_zone: BinaryImage
    skeleton: BinaryImage
    continuations: ContinuationMap
    link_pixels: frozenset[Pixel] = frozenset()

    @classmethod
    def from_state(cls, state: TrackState) -> "ContourInput":
        comp = state.components
        overlap = np.full(comp.shape, -1, dtype=np.int32)
        links: set[Pixel] = set()
        for region in state.regions.values():
            if region.kind is not None and region.kind.is_overlap:
                for x, y in region.cluster.pixels:
                    overlap[y, x] = region.id
                links.update(state.links.get(region.id, ()))
        return cls(
            union=comp.soma_zone | comp.skeleton,
            labels=state.labels,
            overlap=overlap,
            soma_zone=comp.soma_zone,
            skeleton=comp.skeleton,
            continuations=state.continuations,
            link_pixels=frozenset(links),
        )

    def occluded(self) -> BinaryImage:
        """Critical pixels of bridged regions plus the link segments between them."""
        mask = self.overlap >= 0
        for x, y in self.link_pixels:
            mask[y, x] = True
        return mask


# ---------------------------------------------------------------------------
# primitives


def bresenham(a: Pixel, b: Pixel) -> list[Pixel]:
    """8-connected digital segment from ``a`` to ``b`` inclusive."""
    if a == b:
        raise ValueError("bresenham needs two distinct points")
    rr, cc = _sk_line(a[1], a[0], b[1], b[0])
    return list(zip(cc.tolist(), rr.tolist()))


_EIGHT = np.ones((3, 3), dtype=bool)
# unit steps east, north, west, south: counter-clockwise on screen
DIRS4: tuple[Pixel, ...] = ((1, 0), (0, -1), (-1, 0), (0, 1))


def find_first_pixel(union: BinaryImage) -> Pixel:
    """Raster-first background pixel touching the object (off-image pixels never count)."""
    fg = np.asarray(union, dtype=bool)
    if not fg.any():
        raise ContourError("no contour start")
    touch = ndimage.binary_dilation(fg, structure=_EIGHT) & ~fg
    if not touch.any():
        raise ContourError("no contour start")
    ys, xs = np.nonzero(touch)
    return (int(xs[0]), int(ys[0]))


def notch_pixels(union: BinaryImage, where: BinaryImage | None = None) -> BinaryImage:
    """Background pixels squeezed between object pixels on opposite sides.

    These are the one-pixel-wide entrances the soma rule steps over.  With
    ``where`` only pixels inside that mask are reported.
    """
    fg = np.pad(np.asarray(union, dtype=bool), 1)
    left, right = fg[1:-1, :-2], fg[1:-1, 2:]
    up, down = fg[:-2, 1:-1], fg[2:, 1:-1]
    out = ~fg[1:-1, 1:-1] & ((left & right) | (up & down))
    if where is not None:
        out &= np.asarray(where, dtype=bool)
    return out


def soma_notches(union: BinaryImage, soma_zone: BinaryImage, skeleton: BinaryImage) -> BinaryImage:
    """Notch pixels next to the soma and away from every skeleton pixel."""
    zone = np.asarray(soma_zone, dtype=bool)
    if not zone.any():
        return np.zeros_like(zone)
    near_soma = ndimage.binary_dilation(zone, structure=_EIGHT)
    sk = np.asarray(skeleton, dtype=bool)
    near_skel = ndimage.binary_dilation(sk, structure=_EIGHT) if sk.any() else np.zeros_like(zone)
    return notch_pixels(union, near_soma & ~near_skel)


@dataclass(frozen=True)
class Crack:
    """A unit edge between an object pixel ``f`` and the background pixel beside it.

    ``h`` indexes ``DIRS4``; the walk moves along ``h`` with ``f`` on its left
    (on its right when ``ccw`` is false).
    """

    f: Pixel
    h: int
    ccw: bool = True

    def side(self, h: int | None = None) -> Pixel:
        """Unit vector from the background pixel towards ``f``."""
        h = self.h if h is None else h
        return DIRS4[(h + 1) % 4] if self.ccw else DIRS4[(h - 1) % 4]

    @property
    def b(self) -> Pixel:
        s = self.side()
        return (self.f[0] - s[0], self.f[1] - s[1])


class _Grid:
    def __init__(self, union: BinaryImage, filled: BinaryImage | None = None):
        self.union = np.asarray(union, dtype=bool)
        self.fg = self.union | filled if filled is not None else self.union
        self.h, self.w = self.fg.shape
        self.touch4 = ndimage.binary_dilation(self.fg) & ~self.fg

    def inside(self, p: Pixel) -> bool:
        return 0 <= p[0] < self.w and 0 <= p[1] < self.h

    def is_fg(self, p: Pixel) -> bool:
        return self.inside(p) and bool(self.fg[p[1], p[0]])

    def advance(self, c: Crack) -> tuple[Crack, list[Pixel]]:
        """Move one edge along the boundary; returns the new edge and new background pixels."""
        step = DIRS4[c.h]
        b = c.b
        lf = (c.f[0] + step[0], c.f[1] + step[1])
        rf = (b[0] + step[0], b[1] + step[1])
        turn = 1 if c.ccw else -1
        if self.is_fg(rf):
            # object continues across the corner: turn away from it
            return Crack(rf, (c.h - turn) % 4, c.ccw), []
        if self.is_fg(lf):
            return Crack(lf, c.h, c.ccw), [rf]
        # convex corner: wrap around f through the diagonal pixel
        return Crack(c.f, (c.h + turn) % 4, c.ccw), [rf, lf]

    def start(self) -> Crack:
        ys, xs = np.nonzero(self.fg)
        if len(xs) == 0:
            raise ContourError("no contour start")
        return Crack((int(xs[0]), int(ys[0])), 2)

    def crack_at(self, p: Pixel, travel: tuple[float, float], ccw: bool = True) -> Crack | None:
        """Edge with background pixel ``p`` whose heading best matches ``travel``."""
        if self.is_fg(p):
            return None
        best = None
        for h in range(4):
            probe = Crack((0, 0), h, ccw)
            s = probe.side()
            f = (p[0] + s[0], p[1] + s[1])
            if not self.is_fg(f):
                continue
            score = DIRS4[h][0] * travel[0] + DIRS4[h][1] * travel[1]
            if best is None or score > best[0]:
                best = (score, Crack(f, h, ccw))
        return best[1] if best else None


def next_pixel(
    union: BinaryImage, cursor: ContourCursor, policy: Policy = Policy.BRANCH
) -> Pixel:
    """One step of the follower from ``cursor``.

    The walk keeps going in the sense implied by the move from ``previous``
    to ``current``.  Under the soma policy one-pixel entrances are treated as
    closed and stepped over.
    """
    filled = notch_pixels(union) if policy is Policy.SOMA else None
    grid = _Grid(union, filled)
    cur, prev = cursor.current, cursor.previous
    motion = (cur[0] - prev[0], cur[1] - prev[1])

    def agreement(c: Crack) -> int:
        d = DIRS4[c.h]
        return d[0] * motion[0] + d[1] * motion[1]

    def after(crack: Crack, anchor: Pixel) -> Pixel | None:
        # walk on from ``crack`` and return the first pixel emitted after ``anchor``
        passed = anchor == prev and crack.b == prev
        for _ in range(12):
            crack, out = grid.advance(crack)
            for p in out:
                if passed and p != anchor:
                    return p
                if p == anchor:
                    passed = True
                elif not passed and p != prev:
                    return None
        return None

    here = [c for c in (grid.crack_at(cur, motion, True), grid.crack_at(cur, motion, False)) if c]
    if here:
        crack = max(here, key=agreement)
        for _ in range(8):
            crack, out = grid.advance(crack)
            for p in out:
                if p != cur:
                    return p
        raise ContourError(f"stuck contour at {cur}")
    # a corner pixel touching the object only diagonally: recover the edge from ``previous``
    for ccw in (True, False):
        start = grid.crack_at(prev, motion, ccw)
        if start is None:
            continue
        nxt = after(start, cur)
        if nxt is not None:
            return nxt
    raise ContourError(f"stuck contour at {cur}: no object pixel beside it")


# ---------------------------------------------------------------------------
# bridging


@dataclass
class _Bridger:
    inp: ContourInput
    grid: _Grid
    consumed: Counter = field(default_factory=Counter)

    def near_overlap(self, p: Pixel) -> set[int]:
        out = set()
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                x, y = p[0] + dx, p[1] + dy
                if self.grid.inside((x, y)) and self.inp.overlap[y, x] >= 0:
                    out.add(int(self.inp.overlap[y, x]))
        return out

    def label_of(self, p: Pixel) -> int | None:
        x, y = p
        if self.grid.inside(p) and self.inp.overlap[y, x] < 0 and self.inp.labels[y, x] > 0:
            return int(self.inp.labels[y, x])
        return None

    def find_key(self, p: Pixel, followed: int | None) -> Pixel | None:
        keys = [
            (p[0] + dx, p[1] + dy)
            for dy in range(-2, 3)
            for dx in range(-2, 3)
            if (p[0] + dx, p[1] + dy) in self.inp.continuations
        ]
        if not keys:
            return None

        def rank(q: Pixel) -> tuple:
            lab = int(self.inp.labels[q[1], q[0]])
            return (lab != followed, (q[0] - p[0]) ** 2 + (q[1] - p[1]) ** 2, q[1], q[0])

        return min(keys, key=rank)

    def arm_direction(self, key: Pixel, mate: Pixel, steps: int = 5) -> tuple[int, int]:
        """Direction of the segment leaving the overlap at ``mate``."""
        seen = {mate}
        frontier = [mate]
        far = mate
        for _ in range(steps):
            nxt = []
            for p in frontier:
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        q = (p[0] + dx, p[1] + dy)
                        if q in seen or not self.grid.inside(q):
                            continue
                        x, y = q
                        if not self.inp.skeleton[y, x] or self.inp.overlap[y, x] >= 0:
                            continue
                        if q in self.inp.link_pixels:
                            continue
                        seen.add(q)
                        nxt.append(q)
            if not nxt:
                break
            frontier = nxt
            far = max(nxt, key=lambda q: (q[0] - mate[0]) ** 2 + (q[1] - mate[1]) ** 2)
        if far == mate:
            return (mate[0] - key[0], mate[1] - key[1])
        return (far[0] - mate[0], far[1] - mate[1])

    def landing(self, key: Pixel, mate: Pixel, at: Pixel) -> Crack:
        """Resume point beside ``mate``, near the offset-preserving target.

        The walk keeps the object on its left, so the landing edge must have
        the leaving segment on its left while heading away from the overlap.
        """
        t = self.arm_direction(key, mate)
        norm = math.hypot(t[0], t[1]) or 1.0
        right = (-t[1], t[0])
        ideal = (mate[0] + at[0] - key[0], mate[1] + at[1] - key[1])
        best = None
        fallback = None
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                q = (mate[0] + dx, mate[1] + dy)
                if not self.grid.inside(q) or not self.grid.touch4[q[1], q[0]]:
                    continue
                d = (q[0] - ideal[0]) ** 2 + (q[1] - ideal[1]) ** 2
                crack = self.grid.crack_at(q, t)
                if crack is None:
                    continue
                if fallback is None or (d, q[1], q[0]) < fallback[0]:
                    fallback = ((d, q[1], q[0]), crack)
                h = DIRS4[crack.h]
                on_right = dx * right[0] + dy * right[1] > 0
                # heading within 60 degrees of the leaving segment
                if not on_right or h[0] * t[0] + h[1] * t[1] < 0.5 * norm:
                    continue
                if best is None or (d, q[1], q[0]) < best[0]:
                    best = ((d, q[1], q[0]), crack)
        if best is not None:
            return best[1]
        if fallback is not None:
            return fallback[1]
        raise ContourError(f"no landing pixel next to {mate}")


def traverse_region(
    bridger: _Bridger, at: Pixel, followed: int | None, region: int
) -> tuple[list[Pixel], Crack | None]:
    """Bridge across an overlap: Bresenham line from ``at`` to the paired side.

    Returns the line (``at`` first) and the boundary edge to resume from.
    """
    key = bridger.find_key(at, followed)
    if key is None:
        raise ContourError(f"unbridged region {region} near {at}")
    mate = bridger.inp.continuations.get(key)
    assert mate is not None
    crack = bridger.landing(key, mate, at)
    target = crack.b
    if target == at:
        return [], None
    bridger.consumed[frozenset((key, mate))] += 1
    return bresenham(at, target), crack


# ---------------------------------------------------------------------------
# full walks


def _walk(grid: _Grid, bridger: _Bridger | None) -> ParametricContour:
    start = grid.start()
    crack = start
    points: list[Pixel] = []
    flags: list[bool] = []
    followed: int | None = None
    was_near: set[int] = set()
    budget = 4 * int(grid.fg.sum()) + 16
    while True:
        budget -= 1
        if budget < 0:
            raise ContourError("non-terminating contour")
        crack, out = grid.advance(crack)
        if bridger is not None:
            lab = bridger.label_of(crack.f)
            if lab is not None:
                followed = lab
        for p in out:
            if points and p == points[-1]:
                continue
            points.append(p)
            flags.append(False)
            if bridger is None:
                continue
            near = bridger.near_overlap(p)
            fresh = near - was_near
            was_near = near
            if not fresh or len(points) < 2:
                continue
            line, landed = traverse_region(bridger, p, followed, min(fresh))
            if landed is None:
                continue
            for q in line[1:-1]:
                points.append(q)
                flags.append(True)
            points.append(line[-1])
            flags.append(False)
            crack = landed
            was_near = bridger.near_overlap(line[-1])
            break
        if crack == start:
            break
    if points[-1] != points[0]:
        points.append(points[0])
        flags.append(False)
    consumed = bridger.consumed if bridger else Counter()
    return ParametricContour(tuple(points), tuple(flags), True, consumed)


def extract_contour(inp: ContourInput | TrackState) -> ParametricContour:
    """Closed contour of soma plus skeleton with jumps across overlaps."""
    if isinstance(inp, TrackState):
        inp = ContourInput.from_state(inp)
    grid = _Grid(inp.union, soma_notches(inp.union, inp.soma_zone, inp.skeleton))
    return _walk(grid, _Bridger(inp, grid))


def traditional_contour(
    union: BinaryImage,
    soma_zone: BinaryImage | None = None,
    skeleton: BinaryImage | None = None,
) -> ParametricContour:
    """Plain follower on the same union: identical stepping rules, no jumps."""
    union = np.asarray(union, dtype=bool)
    filled = None
    if soma_zone is not None:
        sk = skeleton if skeleton is not None else union & ~np.asarray(soma_zone, dtype=bool)
        filled = soma_notches(union, soma_zone, sk)
    return _walk(_Grid(union, filled), None)


def near_occluded(inp: ContourInput, radius: int = 1) -> BinaryImage:
    """Pixels within Chebyshev ``radius`` of an occluded pixel."""
    occ = inp.occluded()
    if not occ.any():
        return occ
    return ndimage.binary_dilation(occ, structure=np.ones((2 * radius + 1,) * 2, bool))


def pairing_counts(contour: ParametricContour) -> list[int]:
    return sorted(contour.consumed.values())


def points_array(contour: ParametricContour) -> np.ndarray:
    return np.array(contour.points, dtype=np.int64).reshape(-1, 2)


def contour_mask(contour: ParametricContour, shape: Sequence[int]) -> np.ndarray:
    out = np.zeros(tuple(shape), dtype=bool)
    for x, y in contour.points:
        if 0 <= y < out.shape[0] and 0 <= x < out.shape[1]:
            out[y, x] = True
    return out
