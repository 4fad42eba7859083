"""Synthetic branching cells with known ground truth.

Cells are a disk soma plus polyline branches stroked as capsules of the
branch width.  The truth (branch count, junction positions and
the kind each junction should receive) is derived from the geometry: a branch
starting on another branch is a bifurcation, two branches whose segments
intersect form a crossing or a superposition depending on their angle.

Spec files hold one primitive per line::

    # comment
    size 240 200            # width height
    seed 7
    soma 40 100 10          # cx cy radius
    branch 3 48,100 200,100 # stroke width, then x,y vertices
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from skimage.draw import line as _sk_line

from .raster import label_components, neighbor_count

Point = tuple[float, float]

# at or above this angle two width-3 strokes are expected to give a crossing,
# below SUPERPOSITION_BELOW an elongated overlap split in two clusters; in
# between either outcome is accepted (measured switch point: 45 to 50 degrees)
CROSSING_FROM = 55.0
SUPERPOSITION_BELOW = 40.0


@dataclass(frozen=True)
class Soma:
    cx: float
    cy: float
    radius: float


@dataclass(frozen=True)
class Branch:
    points: tuple[Point, ...]
    width: int = 3

    def __post_init__(self) -> None:
        if len(self.points) < 2:
            raise ValueError("a branch needs at least two vertices")
        if self.width < 1:
            raise ValueError("stroke width must be >= 1")

    def segments(self) -> list[tuple[Point, Point]]:
        return list(zip(self.points[:-1], self.points[1:]))


@dataclass(frozen=True)
class Crossing:
    position: Point
    theta: float  # acute angle between the two strokes, degrees
    branches: tuple[int, int]


@dataclass(frozen=True)
class ShapeSpec:
    size: tuple[int, int]  # width, height
    soma: Soma | None
    branches: tuple[Branch, ...]
    rng_seed: int = 0

    @property
    def crossings(self) -> list[Crossing]:
        """Interior intersections between segments of different branches."""
        out: list[Crossing] = []
        for i, bi in enumerate(self.branches):
            for j in range(i + 1, len(self.branches)):
                bj = self.branches[j]
                for a0, a1 in bi.segments():
                    for b0, b1 in bj.segments():
                        hit = _intersect(a0, a1, b0, b1)
                        if hit is None:
                            continue
                        out.append(Crossing(hit, _acute_angle(a0, a1, b0, b1), (i, j)))
        return out


@dataclass(frozen=True)
class TruthRegion:
    position: Point
    kind: str  # "Bifurcation1", "Bifurcation2", "Crossing", "Superposition", "Crossing|Superposition", "merged"
    theta: float | None = None


@dataclass(frozen=True)
class GroundTruth:
    branch_count: int
    regions: tuple[TruthRegion, ...]
    crossing_count: int

    def kinds(self) -> list[str]:
        return sorted(r.kind for r in self.regions)

    def accepts(self, position_kind: str, truth: TruthRegion) -> bool:
        return position_kind in truth.kind.split("|")


def expected_kind(theta: float) -> str:
    if theta >= CROSSING_FROM:
        return "Crossing"
    if theta < SUPERPOSITION_BELOW:
        return "Superposition"
    return "Crossing|Superposition"


# ---------------------------------------------------------------------------
# geometry


def _cross(ax: float, ay: float, bx: float, by: float) -> float:
    return ax * by - ay * bx


def _intersect(a0: Point, a1: Point, b0: Point, b1: Point) -> Point | None:
    """Proper intersection point of two segments (endpoints excluded)."""
    rx, ry = a1[0] - a0[0], a1[1] - a0[1]
    sx, sy = b1[0] - b0[0], b1[1] - b0[1]
    den = _cross(rx, ry, sx, sy)
    if abs(den) < 1e-12:
        return None
    qx, qy = b0[0] - a0[0], b0[1] - a0[1]
    t = _cross(qx, qy, sx, sy) / den
    u = _cross(qx, qy, rx, ry) / den
    if 1e-9 < t < 1 - 1e-9 and 1e-9 < u < 1 - 1e-9:
        return (a0[0] + t * rx, a0[1] + t * ry)
    return None


def _acute_angle(a0: Point, a1: Point, b0: Point, b1: Point) -> float:
    ax, ay = a1[0] - a0[0], a1[1] - a0[1]
    bx, by = b1[0] - b0[0], b1[1] - b0[1]
    c = abs(ax * bx + ay * by) / (math.hypot(ax, ay) * math.hypot(bx, by))
    return math.degrees(math.acos(min(1.0, c)))


def _on_segment(p: Point, a: Point, b: Point, tol: float = 0.75) -> tuple[bool, float]:
    ax, ay = b[0] - a[0], b[1] - a[1]
    L2 = ax * ax + ay * ay
    t = ((p[0] - a[0]) * ax + (p[1] - a[1]) * ay) / L2
    if t <= 0 or t >= 1:
        return False, t
    cx, cy = a[0] + t * ax, a[1] + t * ay
    return math.hypot(p[0] - cx, p[1] - cy) <= tol, t


def _unit(a: Point, b: Point) -> Point:
    dx, dy = b[0] - a[0], b[1] - a[1]
    n = math.hypot(dx, dy)
    return (dx / n, dy / n)


def _bifurcations(spec: ShapeSpec) -> list[TruthRegion]:
    """Branches starting on another branch; kind from the side-branch angle."""
    out = []
    for i, child in enumerate(spec.branches):
        start = child.points[0]
        for j, parent in enumerate(spec.branches):
            if i == j:
                continue
            for a, b in parent.segments():
                hit, _ = _on_segment(start, a, b)
                if hit:
                    fwd = _unit(a, b)
                    side = _unit(child.points[0], child.points[1])
                    dot = fwd[0] * side[0] + fwd[1] * side[1]
                    kind = "Bifurcation1" if dot > 0 else "Bifurcation2"
                    out.append(TruthRegion(start, kind))
                    break
            else:
                continue
            break
    return out


def _merge_close(regions: list[TruthRegion], distance: float) -> list[TruthRegion]:
    """Regions closer than ``distance`` are reported as one merged region."""
    out: list[TruthRegion] = []
    used = [False] * len(regions)
    for i, r in enumerate(regions):
        if used[i]:
            continue
        group = [r]
        for j in range(i + 1, len(regions)):
            if not used[j] and math.dist(r.position, regions[j].position) < distance:
                group.append(regions[j])
                used[j] = True
        if len(group) == 1:
            out.append(r)
        else:
            cx = sum(g.position[0] for g in group) / len(group)
            cy = sum(g.position[1] for g in group) / len(group)
            out.append(TruthRegion((cx, cy), "merged"))
    return out


# ---------------------------------------------------------------------------
# rasterisation


def rasterize_polyline(points: Sequence[Point], shape: tuple[int, int]) -> np.ndarray:
    """Bresenham core of a polyline, clipped to ``shape`` (rows, cols)."""
    out = np.zeros(shape, dtype=bool)
    h, w = shape
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        rr, cc = _sk_line(int(round(y0)), int(round(x0)), int(round(y1)), int(round(x1)))
        keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        out[rr[keep], cc[keep]] = True
    return out


def stroke(points: Sequence[Point], width: int, shape: tuple[int, int]) -> np.ndarray:
    """Pixels whose centre lies within ``width / 2`` of the polyline.

    Width 1 falls back to the Bresenham core so that thin strokes stay
    8-connected.
    """
    if width <= 1:
        return rasterize_polyline(points, shape)
    h, w = shape
    out = np.zeros(shape, dtype=bool)
    r = width / 2.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        lo_x = max(0, int(math.floor(min(x0, x1) - r)))
        hi_x = min(w, int(math.ceil(max(x0, x1) + r)) + 1)
        lo_y = max(0, int(math.floor(min(y0, y1) - r)))
        hi_y = min(h, int(math.ceil(max(y0, y1) + r)) + 1)
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        yy, xx = np.mgrid[lo_y:hi_y, lo_x:hi_x]
        dx, dy = x1 - x0, y1 - y0
        L2 = dx * dx + dy * dy
        t = np.zeros(xx.shape) if L2 == 0 else ((xx - x0) * dx + (yy - y0) * dy) / L2
        t = np.clip(t, 0.0, 1.0)
        d2 = (xx - x0 - t * dx) ** 2 + (yy - y0 - t * dy) ** 2
        out[lo_y:hi_y, lo_x:hi_x] |= d2 <= r * r
    return out


def fill_specks(img: np.ndarray, max_area: int) -> np.ndarray:
    """Fill enclosed background specks of at most ``max_area`` pixels."""
    mask = np.asarray(img, dtype=bool)
    holes = ndimage.binary_fill_holes(mask) & ~mask
    if not holes.any():
        return mask.copy()
    lab, n = ndimage.label(holes)
    sizes = np.bincount(lab.ravel())
    small = sizes <= max_area
    small[0] = False
    return mask | small[lab]


def generate(
    spec: ShapeSpec, merge_distance: float = 12.0, speck_area: int = 4
) -> tuple[np.ndarray, GroundTruth]:
    """Rasterise ``spec`` and derive its ground truth.

    Junctions closer than ``merge_distance`` cannot be told apart in the image;
    they are reported as a single "merged" region instead of one region per junction.
    Background specks of up to ``speck_area`` pixels left between nearly
    parallel strokes are filled.
    """
    w, h = spec.size
    img = np.zeros((h, w), dtype=bool)
    if spec.soma is not None:
        yy, xx = np.mgrid[:h, :w]
        s = spec.soma
        img |= (xx - s.cx) ** 2 + (yy - s.cy) ** 2 <= s.radius ** 2
    for br in spec.branches:
        img |= stroke(br.points, br.width, (h, w))
    if speck_area > 0:
        img = fill_specks(img, speck_area)
    crossings = spec.crossings
    regions = _bifurcations(spec) + [
        TruthRegion(c.position, expected_kind(c.theta), c.theta) for c in crossings
    ]
    regions = _merge_close(regions, merge_distance)
    truth = GroundTruth(len(spec.branches), tuple(regions), len(crossings))
    return img, truth


def blur_and_rebinarize(img: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing of the 0/1 image, thresholded back at 0.5."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    mask = np.asarray(img, dtype=bool)
    if sigma == 0:
        return mask.copy()
    return ndimage.gaussian_filter(mask.astype(np.float64), sigma, mode="constant") >= 0.5


def topology(img: np.ndarray) -> tuple[int, int]:
    """(8-connected component count, hole count) of a binary image."""
    mask = np.asarray(img, dtype=bool)
    _, n = label_components(mask)
    bg, nb = ndimage.label(~mask, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    border = set(np.unique(np.concatenate([bg[0], bg[-1], bg[:, 0], bg[:, -1]]))) - {0}
    return n, nb - len(border)


def skeleton_signature(skel: np.ndarray) -> tuple[int, int, int]:
    """(components, terminations, junction pixels) of a one-pixel skeleton."""
    mask = np.asarray(skel, dtype=bool)
    counts = neighbor_count(mask)
    _, n = label_components(mask)
    return n, int((mask & (counts == 1)).sum()), int((mask & (counts > 2)).sum())


# ---------------------------------------------------------------------------
# spec files


def parse_spec(text: str) -> ShapeSpec:
    size: tuple[int, int] | None = None
    soma: Soma | None = None
    seed = 0
    branches: list[Branch] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        try:
            if key == "size":
                size = (int(rest[0]), int(rest[1]))
            elif key == "seed":
                seed = int(rest[0])
            elif key == "soma":
                soma = Soma(float(rest[0]), float(rest[1]), float(rest[2]))
            elif key == "branch":
                width = int(rest[0])
                pts = tuple(
                    (float(x), float(y)) for x, y in (tok.split(",") for tok in rest[1:])
                )
                branches.append(Branch(pts, width))
            else:
                raise ValueError(f"unknown primitive {key!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
    if size is None:
        raise ValueError("spec has no size line")
    return ShapeSpec(size, soma, tuple(branches), seed)


def format_spec(spec: ShapeSpec) -> str:
    lines = [f"size {spec.size[0]} {spec.size[1]}", f"seed {spec.rng_seed}"]
    if spec.soma is not None:
        s = spec.soma
        lines.append(f"soma {s.cx:g} {s.cy:g} {s.radius:g}")
    for br in spec.branches:
        pts = " ".join(f"{x:g},{y:g}" for x, y in br.points)
        lines.append(f"branch {br.width} {pts}")
    return "\n".join(lines) + "\n"


def load_spec(path: str | Path) -> ShapeSpec:
    return parse_spec(Path(path).read_text())


# ---------------------------------------------------------------------------
# ready-made cells


def _polar(cx: float, cy: float, r: float, deg: float) -> Point:
    a = math.radians(deg)
    return (cx + r * math.cos(a), cy - r * math.sin(a))


def two_branch_overlap(
    theta: float, width: int = 3, arm: float = 70.0, size: tuple[int, int] = (300, 200)
) -> ShapeSpec:
    """Soma with a straight branch and a second branch crossing it at ``theta`` degrees."""
    w, h = size
    cx, cy, r = 30.0, h / 2, 10.0
    cross = (cx + r + 110.0, cy)
    a = math.radians(theta)
    approach = (cross[0] - arm * math.cos(a), cross[1] + arm * math.sin(a))
    leave = (cross[0] + arm * math.cos(a), cross[1] - arm * math.sin(a))
    root = _polar(cx, cy, r - 2, -60)
    bend = (approach[0] - 0.0, approach[1])
    b_points: list[Point] = [root]
    if approach[1] - cy < 18:
        # keep the approach clear of the straight branch near the soma
        bend = (root[0] + 25, cy + 22)
        b_points.append(bend)
    b_points += [approach, leave]
    trunk = Branch(((cx + r - 2, cy), (cross[0] + 90.0, cy)), width)
    return ShapeSpec(size, Soma(cx, cy, r), (trunk, Branch(tuple(b_points), width)))


def bfs_fixture_a() -> list[str]:
    """Skeleton drawing of a single bifurcation approached from the east."""
    return [
        "...............",
        ".i.............",
        "..g............",
        "...e...........",
        "....c..........",
        "....dba######..",
        "...f...........",
        "..h............",
        ".j.............",
        "...............",
    ]


def bfs_fixture_b() -> list[str]:
    """Skeleton drawing of two close bifurcations seen as one region."""
    return [
        "...................",
        ".x.................",
        "..t................",
        "...q...............",
        "....n..............",
        ".....k.............",
        "......i............",
        ".......g...........",
        "........e..........",
        ".........c.........",
        "..u......dba######.",
        "...r....f..........",
        "....o..h...........",
        ".....lj............",
        "....pm.............",
        "...s...............",
        "..v................",
        "...................",
    ]


def drawing_to_mask(rows: Sequence[str]) -> tuple[np.ndarray, dict[str, tuple[int, int]]]:
    """Mask of every non-'.' cell plus the position of each lettered cell."""
    mask = np.array([[c != "." for c in row] for row in rows], dtype=bool)
    names = {
        c: (x, y) for y, row in enumerate(rows) for x, c in enumerate(row) if c not in ".#"
    }
    return mask, names


def attach_soma(rows: Sequence[str], radius: int = 5, extend: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Put a soma disk at the east end of a drawing's tail, padding the canvas.

    Returns ``(skeleton, soma)`` on the padded canvas.
    """
    mask, _ = drawing_to_mask(rows)
    h, w = mask.shape
    pad = extend + 2 * radius + 2
    skel = np.zeros((h, w + pad), dtype=bool)
    skel[:, :w] = mask
    ys, xs = np.nonzero(mask)
    tail_y = int(ys[np.argmax(xs)])
    tail_x = int(xs.max())
    skel[tail_y, tail_x + 1 : tail_x + 1 + extend] = True
    cx = tail_x + extend + radius
    yy, xx = np.mgrid[: skel.shape[0], : skel.shape[1]]
    soma = (xx - cx) ** 2 + (yy - tail_y) ** 2 <= radius ** 2
    return skel & ~soma, soma


def fixture_image(
    rows: Sequence[str], extend: int = 4, radius: int = 6, margin: int = 8
) -> tuple[np.ndarray, dict[str, tuple[int, int]]]:
    """Binary cell image built around a skeleton drawing.

    Every open end of the drawing except the tail is prolonged by ``extend``
    pixels along its last step, and a soma disk of ``radius`` is placed just
    beyond the tail end, so that the full decomposition pipeline gives back
    the drawn skeleton near the junction.  Returns the image and the lettered
    positions shifted onto it.
    """
    mask, names = drawing_to_mask(rows)
    pts = {(int(x), int(y)) for y, x in zip(*np.nonzero(mask))}
    tail = max(pts)
    counts = neighbor_count(mask)
    grown = set(pts)
    for x, y in pts:
        if (x, y) == tail or counts[y, x] != 1:
            continue
        px, py = next(
            (x + dx, y + dy)
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
            if (dx or dy) and (x + dx, y + dy) in pts
        )
        dx, dy = x - px, y - py
        grown.update((x + dx * k, y + dy * k) for k in range(1, extend + 1))
    ox = margin - min(p[0] for p in grown)
    oy = margin - min(p[1] for p in grown)
    w = max(p[0] for p in grown) + ox + 2 * radius + margin + 2
    h = max(p[1] for p in grown) + oy + margin
    img = np.zeros((h, w), dtype=bool)
    for x, y in grown:
        img[y + oy, x + ox] = True
    cx, cy = tail[0] + ox + radius, tail[1] + oy
    yy, xx = np.mgrid[:h, :w]
    img |= (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    return img, {k: (x + ox, y + oy) for k, (x, y) in names.items()}


# crossing angle per trunk and side-branch angles (from the trunk direction)
# for the slots before and after the crossing, one row per reference cell
_CELL_LAYOUT: tuple[tuple[tuple[float, float, float], ...], ...] = (
    ((90.0, 45.0, -135.0), (15.0, 135.0, 45.0), (60.0, 45.0, -45.0), (20.0, 135.0, -45.0)),
    ((75.0, 135.0, 45.0), (10.0, 45.0, -135.0), (90.0, 45.0, 45.0), (15.0, 135.0, -45.0)),
    ((60.0, 45.0, 135.0), (20.0, 135.0, -45.0), (75.0, 45.0, -135.0), (10.0, 45.0, 45.0)),
)


def _rotate(v: Point, deg: float) -> Point:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    # screen coordinates: positive angles turn counter-clockwise on screen
    return (v[0] * c + v[1] * s, -v[0] * s + v[1] * c)


def reference_cell(index: int = 0, scale: float = 1.0, width: int = 3) -> ShapeSpec:
    """Soma with four trunks, each crossed once by a branch from the soma.

    Every trunk carries a side branch before and after the crossing.  The
    crossing branch leaves the soma beside its trunk, runs alongside it and
    crosses it at the angle listed for that trunk.  Junctions on a trunk are
    ``110 * scale`` pixels apart; ``scale`` stretches every length but the
    stroke width.
    """
    layout = _CELL_LAYOUT[index % len(_CELL_LAYOUT)]
    spacing = 110.0 * scale
    r_soma = 14.0 * scale
    first = r_soma + 70.0 * scale
    length = first + 2 * spacing + 80.0 * scale
    half = int(math.ceil(length + 60.0 * scale))
    cx = cy = float(half)
    turn = 15.0 * index
    branches: list[Branch] = []
    for t, (theta, side_a, side_b) in enumerate(layout):
        d = _rotate((1.0, 0.0), turn + 90.0 * t)
        n = _rotate(d, 90.0)

        def at(x: float, y: float) -> Point:
            return (cx + x * d[0] + y * n[0], cy + x * d[1] + y * n[1])

        branches.append(Branch((at(r_soma - 2, 0.0), at(length, 0.0)), width))
        # side branches on the +n side, away from the crossing approach
        for rho, ang in ((first, side_a), (first + 2 * spacing, side_b)):
            a = math.radians(ang)
            tip = (rho + 45.0 * scale * math.cos(a), 45.0 * scale * abs(math.sin(a)))
            branches.append(Branch((at(rho, 0.0), at(*tip)), width))
        # crossing branch approaching from the -n side
        rho = first + spacing
        arm = (35.0 if theta >= CROSSING_FROM else 70.0) * scale
        c, s = math.cos(math.radians(theta)), math.sin(math.radians(theta))
        start = (rho - arm * c, -arm * s)
        end = (rho + arm * c, arm * s)
        ra = math.radians(-55.0)
        root = ((r_soma - 2) * math.cos(ra), (r_soma - 2) * math.sin(ra))
        bend = (r_soma + 25.0 * scale, -36.0 * scale)
        branches.append(Branch((at(*root), at(*bend), at(*start), at(*end)), width))
    return ShapeSpec((2 * half, 2 * half), Soma(cx, cy, r_soma), tuple(branches), index)


def reference_suite() -> list[ShapeSpec]:
    """Three reference cells with 12 junctions each."""
    return [reference_cell(i) for i in range(3)]
