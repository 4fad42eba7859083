"""Branch tracking: label every skeleton segment, classify the critical regions
and record how branches continue across overlaps.

The tracker walks each branch pixel by pixel from its seed.  When a walk runs
into a critical cluster, a breadth-first search across the cluster finds the
outgoing arms; the arm best aligned with the incoming direction continues the
branch with the same label, and the region is classified from the incoming and
outgoing directions.  Side arms of bifurcations become secondary seeds; at
crossings and superpositions the (incoming end, outgoing start) pixel pairs are
stored so the contour follower can jump over the overlap later.
"""
from __future__ import annotations

import enum
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .decompose import ComponentSet, CriticalCluster, seed_anchor
from .raster import CHAIN, Pixel, code_between, neighbors8, rotate_code

log = logging.getLogger(__name__)


class RegionKind(str, enum.Enum):
    BIFURCATION1 = "Bifurcation1"
    BIFURCATION2 = "Bifurcation2"
    BIFURCATION3 = "Bifurcation3"
    BIFURCATION4 = "Bifurcation4"
    SUPERPOSITION = "Superposition"
    CROSSING = "Crossing"
    UNCLASSIFIED = "Unclassified"

    @property
    def is_overlap(self) -> bool:
        return self in (RegionKind.SUPERPOSITION, RegionKind.CROSSING)

    @property
    def is_bifurcation(self) -> bool:
        return self.value.startswith("Bifurcation")


class TrackingError(RuntimeError):
    pass


class RunawayBFSError(TrackingError):
    pass


class UnreachedPixelsError(TrackingError):
    def __init__(self, pixels: Sequence[Pixel]):
        self.pixels = list(pixels)
        super().__init__(f"unreached skeleton pixels: {self.pixels[:20]}")


@dataclass(frozen=True)
class DirectionVector:
    origin: Pixel
    tip: Pixel

    def __post_init__(self) -> None:
        if self.origin == self.tip:
            raise ValueError("direction vector needs origin != tip")

    @property
    def unit(self) -> tuple[float, float]:
        dx = self.tip[0] - self.origin[0]
        dy = self.tip[1] - self.origin[1]
        n = math.hypot(dx, dy)
        return (dx / n, dy / n)

    def dot(self, other: "DirectionVector") -> float:
        a, b = self.unit, other.unit
        return a[0] * b[0] + a[1] * b[1]


@dataclass(frozen=True)
class OutwardArm:
    """One branch leaving a critical region, as seen by the breadth-first search."""

    vector: DirectionVector
    start: Pixel  # first non-critical pixel of the arm, where tracking resumes
    via: Pixel  # critical pixel the arm hangs off
    cluster: int


@dataclass(frozen=True)
class BfsState:
    index: int
    current: Pixel
    queue: tuple[Pixel, ...]
    b: int
    sigma: int


@dataclass
class BfsResult:
    tips: list[Pixel]
    parents: dict[Pixel, Pixel | None]
    states: list[BfsState]
    visited: set[Pixel]
    clusters: set[int]


@dataclass
class CriticalRegion:
    cluster: CriticalCluster
    kind: RegionKind | None = None
    inward: DirectionVector | None = None
    outward: list[DirectionVector] = field(default_factory=list)
    partner: int | None = None
    diagnostic: str | None = None

    @property
    def id(self) -> int:
        return self.cluster.id

    @property
    def classified(self) -> bool:
        return self.kind is not None


class ContinuationMap:
    """Symmetric pairing of segment end pixels across overlaps."""

    def __init__(self) -> None:
        self._to: dict[Pixel, Pixel] = {}
        self._region: dict[Pixel, int] = {}
        self._pairs: list[tuple[Pixel, Pixel, int]] = []

    def add(self, a: Pixel, b: Pixel, region: int) -> bool:
        if a == b or a in self._to or b in self._to:
            return False
        self._to[a] = b
        self._to[b] = a
        self._region[a] = self._region[b] = region
        self._pairs.append((a, b, region))
        return True

    def get(self, p: Pixel) -> Pixel | None:
        return self._to.get(p)

    def region_of(self, p: Pixel) -> int | None:
        return self._region.get(p)

    def __contains__(self, p: object) -> bool:
        return p in self._to

    def __len__(self) -> int:
        return len(self._pairs)

    def keys(self) -> Iterable[Pixel]:
        return self._to.keys()

    def pairs(self) -> list[tuple[Pixel, Pixel, int]]:
        return list(self._pairs)


@dataclass(frozen=True)
class TrackerConfig:
    bfs_stop: int = 5
    lookback: int = 5
    d_max: int = 48
    cos_eps: float = 0.20
    max_bfs_pixels: int = 20000
    reverse_ties: bool = False

    def __post_init__(self) -> None:
        if self.bfs_stop < 1:
            raise ValueError("bfs_stop must be >= 1")
        if not 0 < self.cos_eps < 1:
            raise ValueError("cos_eps must lie in (0, 1)")
        if self.lookback < 1 or self.d_max < 0:
            raise ValueError("lookback must be >= 1 and d_max >= 0")


@dataclass(frozen=True)
class Termination:
    last: Pixel | None
    path: tuple[Pixel, ...]


@dataclass(frozen=True)
class ReachedRegion:
    cluster: int
    entry: Pixel
    path: tuple[Pixel, ...]


@dataclass(frozen=True)
class AlreadyLabeled:
    pixel: Pixel
    path: tuple[Pixel, ...] = ()


@dataclass
class TrackState:
    components: ComponentSet
    labels: np.ndarray
    cluster_of: np.ndarray
    regions: dict[int, CriticalRegion]
    continuations: ContinuationMap = field(default_factory=ContinuationMap)
    next_label: int = 1
    pending_primary: deque = field(default_factory=deque)
    pending_secondary: deque = field(default_factory=deque)
    deferred: deque = field(default_factory=deque)
    bfs_traces: list[tuple[int, Pixel, list[BfsState]]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    # link segments labelled while bridging a compound region
    links: dict[int, tuple[Pixel, ...]] = field(default_factory=dict)

    @classmethod
    def start(cls, components: ComponentSet) -> "TrackState":
        cmap = components.cluster_map()
        return cls(
            components=components,
            labels=np.zeros(components.shape, dtype=np.int32),
            cluster_of=cmap,
            regions={c.id: CriticalRegion(c) for c in components.clusters},
            pending_primary=deque(components.primary_seeds),
        )

    def new_label(self) -> int:
        lab = self.next_label
        self.next_label += 1
        return lab

    def _inside(self, p: Pixel) -> bool:
        h, w = self.labels.shape
        return 0 <= p[0] < w and 0 <= p[1] < h

    def is_skeleton(self, p: Pixel) -> bool:
        return self._inside(p) and bool(self.components.skeleton[p[1], p[0]])

    def is_critical(self, p: Pixel) -> bool:
        return self._inside(p) and self.cluster_of[p[1], p[0]] >= 0

    def is_valid(self, p: Pixel) -> bool:
        """Foreground, not labelled and not critical."""
        return (
            self._inside(p)
            and bool(self.components.skeleton[p[1], p[0]])
            and self.labels[p[1], p[0]] == 0
            and self.cluster_of[p[1], p[0]] < 0
        )

    def cluster_at(self, p: Pixel) -> int:
        return int(self.cluster_of[p[1], p[0]])

    def unreached(self) -> list[Pixel]:
        sk = self.components.skeleton
        mask = sk & (self.labels == 0) & (self.cluster_of < 0)
        ys, xs = np.nonzero(mask)
        return list(zip(xs.tolist(), ys.tolist()))

    @property
    def label_count(self) -> int:
        return self.next_label - 1


# ---------------------------------------------------------------------------
# segment walking


def track_segment(
    state: TrackState,
    seed: Pixel,
    label: int,
    *,
    leaving: frozenset[int] = frozenset(),
) -> Termination | ReachedRegion | AlreadyLabeled:
    """Label pixels from ``seed`` until a termination or a critical region.

    ``leaving`` holds the clusters just crossed: critical neighbours belonging
    to them are ignored so a walk that starts next to its own region moves
    away from it.
    """
    if state.is_critical(seed):
        raise ValueError(f"seed {seed} is a critical pixel")
    if not state.is_skeleton(seed):
        raise ValueError(f"seed {seed} is not a skeleton pixel")
    if state.labels[seed[1], seed[0]] != 0:
        return AlreadyLabeled(seed)
    path = [seed]
    state.labels[seed[1], seed[0]] = label
    cur = seed
    while True:
        nxt = None
        crit = None
        for q in neighbors8(cur):
            if state.is_valid(q):
                nxt = q
                break
            if crit is None and state.is_critical(q) and state.cluster_at(q) not in leaving:
                crit = q
        if nxt is not None:
            state.labels[nxt[1], nxt[0]] = label
            path.append(nxt)
            cur = nxt
            leaving = frozenset()
            continue
        if crit is not None:
            return ReachedRegion(state.cluster_at(crit), cur, tuple(path))
        return Termination(cur, tuple(path))


# ---------------------------------------------------------------------------
# breadth-first search across a region


def bfs_order(back: int | None) -> list[int]:
    """Neighbour scan order for a pixel whose predecessor lies in direction ``back``.

    Relative to the predecessor direction taken as code 1, the forward codes
    3, 4, 5, 6, 7, 8 are scanned, then the remaining diagonal 2.
    """
    if back is None:
        return [3, 4, 5, 6, 7, 8, 1, 2]
    return [rotate_code(back, r) for r in (2, 3, 4, 5, 6, 7, 1)]


def bfs_across_region(
    state: TrackState,
    entry: Pixel,
    stop_after: int,
    *,
    previous: Pixel | None = None,
    exclude: Iterable[Pixel] = (),
    max_pixels: int = 20000,
) -> BfsResult:
    """Breadth-first expansion from ``entry`` through unlabelled skeleton pixels.

    After each dequeue the queue is checked: B is 1 when every queued pixel is
    non-critical and Σ counts consecutive B = 1 states.  The search stops when
    Σ reaches ``stop_after``; the pixels left in the queue are the tips of the
    outgoing arms.  If the queue runs dry first, the childless non-critical
    pixels reached are returned as tips.
    """
    queue: deque[Pixel] = deque([entry])
    visited = {entry, *exclude}
    parents: dict[Pixel, Pixel | None] = {entry: previous}
    states: list[BfsState] = []
    clusters: set[int] = set()
    leaves: list[Pixel] = []
    sigma = 0
    stopped = False
    while queue:
        cur = queue.popleft()
        par = parents[cur]
        back = code_between(cur, par) if par is not None and _adjacent(cur, par) else None
        children = 0
        for code in bfs_order(back):
            dx, dy = CHAIN[code]
            q = (cur[0] + dx, cur[1] + dy)
            if q in visited or not state.is_skeleton(q):
                continue
            if state.labels[q[1], q[0]] != 0:
                continue
            visited.add(q)
            parents[q] = cur
            queue.append(q)
            children += 1
            if state.is_critical(q):
                clusters.add(state.cluster_at(q))
            if len(visited) > max_pixels:
                raise RunawayBFSError(f"runaway BFS from {entry}")
        if children == 0 and cur != entry and not state.is_critical(cur):
            leaves.append(cur)
        b = 1 if queue and not any(state.is_critical(q) for q in queue) else 0
        sigma = sigma + 1 if b else 0
        states.append(BfsState(len(states), cur, tuple(queue), b, sigma))
        if sigma >= stop_after:
            stopped = True
            break
    tips = list(queue) if stopped else leaves
    return BfsResult(tips, parents, states, visited, clusters)


def _adjacent(a: Pixel, b: Pixel) -> bool:
    return a != b and abs(a[0] - b[0]) <= 1 and abs(a[1] - b[1]) <= 1


def format_bfs_table(states: Sequence[BfsState], names: dict[Pixel, str] | None = None) -> str:
    """Render queue states in the ``state | current | queue | B | Σ`` layout."""
    def name(p: Pixel) -> str:
        return names.get(p, f"{p[0]}:{p[1]}") if names else f"{p[0]}:{p[1]}"

    lines = ["state,current,queue,B,sigma"]
    for s in states:
        lines.append(
            f"{s.index:02d},{name(s.current)},{' '.join(name(q) for q in s.queue)},{s.b},{s.sigma}"
        )
    return "\n".join(lines) + "\n"


def letter_names(states: Sequence[BfsState]) -> dict[Pixel, str]:
    """Name pixels a, b, c, ... in visiting order, skipping 'w'."""
    alphabet = [c for c in "abcdefghijklmnopqrstuvxyz"]
    names: dict[Pixel, str] = {}
    for s in states:
        for p in (s.current, *s.queue):
            if p not in names:
                idx = len(names)
                names[p] = alphabet[idx] if idx < len(alphabet) else f"p{idx}"
    return names


# ---------------------------------------------------------------------------
# direction vectors


def inward_vector(
    history: Sequence[Pixel], entry: Pixel, lookback: int, cluster: CriticalCluster
) -> DirectionVector:
    """Vector from the ``lookback``-th previous pixel of the walk to ``entry``."""
    trail = list(history)
    if trail and trail[-1] == entry:
        trail = trail[:-1]
    candidates = trail[-lookback:] if trail else []
    for origin in candidates:
        if origin != entry:
            return DirectionVector(origin, entry)
    # no predecessor at all: aim at the cluster
    cx, cy = cluster.centroid
    tip = (entry[0] + int(round(cx - entry[0]) or 0), entry[1] + int(round(cy - entry[1]) or 0))
    if tip == entry:
        tip = next(iter(sorted(cluster.pixels)))
    return DirectionVector(entry, tip)


def _extend_arm(state: TrackState, origin: Pixel, path: set[Pixel], tip: Pixel, reach: int) -> Pixel:
    """Follow the arm past ``tip`` until it lies ``reach`` pixels beyond ``origin``."""
    seen = set(path)
    cur = tip

    def dist(q: Pixel) -> int:
        return max(abs(q[0] - origin[0]), abs(q[1] - origin[1]))

    while dist(cur) < reach:
        nxt = [
            q
            for q in neighbors8(cur)
            if q not in seen and state.is_skeleton(q) and not state.is_critical(q)
        ]
        if not nxt:
            break
        cur = max(nxt, key=dist)
        seen.update(nxt)
    return cur


def outward_arms(state: TrackState, bfs: BfsResult, reach: int = 0) -> list[OutwardArm]:
    """Origin, start and direction of every arm found by ``bfs``.

    The origin of a tip is found by climbing the parent links back towards
    the region: it is the last non-critical pixel before the first critical
    one.  A tip whose climb never meets a critical pixel is dropped.  With
    ``reach`` the tip is pushed further along its arm until it is that many
    pixels away from the origin, so short horizons still give a usable
    direction.
    """
    arms: list[OutwardArm] = []
    for tip in bfs.tips:
        node = tip
        last_valid = tip
        via = None
        path: set[Pixel] = set()
        while node is not None:
            if state.is_critical(node):
                via = node
                break
            last_valid = node
            path.add(node)
            node = bfs.parents.get(node)
        if via is None:
            state.warnings.append(f"tip {tip} has no path back to a critical pixel")
            continue
        origin = last_valid if last_valid != tip else via
        if reach and last_valid != tip:
            tip = _extend_arm(state, origin, path, tip, reach)
        arms.append(
            OutwardArm(DirectionVector(origin, tip), last_valid, via, state.cluster_at(via))
        )
    return arms


def compute_direction_vectors(
    state: TrackState,
    entry: Pixel,
    bfs: BfsResult,
    history: Sequence[Pixel],
    lookback: int,
    cluster: CriticalCluster,
) -> tuple[DirectionVector, list[OutwardArm]]:
    return inward_vector(history, entry, lookback, cluster), outward_arms(state, bfs)


def choose_continuation(
    inward: DirectionVector, outward: Sequence[DirectionVector], *, reverse_ties: bool = False
) -> int:
    """Index of the outward vector with the largest projection on ``inward``.

    Ties go to the lowest index (or the highest with ``reverse_ties``).
    """
    if not outward:
        raise ValueError("no outward vectors")
    dots = [inward.dot(v) for v in outward]
    best = max(dots)
    tied = [i for i, d in enumerate(dots) if d >= best - 1e-12]
    return tied[-1] if reverse_ties else tied[0]


def _continuation(
    state: TrackState,
    cfg: TrackerConfig,
    v0: DirectionVector,
    history: Sequence[Pixel],
    entry: Pixel,
    cluster: CriticalCluster,
    arms: Sequence[OutwardArm],
    overlap: bool = False,
) -> int:
    """``choose_continuation`` with two refinements.

    Across an overlap with three leaving arms the choice also scores how
    straight the remaining two arms continue each other, so the pairing does
    not depend on which arm the walk arrived by.  Exact ties (short integer
    vectors tie often) are re-examined on vectors three times the lookback
    before falling back to index order.
    """
    vecs = [a.vector for a in arms]

    def scores(inward: DirectionVector, vs: Sequence[DirectionVector]) -> list[float]:
        out = [inward.dot(v) for v in vs]
        if overlap and len(vs) == 3:
            for k in range(3):
                i, j = [m for m in range(3) if m != k]
                out[k] -= vs[i].dot(vs[j])
        return out

    dots = scores(v0, vecs)
    best = max(dots)
    tied = [i for i, d in enumerate(dots) if d >= best - 1e-12]
    if len(tied) > 1:
        reach = 3 * cfg.lookback
        far_in = inward_vector(history, entry, reach, cluster)
        far = [
            DirectionVector(v.origin, _extend_arm(state, v.origin, {v.origin}, v.tip, reach))
            for v in vecs
        ]
        long_dots = scores(far_in, far)
        top = max(long_dots[i] for i in tied)
        tied = [i for i in tied if long_dots[i] >= top - 1e-12]
    return tied[-1] if cfg.reverse_ties else tied[0]


# ---------------------------------------------------------------------------
# classification


@dataclass(frozen=True)
class Nearby:
    """A second region reachable from one outward arm of the current region."""

    cluster: int
    distance: int
    link_arm: int  # index in E1 of the arm leading to it
    link: tuple[Pixel, ...]
    arms: tuple[OutwardArm, ...]  # its own outward arms, link excluded


def _approx_one(d: float, eps: float) -> bool:
    return d >= 1.0 - eps


def _approx_minus_one(d: float, eps: float) -> bool:
    return d <= -1.0 + eps


def _has_crossing_pair(v0: DirectionVector, vs: Sequence[DirectionVector], eps: float) -> bool:
    n = len(vs)
    for k in range(n):
        if not _approx_one(v0.dot(vs[k]), eps):
            continue
        for j in range(n):
            for l in range(j + 1, n):
                if k in (j, l):
                    continue
                if _approx_minus_one(vs[j].dot(vs[l]), eps):
                    return True
    return False


def classify_region(
    v0: DirectionVector,
    e1: Sequence[DirectionVector],
    nearby: Sequence[Nearby] = (),
    d_max: int = 48,
    eps: float = 0.20,
) -> tuple[RegionKind, Nearby | None, str | None]:
    """Walk the decision tree for one region.

    Returns the kind, the partner region when the compound rules matched,
    and a diagnostic string when nothing matched.
    """
    n = len(e1)
    if n == 3:
        if _has_crossing_pair(v0, e1, eps):
            return RegionKind.CROSSING, None, None
        # two junctions inside one search horizon: agglutinated bifurcation
        return RegionKind.BIFURCATION4, None, None
    if n == 2:
        dots = [v0.dot(v) for v in e1]
        if all(d > 0 for d in dots):
            return RegionKind.BIFURCATION1, None, None
        for s2 in sorted(nearby, key=lambda s: s.distance):
            if s2.distance >= d_max or len(s2.arms) != 2:
                continue
            vj = e1[1 - s2.link_arm]
            dj = v0.dot(vj)
            e2 = [a.vector for a in s2.arms]
            pairs = [(0, 1), (1, 0)]
            if dj <= 0 and any(
                _approx_one(v0.dot(e2[k]), eps) and _approx_minus_one(vj.dot(e2[l]), eps)
                for k, l in pairs
            ):
                return RegionKind.SUPERPOSITION, s2, None
            if any(
                _approx_one(v0.dot(e2[k]), eps) and not _approx_minus_one(vj.dot(e2[l]), eps)
                for k, l in pairs
            ):
                kind = RegionKind.BIFURCATION4 if dj <= 0 else RegionKind.BIFURCATION3
                return kind, s2, None
        if any(d > 0 for d in dots) and any(d <= 0 for d in dots):
            return RegionKind.BIFURCATION2, None, None
        return RegionKind.UNCLASSIFIED, None, f"|E1|=2 with dots {dots!r}"
    if n > 3 and _has_crossing_pair(v0, e1, eps):
        return RegionKind.CROSSING, None, f"crossing with |E1|={n}"
    return RegionKind.UNCLASSIFIED, None, f"|E1|={n}"


# ---------------------------------------------------------------------------
# driving loop


@dataclass
class _Step:
    """Where a walk continues after crossing a region."""

    start: Pixel
    leaving: frozenset[int]
    bridge: tuple[Pixel, ...] = ()


def _walk_link(state: TrackState, arm: OutwardArm, seen: set[int], limit: int) -> tuple[int, tuple[Pixel, ...], Pixel] | None:
    """Follow unlabelled pixels from ``arm.start`` to the next critical cluster."""
    path = [arm.start]
    prev = arm.via
    cur = arm.start
    while len(path) <= limit:
        nxt = None
        for q in neighbors8(cur):
            if q == prev or q in path:
                continue
            if state.is_critical(q):
                cid = state.cluster_at(q)
                if cid not in seen:
                    return cid, tuple(path), q
                continue
            if state.is_valid(q):
                nxt = q
                break
        if nxt is None:
            return None
        prev, cur = cur, nxt
        path.append(cur)
    return None


def _nearby_regions(
    state: TrackState, arms: Sequence[OutwardArm], seen: set[int], cfg: TrackerConfig
) -> list[Nearby]:
    found: list[Nearby] = []
    for i, arm in enumerate(arms):
        walked = _walk_link(state, arm, seen, cfg.d_max)
        if walked is None:
            continue
        cid, link, _ = walked
        distance = len(link) + 1
        if distance >= cfg.d_max:
            continue
        bfs = bfs_across_region(
            state,
            link[-1],
            cfg.bfs_stop,
            previous=link[-2] if len(link) > 1 else arm.via,
            exclude=set(link) | {arm.via},
            max_pixels=cfg.max_bfs_pixels,
        )
        far = [a for a in outward_arms(state, bfs, cfg.lookback) if a.cluster != arm.cluster]
        found.append(Nearby(cid, distance, i, link, tuple(far)))
    return found


def _cross_region(
    state: TrackState,
    cfg: TrackerConfig,
    cid: int,
    entry: Pixel,
    history: list[Pixel],
    label: int,
) -> _Step | None:
    region = state.regions[cid]

    # overlap already resolved from another side: follow the stored pairing
    mapped = state.continuations.get(entry)
    if mapped is not None and state.is_valid(mapped):
        other = state.continuations.region_of(entry)
        leaving = {cid, other} if other is not None else {cid}
        if region.partner is not None:
            leaving.add(region.partner)
        link = state.links.get(cid, ())
        return _Step(mapped, frozenset(leaving), link)

    prev = history[-2] if len(history) >= 2 else None
    bfs = bfs_across_region(
        state, entry, cfg.bfs_stop, previous=prev, max_pixels=cfg.max_bfs_pixels
    )
    state.bfs_traces.append((cid, entry, bfs.states))
    arms = outward_arms(state, bfs, cfg.lookback)
    if not arms:
        if not region.classified:
            region.inward = inward_vector(history, entry, cfg.lookback, region.cluster)
            region.kind = RegionKind.UNCLASSIFIED
            region.diagnostic = "no outward arm"
        return None
    v0 = inward_vector(history, entry, cfg.lookback, region.cluster)
    e1 = [a.vector for a in arms]
    seen = set(bfs.clusters) | {cid}

    if not region.classified:
        nearby: list[Nearby] = []
        if len(arms) == 2 and not all(v0.dot(v) > 0 for v in e1):
            nearby = _nearby_regions(state, arms, seen, cfg)
        kind, s2, diag = classify_region(v0, e1, nearby, cfg.d_max, cfg.cos_eps)
        region.kind, region.inward, region.outward = kind, v0, e1
        region.diagnostic = diag
        for other in seen - {cid}:
            # clusters swallowed by the same search belong to this region
            o = state.regions[other]
            if not o.classified:
                o.kind, o.partner = kind, cid
        if s2 is not None:
            region.partner = s2.cluster
            o = state.regions[s2.cluster]
            if not o.classified:
                o.kind, o.partner = kind, cid
                o.outward = [a.vector for a in s2.arms]
            return _resolve_compound(state, cfg, region, v0, arms, s2, entry, label, history)
    elif region.partner is not None and len(arms) == 2:
        # revisiting one half of a compound region
        nearby = _nearby_regions(state, arms, seen, cfg)
        partner = next((n for n in nearby if n.cluster == region.partner), None)
        if partner is not None:
            return _resolve_compound(
                state, cfg, region, v0, arms, partner, entry, label, history
            )

    overlap = region.kind is not None and region.kind.is_overlap
    k = _continuation(state, cfg, v0, history, entry, region.cluster, arms, overlap)
    chosen = arms[k]
    rest = [a for i, a in enumerate(arms) if i != k]
    kind = region.kind or RegionKind.UNCLASSIFIED
    if kind.is_overlap:
        state.continuations.add(entry, chosen.start, cid)
        _pair_laterals(state, cfg, rest, cid)
        for a in rest:
            state.deferred.append((a.start, a.via, a.cluster))
    else:
        for a in rest:
            state.pending_secondary.append((a.start, a.via, a.cluster))
    return _Step(chosen.start, frozenset(seen))


def _pair_laterals(state: TrackState, cfg: TrackerConfig, rest: Sequence[OutwardArm], cid: int) -> None:
    used: set[int] = set()
    for i in range(len(rest)):
        for j in range(i + 1, len(rest)):
            if i in used or j in used:
                continue
            if _approx_minus_one(rest[i].vector.dot(rest[j].vector), cfg.cos_eps):
                state.continuations.add(rest[i].start, rest[j].start, cid)
                used.update((i, j))


def _resolve_compound(
    state: TrackState,
    cfg: TrackerConfig,
    region: CriticalRegion,
    v0: DirectionVector,
    arms: Sequence[OutwardArm],
    s2: Nearby,
    entry: Pixel,
    label: int,
    history: Sequence[Pixel] = (),
) -> _Step:
    """Continue across a region paired with a nearby second cluster."""
    side = arms[1 - s2.link_arm]
    candidates = [side, *s2.arms]
    overlap = region.kind is not None and region.kind.is_overlap
    k = _continuation(state, cfg, v0, history, entry, region.cluster, candidates, overlap)
    chosen = candidates[k]
    rest = [a for i, a in enumerate(candidates) if i != k]
    leaving = frozenset({region.id, s2.cluster})
    link: tuple[Pixel, ...] = ()
    if chosen is not side:
        # the branch runs through the link: it carries the same label
        for x, y in s2.link:
            if state.labels[y, x] == 0:
                state.labels[y, x] = label
        link = s2.link
        state.links[region.id] = link
        state.links[s2.cluster] = link
    else:
        state.pending_secondary.append((s2.link[0], arms[s2.link_arm].via, region.id))
    kind = region.kind or RegionKind.UNCLASSIFIED
    if kind.is_overlap:
        state.continuations.add(entry, chosen.start, region.id)
        _pair_laterals(state, cfg, rest, region.id)
        for a in rest:
            state.deferred.append((a.start, a.via, a.cluster))
    else:
        for a in rest:
            state.pending_secondary.append((a.start, a.via, a.cluster))
    return _Step(chosen.start, leaving, link)


def _run_branch(
    state: TrackState,
    cfg: TrackerConfig,
    seed: Pixel,
    label: int,
    history: list[Pixel],
    leaving: frozenset[int] = frozenset(),
) -> None:
    pos = seed
    budget = int(state.components.skeleton.sum()) + 8
    while budget > 0:
        budget -= 1
        if not state.is_valid(pos):
            return
        event = track_segment(state, pos, label, leaving=leaving)
        if isinstance(event, AlreadyLabeled):
            return
        history.extend(event.path)
        if isinstance(event, Termination):
            return
        step = _cross_region(state, cfg, event.cluster, event.entry, history, label)
        if step is None:
            return
        history.extend(step.bridge)
        pos, leaving = step.start, step.leaving


def _drain(state: TrackState, cfg: TrackerConfig, queue: deque) -> None:
    while queue:
        start, via, cid = queue.popleft()
        if state.is_valid(start):
            _run_branch(state, cfg, start, state.new_label(), [via], frozenset({cid}))
            _drain_secondary(state, cfg)


def _drain_secondary(state: TrackState, cfg: TrackerConfig) -> None:
    while state.pending_secondary:
        start, via, cid = state.pending_secondary.popleft()
        if state.is_valid(start):
            _run_branch(state, cfg, start, state.new_label(), [via], frozenset({cid}))


def _fallback_seeds(state: TrackState) -> list[Pixel]:
    """Unlabelled segment ends in raster order: terminations first, then other ends."""
    rest = state.unreached()
    rest_set = set(rest)
    ends, others = [], []
    for p in rest:
        n = sum(1 for q in neighbors8(p) if q in rest_set)
        (ends if n <= 1 else others).append(p)
    terms = [p for p in ends if state.components.skeleton[p[1], p[0]] and
             sum(1 for q in neighbors8(p) if state.is_skeleton(q)) == 1]
    return terms + [p for p in ends if p not in set(terms)] + others


def track_all(components: ComponentSet, cfg: TrackerConfig | None = None) -> TrackState:
    """Label every branch and classify every critical region reached."""
    cfg = cfg or TrackerConfig()
    state = TrackState.start(components)
    if cfg.reverse_ties:
        # highest index first for seeds as well as for tied continuations
        state.pending_primary.reverse()
    while state.pending_primary:
        seed = state.pending_primary.popleft()
        if not state.is_valid(seed):
            continue
        anchor = seed_anchor(components, seed)
        _run_branch(state, cfg, seed, state.new_label(), [anchor] if anchor else [])
        _drain_secondary(state, cfg)
    _drain(state, cfg, state.deferred)
    for _ in range(2):
        for seed in _fallback_seeds(state):
            if state.is_valid(seed):
                _run_branch(state, cfg, seed, state.new_label(), [])
                _drain_secondary(state, cfg)
                _drain(state, cfg, state.deferred)
    missing = state.unreached()
    if missing:
        raise UnreachedPixelsError(missing)
    for region in state.regions.values():
        if region.kind is None:
            region.kind = RegionKind.UNCLASSIFIED
            region.diagnostic = region.diagnostic or "never reached by a walk"
    return state
