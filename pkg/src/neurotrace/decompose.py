"""Split a binary cell image into soma, periphery skeleton, critical pixels,
terminations and primary seeds."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .raster import (
    BinaryImage,
    Pixel,
    area_open,
    dilate,
    disk,
    erode,
    label_components,
    neighbor_count,
    neighbors8,
    prune_redundant,
    prune_spurs,
    raster_pixels,
    square,
    thin,
)


class NoSomaError(ValueError):
    """Raised when nothing survives the soma erosion."""


@dataclass(frozen=True)
class CriticalCluster:
    id: int
    pixels: frozenset[Pixel]

    @property
    def centroid(self) -> tuple[float, float]:
        xs = [p[0] for p in self.pixels]
        ys = [p[1] for p in self.pixels]
        return (sum(xs) / len(xs), sum(ys) / len(ys))


@dataclass(frozen=True)
class ComponentSet:
    soma: BinaryImage
    skeleton: BinaryImage
    critical_pixels: BinaryImage
    clusters: tuple[CriticalCluster, ...]
    terminations: tuple[Pixel, ...]
    primary_seeds: tuple[Pixel, ...]
    # pixels removed from the thinned mask around the soma; also the soma part
    # of the contour input so that branches stay attached to it
    soma_zone: BinaryImage = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.skeleton.shape

    def cluster_map(self) -> np.ndarray:
        """Array with the cluster id at each critical pixel, -1 elsewhere."""
        out = np.full(self.shape, -1, dtype=np.int32)
        for c in self.clusters:
            for x, y in c.pixels:
                out[y, x] = c.id
        return out

    def check(self) -> list[str]:
        """Return the list of violated invariants (empty when consistent)."""
        problems = []
        if (self.soma & self.skeleton).any():
            problems.append("soma and skeleton overlap")
        if (self.critical_pixels & ~self.skeleton).any():
            problems.append("critical pixel outside skeleton")
        counts = neighbor_count(self.skeleton)
        for x, y in self.terminations:
            if counts[y, x] != 1:
                problems.append(f"termination {(x, y)} has {counts[y, x]} neighbours")
        if self.soma.any():
            ring = dilate(self.soma_zone, square(1))
            for x, y in self.primary_seeds:
                if not (self.skeleton[y, x] and ring[y, x]):
                    problems.append(f"seed {(x, y)} not adjacent to the soma")
        return problems


@dataclass(frozen=True)
class DecomposeConfig:
    soma_erosion_radius: int = 3
    soma_dilation_radius: int = 1
    soma_min_area: int = 20
    skel_min_area: int = 10
    spur_len: int = 3


def extract_soma(
    img: BinaryImage,
    erosion_radius: int = 3,
    dilation_radius: int = 1,
    min_area: int = 20,
) -> BinaryImage:
    """Largest component surviving erosion, area opening and dilation."""
    mask = np.asarray(img, dtype=bool)
    if mask.size == 0:
        raise ValueError("empty input")
    core = erode(mask, disk(erosion_radius))
    core = area_open(core, max(1, min_area))
    if not core.any():
        raise NoSomaError("no soma found")
    soma = dilate(core, disk(dilation_radius)) & mask
    lab, n = label_components(soma)
    sizes = np.bincount(lab.ravel())
    sizes[0] = 0
    return lab == int(np.argmax(sizes))


def extract_skeleton(
    img: BinaryImage,
    soma: BinaryImage | None,
    spur_len: int = 3,
    min_skel_area: int = 10,
) -> BinaryImage:
    """One-pixel-wide periphery skeleton: thin, cut away the soma, clean up."""
    mask = np.asarray(img, dtype=bool)
    skel = prune_redundant(thin(mask))
    keep = None
    if soma is not None and soma.any():
        zone = dilate(soma, disk(1))
        skel = skel & ~zone
        keep = dilate(zone, disk(1))
    if skel.any():
        skel = area_open(skel, max(1, min_skel_area))
    skel = prune_spurs(skel, spur_len, keep=keep)
    skel = prune_redundant(skel)
    if skel.any():
        skel = area_open(skel, max(1, min_skel_area))
    return skel


def find_critical_clusters(skel: BinaryImage) -> list[CriticalCluster]:
    mask = np.asarray(skel, dtype=bool)
    crit = mask & (neighbor_count(mask) > 2)
    lab, n = label_components(crit)
    groups: dict[int, list[Pixel]] = {}
    for x, y in raster_pixels(crit):
        groups.setdefault(int(lab[y, x]), []).append((x, y))
    ordered = sorted(groups.values(), key=lambda px: (px[0][1], px[0][0]))
    return [CriticalCluster(i, frozenset(px)) for i, px in enumerate(ordered)]


def find_terminations(skel: BinaryImage) -> list[Pixel]:
    mask = np.asarray(skel, dtype=bool)
    return raster_pixels(mask & (neighbor_count(mask) == 1))


def find_primary_seeds(skel: BinaryImage, soma: BinaryImage | None) -> list[Pixel]:
    """One seed per contact between the skeleton and the soma.

    A contact is an 8-connected run of skeleton pixels next to the dilated
    soma.  Its seed is the raster-first pixel among its skeleton end points
    (the branch's end on the soma side), or its raster-first pixel when the
    run has no end point.  Branches joined far from the soma (for instance by
    a crossing) still get a seed each.  Without a soma every component contributes its
    raster-first termination (or its raster-first pixel when it has none,
    e.g. a closed loop).
    """
    mask = np.asarray(skel, dtype=bool)
    seeds: dict[int, Pixel] = {}
    if soma is not None and np.asarray(soma).any():
        ring = dilate(dilate(soma, disk(1)), square(1))
        contact = mask & ring
        lab, _ = label_components(contact)
        ends = contact & (neighbor_count(mask) == 1)
        for p in raster_pixels(ends) + raster_pixels(contact):
            seeds.setdefault(int(lab[p[1], p[0]]), p)
    else:
        lab, _ = label_components(mask)
        for p in find_terminations(mask):
            seeds.setdefault(int(lab[p[1], p[0]]), p)
        for p in raster_pixels(mask):
            seeds.setdefault(int(lab[p[1], p[0]]), p)
    return sorted(seeds.values(), key=lambda p: (p[1], p[0]))


def decompose(img: BinaryImage, cfg: DecomposeConfig | None = None) -> ComponentSet:
    """Run the whole preprocessing pipeline.

    Inputs without a blob thick enough for a soma are processed soma-less.
    """
    cfg = cfg or DecomposeConfig()
    mask = np.asarray(img, dtype=bool)
    if mask.size == 0:
        raise ValueError("empty input")
    try:
        soma = extract_soma(
            mask, cfg.soma_erosion_radius, cfg.soma_dilation_radius, cfg.soma_min_area
        )
    except NoSomaError:
        soma = np.zeros_like(mask)
    skel = extract_skeleton(mask, soma, cfg.spur_len, cfg.skel_min_area)
    zone = dilate(soma, disk(1)) if soma.any() else np.zeros_like(mask)
    clusters = find_critical_clusters(skel)
    crit = np.zeros_like(mask)
    for c in clusters:
        for x, y in c.pixels:
            crit[y, x] = True
    return ComponentSet(
        soma=soma,
        skeleton=skel,
        critical_pixels=crit,
        clusters=tuple(clusters),
        terminations=tuple(find_terminations(skel)),
        primary_seeds=tuple(find_primary_seeds(skel, soma if soma.any() else None)),
        soma_zone=zone,
    )


def components_from_skeleton(
    skel: BinaryImage, soma: BinaryImage | None = None
) -> ComponentSet:
    """Wrap an already one-pixel-wide skeleton (fixtures, external skeletons)."""
    mask = np.asarray(skel, dtype=bool)
    soma_mask = np.zeros_like(mask) if soma is None else np.asarray(soma, dtype=bool)
    zone = dilate(soma_mask, disk(1)) if soma_mask.any() else np.zeros_like(mask)
    mask = mask & ~zone
    clusters = find_critical_clusters(mask)
    crit = np.zeros_like(mask)
    for c in clusters:
        for x, y in c.pixels:
            crit[y, x] = True
    return ComponentSet(
        soma=soma_mask,
        skeleton=mask,
        critical_pixels=crit,
        clusters=tuple(clusters),
        terminations=tuple(find_terminations(mask)),
        primary_seeds=tuple(find_primary_seeds(mask, soma_mask if soma_mask.any() else None)),
        soma_zone=zone,
    )


def seed_anchor(components: ComponentSet, seed: Pixel) -> Pixel | None:
    """A soma-zone pixel next to ``seed``, used as the seed's virtual predecessor."""
    h, w = components.shape
    for q in neighbors8(seed):
        if 0 <= q[0] < w and 0 <= q[1] < h and components.soma_zone[q[1], q[0]]:
            return q
    return None
