"""Command-line pipeline: image in, labelled skeleton, regions and contour out.

Each input goes through decomposition, branch tracking and contour extraction.
Artifacts land in ``<out>/<input stem>/``:

- ``report.txt``: key/value summary plus region and continuation tables
- ``contour.csv``: the contour as ``t,x,y,bridge`` rows
- ``timing.txt``: wall time, kept apart so reports stay byte-identical
- ``overlay.png`` with ``--emit-overlay``
- ``traditional.csv`` and ``traditional.png`` with ``--emit-traditional``
- ``bfs/NNN_regionK.csv`` queue-state tables with ``--bfs-trace``
"""
from __future__ import annotations

import argparse
import colorsys
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .contour import (
    ContourError,
    ParametricContour,
    extract_contour,
    traditional_contour,
)
from .decompose import ComponentSet, DecomposeConfig, decompose
from .raster import binarize as binarize_image, dilate, disk
from .tracker import (
    RegionKind,
    TrackerConfig,
    TrackingError,
    TrackState,
    format_bfs_table,
    letter_names,
    track_all,
)

log = logging.getLogger(__name__)

OUT_ENV = "NEUROTRACE_OUT"

# exit status per failing stage
EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_DECOMPOSE = 5
EXIT_TRACK = 6
EXIT_CONTOUR = 7
EXIT_OUTPUT = 8

STAGE_EXIT = {
    "config": EXIT_CONFIG,
    "input": EXIT_INPUT,
    "decompose": EXIT_DECOMPOSE,
    "track": EXIT_TRACK,
    "contour": EXIT_CONTOUR,
    "output": EXIT_OUTPUT,
}


class PipelineError(RuntimeError):
    """A failure tagged with the pipeline stage it happened in."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message

    @property
    def exit_code(self) -> int:
        return STAGE_EXIT[self.stage]


@dataclass(frozen=True)
class PipelineConfig:
    soma_erosion_radius: int = 3
    soma_dilation_radius: int = 1
    soma_min_area: int = 20
    skel_min_area: int = 10
    spur_len: int = 3
    bfs_stop: int = 5
    lookback: int = 5
    d_max: int = 48
    cos_eps: float = 0.20
    binarize: str = "otsu"  # "otsu" or "half" (threshold at mid-range)
    polarity: str = "auto"  # "bright", "dark" or "auto" (object = minority class)

    def __post_init__(self) -> None:
        for name in (
            "soma_erosion_radius",
            "soma_dilation_radius",
            "soma_min_area",
            "skel_min_area",
            "spur_len",
            "lookback",
            "d_max",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.bfs_stop < 1:
            raise ValueError("bfs_stop must be >= 1")
        if not 0 < self.cos_eps < 1:
            raise ValueError("cos_eps must lie in (0, 1)")
        if self.binarize not in ("otsu", "half"):
            raise ValueError(f"unknown binarize policy {self.binarize!r}")
        if self.polarity not in ("bright", "dark", "auto"):
            raise ValueError(f"unknown polarity {self.polarity!r}")

    def decompose_config(self) -> DecomposeConfig:
        return DecomposeConfig(
            soma_erosion_radius=self.soma_erosion_radius,
            soma_dilation_radius=self.soma_dilation_radius,
            soma_min_area=self.soma_min_area,
            skel_min_area=self.skel_min_area,
            spur_len=self.spur_len,
        )

    def tracker_config(self) -> TrackerConfig:
        return TrackerConfig(
            bfs_stop=self.bfs_stop,
            lookback=self.lookback,
            d_max=self.d_max,
            cos_eps=self.cos_eps,
        )

    @classmethod
    def from_mapping(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class Artifacts:
    overlay: bool = False
    traditional: bool = False
    bfs_trace: bool = False


@dataclass
class RegionRow:
    id: int
    kind: str
    x: float
    y: float
    pixels: int


@dataclass
class RunReport:
    image: str
    width: int
    height: int
    branches: int
    labels: int
    regions: list[RegionRow] = field(default_factory=list)
    continuations: list[tuple[int, int, int, int, int]] = field(default_factory=list)
    contour_length: int = 0
    closed: bool = False
    bridges: int = 0
    unreached: int = 0
    wall_time: float = 0.0

    def kind_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.regions:
            counts[r.kind] = counts.get(r.kind, 0) + 1
        return dict(sorted(counts.items()))

    def to_text(self) -> str:
        """Deterministic text form; wall time is left out on purpose."""
        lines = [
            f"image: {self.image}",
            f"width: {self.width}",
            f"height: {self.height}",
            f"branches: {self.branches}",
            f"labels: {self.labels}",
            f"regions: {len(self.regions)}",
        ]
        lines += [f"regions.{k}: {v}" for k, v in self.kind_counts().items()]
        lines += [
            f"contour_length: {self.contour_length}",
            f"closed: {str(self.closed).lower()}",
            f"bridges: {self.bridges}",
            f"unreached: {self.unreached}",
            "",
            "[regions]",
            "id,kind,x,y,pixels",
        ]
        lines += [f"{r.id},{r.kind},{r.x:.2f},{r.y:.2f},{r.pixels}" for r in self.regions]
        lines += ["", "[continuations]", "region,from_x,from_y,to_x,to_y"]
        lines += [",".join(str(v) for v in row) for row in self.continuations]
        return "\n".join(lines) + "\n"


# -- input -------------------------------------------------------------------


def load_image(path: str | Path, binarize: str = "otsu", polarity: str = "auto") -> np.ndarray:
    """Read a PGM/PPM/PNG file as a boolean object mask."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.uint8)
    return binarize_gray(gray, binarize, polarity)


def binarize_gray(gray: np.ndarray, binarize: str = "otsu", polarity: str = "auto") -> np.ndarray:
    """Object mask from 8-bit gray values; a flat image has no object."""
    lo, hi = int(gray.min()), int(gray.max())
    if lo == hi:
        return np.zeros(gray.shape, dtype=bool)
    t = None if binarize == "otsu" else (lo + hi) / 2
    bright = binarize_image(gray, t, dark_foreground=False)
    if polarity == "dark" or (polarity == "auto" and bright.sum() > bright.size / 2):
        return ~bright
    return bright


# -- output ------------------------------------------------------------------


def write_contour(contour: ParametricContour, path: str | Path) -> None:
    """CSV with header ``t,x,y,bridge``, one row per point, t from 1."""
    if not contour.closed:
        raise ValueError("contour is not closed")
    rows = ["t,x,y,bridge"]
    rows += [
        f"{t},{x},{y},{int(b)}"
        for t, ((x, y), b) in enumerate(zip(contour.points, contour.bridge), start=1)
    ]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


def label_palette(n: int = 64) -> np.ndarray:
    """``n`` distinct RGB colours: 16 hues at 4 saturation/value levels."""
    levels = [(1.0, 1.0), (0.55, 1.0), (1.0, 0.65), (0.6, 0.75)]
    out = []
    for k in range(n):
        hue = (k % 16) / 16 + (k // 16 % 2) / 32
        s, v = levels[(k // 16) % len(levels)]
        out.append([round(c * 255) for c in colorsys.hsv_to_rgb(hue, s, v)])
    return np.array(out, dtype=np.uint8)


KIND_COLOURS = {
    RegionKind.BIFURCATION1: (0, 200, 255),
    RegionKind.BIFURCATION2: (0, 120, 255),
    RegionKind.BIFURCATION3: (120, 0, 255),
    RegionKind.BIFURCATION4: (200, 0, 200),
    RegionKind.CROSSING: (255, 40, 40),
    RegionKind.SUPERPOSITION: (255, 160, 0),
    RegionKind.UNCLASSIFIED: (255, 255, 255),
}
GRAY = 70
TRACE = (255, 255, 255)
BRIDGE = (255, 255, 0)


def _paint(rgb: np.ndarray, pts, colour) -> None:
    h, w = rgb.shape[:2]
    for x, y in pts:
        if 0 <= x < w and 0 <= y < h:
            rgb[y, x] = colour


def overlay_array(
    image: np.ndarray,
    components: ComponentSet,
    state: TrackState,
    contour: ParametricContour | None,
) -> np.ndarray:
    """RGB rendering: object in gray, labels coloured, regions by kind, contour."""
    mask = np.asarray(image, dtype=bool)
    rgb = np.zeros(mask.shape + (3,), dtype=np.uint8)
    rgb[mask] = GRAY
    palette = label_palette()
    labels = state.labels
    on = labels > 0
    rgb[on] = palette[(labels[on] - 1) % len(palette)]
    for cid, region in sorted(state.regions.items()):
        kind = region.kind or RegionKind.UNCLASSIFIED
        cl = np.zeros(mask.shape, dtype=bool)
        for x, y in region.cluster.pixels:
            cl[y, x] = True
        rgb[dilate(cl, disk(1))] = KIND_COLOURS[kind]
    if contour is not None:
        _paint(rgb, [p for p, b in zip(contour.points, contour.bridge) if not b], TRACE)
        _paint(rgb, [p for p, b in zip(contour.points, contour.bridge) if b], BRIDGE)
    return rgb


def render_overlay(
    image: np.ndarray,
    components: ComponentSet,
    state: TrackState,
    contour: ParametricContour,
    path: str | Path,
    traditional: ParametricContour | None = None,
    traditional_path: str | Path | None = None,
) -> None:
    """Write the overlay PNG and, if given, the traditional-follower overlay."""
    Image.fromarray(overlay_array(image, components, state, contour)).save(path)
    if traditional is not None and traditional_path is not None:
        rgb = overlay_array(image, components, state, None)
        _paint(rgb, traditional.points, TRACE)
        Image.fromarray(rgb).save(traditional_path)


def write_bfs_traces(state: TrackState, directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for k, (cid, _entry, states) in enumerate(state.bfs_traces):
        path = directory / f"{k:03d}_region{cid}.csv"
        path.write_text(format_bfs_table(states, letter_names(states)))
        written.append(path)
    return written


# -- pipeline ----------------------------------------------------------------


@dataclass
class PipelineResult:
    image: np.ndarray
    components: ComponentSet
    state: TrackState
    contour: ParametricContour
    report: RunReport


def process_mask(mask: np.ndarray, config: PipelineConfig, name: str = "image") -> PipelineResult:
    """Run the three stages on an in-memory mask."""
    t0 = time.perf_counter()
    try:
        components = decompose(mask, config.decompose_config())
    except ValueError as exc:
        raise PipelineError("decompose", str(exc)) from exc
    try:
        state = track_all(components, config.tracker_config())
    except TrackingError as exc:
        raise PipelineError("track", str(exc)) from exc
    try:
        contour = extract_contour(state)
    except ContourError as exc:
        raise PipelineError("contour", str(exc)) from exc
    report = RunReport(
        image=name,
        width=mask.shape[1],
        height=mask.shape[0],
        branches=len(components.terminations),
        labels=len(np.unique(state.labels[state.labels > 0])),
        regions=[
            RegionRow(
                r.id,
                (r.kind or RegionKind.UNCLASSIFIED).value,
                r.cluster.centroid[0],
                r.cluster.centroid[1],
                len(r.cluster.pixels),
            )
            for _, r in sorted(state.regions.items())
        ],
        continuations=sorted(
            (region, a[0], a[1], b[0], b[1]) for a, b, region in state.continuations.pairs()
        ),
        contour_length=len(contour),
        closed=contour.closed,
        bridges=contour.bridge_count,
        unreached=len(state.unreached()),
        wall_time=time.perf_counter() - t0,
    )
    return PipelineResult(mask, components, state, contour, report)


def run_pipeline(
    input_path: str | Path,
    config: PipelineConfig,
    out_dir: str | Path,
    artifacts: Artifacts = Artifacts(),
) -> RunReport:
    """Process one image file and write its artifacts under ``out_dir/<stem>``."""
    input_path = Path(input_path)
    try:
        mask = load_image(input_path, config.binarize, config.polarity)
    except (OSError, ValueError) as exc:
        raise PipelineError("input", f"cannot read {input_path}: {exc}") from exc
    result = process_mask(mask, config, input_path.name)
    target = Path(out_dir) / input_path.stem
    try:
        target.mkdir(parents=True, exist_ok=True)
        (target / "report.txt").write_text(result.report.to_text())
        (target / "timing.txt").write_text(f"wall_time: {result.report.wall_time:.6f}\n")
        write_contour(result.contour, target / "contour.csv")
        trad = None
        if artifacts.traditional:
            trad = traditional_contour(
                mask, result.components.soma_zone, result.components.skeleton
            )
            write_contour(trad, target / "traditional.csv")
        if artifacts.overlay or artifacts.traditional:
            render_overlay(
                mask,
                result.components,
                result.state,
                result.contour,
                target / "overlay.png",
                trad,
                target / "traditional.png" if trad is not None else None,
            )
        if artifacts.bfs_trace:
            write_bfs_traces(result.state, target / "bfs")
    except ContourError as exc:
        raise PipelineError("contour", str(exc)) from exc
    except OSError as exc:
        raise PipelineError("output", f"cannot write to {target}: {exc}") from exc
    return result.report


# -- command line --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="trace",
        description="Label neuron branches, classify overlaps and extract the contour.",
    )
    p.add_argument("inputs", nargs="+", metavar="input", help="PGM, PPM or PNG image")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV})")
    p.add_argument("--config", help="JSON file with pipeline settings")
    p.add_argument("--soma-erosion-radius", type=int, dest="soma_erosion_radius")
    p.add_argument("--d-max", type=int, dest="d_max")
    p.add_argument("--bfs-stop", type=int, dest="bfs_stop", metavar="C")
    p.add_argument("--cos-eps", type=float, dest="cos_eps", metavar="X")
    p.add_argument("--spur-len", type=int, dest="spur_len")
    p.add_argument("--emit-overlay", action="store_true")
    p.add_argument("--emit-traditional", action="store_true")
    p.add_argument("--bfs-trace", action="store_true")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: one per input, up to CPU count)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


FLAG_KEYS = ("soma_erosion_radius", "d_max", "bfs_stop", "cos_eps", "spur_len")


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the config file, then command-line flags."""
    data: dict = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("config file must hold a JSON object")
    cfg = PipelineConfig.from_mapping(data)
    flags = {k: getattr(args, k) for k in FLAG_KEYS if getattr(args, k) is not None}
    return replace(cfg, **flags)


def _job(path: str, config: PipelineConfig, out: str, artifacts: Artifacts) -> tuple[str, RunReport | None, str | None, int]:
    try:
        return path, run_pipeline(path, config, out, artifacts), None, EXIT_OK
    except PipelineError as exc:
        return path, None, str(exc), exc.exit_code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        config = resolve_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        print(f"error: config: no output directory (use --out or ${OUT_ENV})", file=sys.stderr)
        return EXIT_CONFIG
    artifacts = Artifacts(args.emit_overlay, args.emit_traditional, args.bfs_trace)
    jobs = [(p, config, out, artifacts) for p in args.inputs]
    workers = args.jobs or min(len(jobs), os.cpu_count() or 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, *zip(*jobs)))
    else:
        results = [_job(*j) for j in jobs]
    status = EXIT_OK
    for path, report, error, code in results:
        if error is not None:
            print(f"error: {path}: {error}", file=sys.stderr)
            status = status or code
        else:
            print(
                f"{path}: regions={len(report.regions)} contour={report.contour_length} "
                f"closed={str(report.closed).lower()} bridges={report.bridges} "
                f"unreached={report.unreached} time={report.wall_time:.3f}s"
            )
    return status


if __name__ == "__main__":
    sys.exit(main())
