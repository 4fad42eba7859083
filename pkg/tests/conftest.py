from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pytest

from neurotrace.contour import ContourInput, ParametricContour, extract_contour, traditional_contour
from neurotrace.decompose import ComponentSet, decompose
from neurotrace.synth import GroundTruth, ShapeSpec, generate, reference_suite, two_branch_overlap
from neurotrace.tracker import TrackerConfig, TrackState, track_all

SWEEP_ANGLES = (90, 75, 60, 45, 30, 20, 15, 10)

# pass/fail lines recorded by the acceptance tests
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@dataclass
class Run:
    spec: ShapeSpec
    image: np.ndarray
    truth: GroundTruth
    components: ComponentSet
    state: TrackState
    contour: ParametricContour
    traditional: ParametricContour

    @property
    def inp(self) -> ContourInput:
        return ContourInput.from_state(self.state)


def run_spec(spec: ShapeSpec, cfg: TrackerConfig | None = None) -> Run:
    img, truth = generate(spec)
    comp = decompose(img)
    state = track_all(comp, cfg)
    inp = ContourInput.from_state(state)
    contour = extract_contour(inp)
    trad = traditional_contour(inp.union, inp.soma_zone, inp.skeleton)
    return Run(spec, img, truth, comp, state, contour, trad)


def match_truth(run: Run, radius: float = 25.0) -> tuple[list[str], list[str]]:
    """(mismatches, extras): truth regions without an agreeing cluster nearby,
    and clusters far from every truth region."""
    regions = list(run.state.regions.values())
    bad = []
    for tr in run.truth.regions:
        near = [r for r in regions if math.dist(r.cluster.centroid, tr.position) < radius]
        if not near or not all(run.truth.accepts(r.kind.value, tr) for r in near):
            bad.append(f"{tr.kind} at {tr.position}: {[r.kind.value for r in near]}")
    extra = [
        f"{r.kind.value} at {r.cluster.centroid}"
        for r in regions
        if all(math.dist(r.cluster.centroid, tr.position) >= radius for tr in run.truth.regions)
    ]
    return bad, extra


@pytest.fixture(scope="session")
def suite_runs() -> list[Run]:
    return [run_spec(s) for s in reference_suite()]


@pytest.fixture(scope="session")
def sweep_runs() -> dict[int, Run]:
    return {th: run_spec(two_branch_overlap(th)) for th in SWEEP_ANGLES}
