from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neurotrace.decompose import CriticalCluster, components_from_skeleton, decompose
from neurotrace.raster import dilate, square
from neurotrace.synth import attach_soma, bfs_fixture_a, bfs_fixture_b, drawing_to_mask, generate
from neurotrace.tracker import (
    AlreadyLabeled,
    DirectionVector,
    Nearby,
    OutwardArm,
    ReachedRegion,
    RegionKind,
    RunawayBFSError,
    Termination,
    TrackerConfig,
    TrackState,
    UnreachedPixelsError,
    bfs_across_region,
    bfs_order,
    choose_continuation,
    classify_region,
    format_bfs_table,
    inward_vector,
    letter_names,
    outward_arms,
    track_all,
    track_segment,
)

# expected queue states for the two lettered drawings (C = 5)
SINGLE_BIFURCATION_TRACE = """\
state,current,queue,B,sigma
00,a,b,0,0
01,b,c d,0,0
02,c,d e,0,0
03,d,e f,1,1
04,e,f g,1,2
05,f,g h,1,3
06,g,h i,1,4
07,h,i j,1,5
"""

CLOSE_BIFURCATIONS_TRACE = """\
state,current,queue,B,sigma
00,a,b,0,0
01,b,c d,0,0
02,c,d e,0,0
03,d,e f,1,1
04,e,f g,1,2
05,f,g h,1,3
06,g,h i,1,4
07,h,i j,0,0
08,i,j k,0,0
09,j,k l m,0,0
10,k,l m n,0,0
11,l,m n o p,0,0
12,m,n o p,0,0
13,n,o p q,0,0
14,o,p q r,0,0
15,p,q r s,1,1
16,q,r s t,1,2
17,r,s t u,1,3
18,s,t u v,1,4
19,t,u v x,1,5
"""


def vec(dx: float, dy: float, scale: int = 1000) -> DirectionVector:
    return DirectionVector((0, 0), (round(dx * scale), round(dy * scale)))


def drawing_bfs(rows: list[str], stop: int = 5):
    """BFS from the lettered entry pixel 'a', approached from the tail."""
    skel, names = drawing_to_mask(rows)
    comp = components_from_skeleton(skel)
    state = TrackState.start(comp)
    a = names["a"]
    for y, x in zip(*np.nonzero(skel)):
        if x > a[0] and y == a[1]:
            state.labels[y, x] = 1
    state.labels[a[1], a[0]] = 1
    res = bfs_across_region(state, a, stop, previous=(a[0] + 1, a[1]))
    return state, res, names


# -- continuation --------------------------------------------------------------------


@pytest.mark.parametrize(
    "inward,outward,expected",
    [
        ((1, 0), [(0, 1), (1, 0)], 1),
        ((0.6, 0.8), [(0.6, 0.8), (0.8, -0.6)], 0),
        ((1, 0), [(0.707, 0.707), (0.707, -0.707)], 0),
    ],
)
def test_choose_continuation(inward, outward, expected):
    assert choose_continuation(vec(*inward), [vec(*o) for o in outward]) == expected


def test_choose_continuation_reverse_ties():
    out = [vec(0.707, 0.707), vec(0.707, -0.707)]
    assert choose_continuation(vec(1, 0), out, reverse_ties=True) == 1


def test_choose_continuation_needs_candidates():
    with pytest.raises(ValueError):
        choose_continuation(vec(1, 0), [])


angles = st.floats(0, 2 * math.pi, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(angles, st.lists(angles, min_size=1, max_size=4), st.integers(1, 9))
def test_choose_continuation_scale_invariant(a0, outs, k):
    inward = vec(math.cos(a0), math.sin(a0), 100)
    base = [vec(math.cos(a), math.sin(a), 100) for a in outs]
    scaled = [DirectionVector((0, 0), (v.tip[0] * k, v.tip[1] * k)) for v in base]
    assert choose_continuation(inward, base) == choose_continuation(inward, scaled)


def test_direction_vector_unit_length():
    v = DirectionVector((2, 3), (7, -9))
    assert math.hypot(*v.unit) == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        DirectionVector((1, 1), (1, 1))


# -- classification --------------------------------------------------------------------


@pytest.mark.parametrize(
    "v0,e1,kind",
    [
        ((1, 0), [(0.92, 0.39), (0.92, -0.39)], RegionKind.BIFURCATION1),
        ((1, 0), [(1, 0), (0, 1), (0, -1)], RegionKind.CROSSING),
        ((1, 0), [(0.7, 0.7), (-0.7, -0.7)], RegionKind.BIFURCATION2),
        ((1, 0), [(0.5, 0.5), (0.5, -0.5), (0.0, 1.0)], RegionKind.BIFURCATION4),
    ],
)
def test_classify_single_region(v0, e1, kind):
    got, partner, diag = classify_region(vec(*v0), [vec(*v) for v in e1])
    assert got is kind
    assert partner is None


def _nearby(arms, link_arm=1, distance=6):
    return Nearby(
        cluster=1,
        distance=distance,
        link_arm=link_arm,
        link=(),
        arms=tuple(OutwardArm(vec(*a), (0, 0), (0, 0), 1) for a in arms),
    )


def test_classify_superposition_pair():
    v0 = vec(1, 0)
    # s1: link arm forward, second branch leaving backwards; s2: both branches leave forwards
    e1 = [vec(0.97, -0.26), vec(-0.97, -0.26)]
    s2 = _nearby([(1, 0.05), (0.97, 0.26)], link_arm=0)
    kind, partner, _ = classify_region(v0, e1, [s2], d_max=48)
    assert kind is RegionKind.SUPERPOSITION
    assert partner == s2
    # beyond D_max the partner is ignored
    kind, partner, _ = classify_region(v0, e1, [_nearby([(1, 0.05), (0.97, 0.26)], 0, 60)], d_max=48)
    assert kind is RegionKind.BIFURCATION2 and partner is None


def test_classify_bifurcation3_pair():
    v0 = vec(1, 0)
    e1 = [vec(-0.2, -1), vec(0.8, 0.6)]
    s2 = _nearby([(1, 0.0), (0.0, -1)], link_arm=0)
    kind, partner, _ = classify_region(v0, e1, [s2], d_max=48)
    assert kind is RegionKind.BIFURCATION3


def test_unclassified_has_diagnostic():
    kind, _, diag = classify_region(vec(1, 0), [vec(0, 1)])
    assert kind is RegionKind.UNCLASSIFIED
    assert diag


@settings(max_examples=60, deadline=None)
@given(angles, st.lists(angles, min_size=2, max_size=3))
def test_classification_reflection_invariant(a0, outs):
    def make(mirror):
        s = -1 if mirror else 1
        v0 = vec(s * math.cos(a0), math.sin(a0), 100)
        e1 = [vec(s * math.cos(a), math.sin(a), 100) for a in outs]
        return classify_region(v0, e1)[0]

    assert make(False) is make(True)


# -- BFS ------------------------------------------------------------------------------


def test_bfs_order_forward_codes_first():
    assert bfs_order(1) == [3, 4, 5, 6, 7, 8, 2]
    assert bfs_order(5) == [7, 8, 1, 2, 3, 4, 6]


def test_single_bifurcation_queue_trace():
    state, res, names = drawing_bfs(bfs_fixture_a())
    letters = letter_names(res.states)
    assert format_bfs_table(res.states, letters) == SINGLE_BIFURCATION_TRACE
    assert all(letters[p] == k for k, p in names.items())
    assert sorted(letters[t] for t in res.tips) == ["i", "j"]


def test_close_bifurcations_queue_trace():
    state, res, names = drawing_bfs(bfs_fixture_b())
    letters = letter_names(res.states)
    assert format_bfs_table(res.states, letters) == CLOSE_BIFURCATIONS_TRACE
    assert sorted(letters[t] for t in res.tips) == ["u", "v", "x"]


def test_close_bifurcations_agglutinate():
    skel, soma = attach_soma(bfs_fixture_b())
    state = track_all(components_from_skeleton(skel, soma))
    assert state.regions[0].kind is RegionKind.BIFURCATION4
    assert format_bfs_table(state.bfs_traces[0][2], letter_names(state.bfs_traces[0][2])) == CLOSE_BIFURCATIONS_TRACE


def test_outward_origins_next_to_cluster():
    state, res, names = drawing_bfs(bfs_fixture_a())
    arms = outward_arms(state, res)
    assert len(arms) == 2
    for arm in arms:
        assert not state.is_critical(arm.start)
        assert state.is_critical(arm.via)
        assert max(abs(arm.start[0] - arm.via[0]), abs(arm.start[1] - arm.via[1])) == 1


def test_bfs_dead_end_stub():
    rows = [
        "..........",
        "....c.....",
        "....c.....",
        "..ffdba###",
        "....e.....",
        "....e.....",
        "..........",
    ]
    # every arm ends within a few pixels: the queue runs dry before sigma reaches C
    state, res, _ = drawing_bfs(rows, stop=5)
    assert max(s.sigma for s in res.states) < 5
    assert res.states[-1].queue == ()
    assert sorted(res.tips) == sorted(p for p in state.components.terminations if p[0] < 5)


def test_bfs_runaway_budget():
    rows = bfs_fixture_b()
    skel, names = drawing_to_mask(rows)
    state = TrackState.start(components_from_skeleton(skel))
    with pytest.raises(RunawayBFSError):
        bfs_across_region(state, names["a"], 5, max_pixels=4)


def test_inward_vector_from_west():
    cl = CriticalCluster(0, frozenset({(10, 5)}))
    history = [(x, 5) for x in range(2, 10)]
    v = inward_vector(history, (9, 5), 5, cl)
    assert v.unit == pytest.approx((1.0, 0.0))


# -- segments and full tracking ---------------------------------------------------------


def _state_for(mask, soma=None):
    return TrackState.start(components_from_skeleton(mask, soma))


def test_track_segment_free_end():
    m = np.zeros((5, 14), bool)
    m[2, 2:12] = True
    state = _state_for(m)
    ev = track_segment(state, (2, 2), 1)
    assert isinstance(ev, Termination)
    assert len(ev.path) == 10
    assert int((state.labels == 1).sum()) == 10


def test_track_segment_into_junction_and_errors():
    m = np.zeros((15, 15), bool)
    m[7, 1:8] = True
    for k in range(1, 6):
        m[7 - k, 7 + k] = True
        m[7 + k, 7 + k] = True
    state = _state_for(m)
    ev = track_segment(state, (1, 7), 1)
    assert isinstance(ev, ReachedRegion)
    assert not state.is_critical(ev.entry)
    assert any(state.is_critical(q) for q in [(ev.entry[0] + dx, ev.entry[1] + dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)])
    assert isinstance(track_segment(state, (1, 7), 2), AlreadyLabeled)
    crit = next(iter(state.regions[0].cluster.pixels))
    with pytest.raises(ValueError):
        track_segment(state, crit, 3)


def test_single_branch_one_label():
    m = np.zeros((5, 20), bool)
    m[2, 2:18] = True
    state = track_all(components_from_skeleton(m))
    assert state.label_count == 1
    assert state.regions == {}


def test_y_shape_two_labels_one_bifurcation():
    skel, soma = attach_soma(bfs_fixture_a())
    state = track_all(components_from_skeleton(skel, soma))
    assert state.label_count == 2
    assert [r.kind for r in state.regions.values()] == [RegionKind.BIFURCATION1]
    assert state.unreached() == []


def test_labels_are_never_overwritten_and_increase(suite_runs):
    for run in suite_runs:
        st = run.state
        labels = st.labels[st.labels > 0]
        assert labels.max() == st.label_count
        assert st.unreached() == []
        assert all(r.kind is not None and r.kind is not RegionKind.UNCLASSIFIED for r in st.regions.values())


def test_crossing_stores_pairings(sweep_runs):
    st = sweep_runs[90].state
    (region,) = st.regions.values()
    assert region.kind is RegionKind.CROSSING
    pairs = st.continuations.pairs()
    assert len(pairs) == 2
    for a, b, rid in pairs:
        assert rid == region.id
        assert st.continuations.get(a) == b and st.continuations.get(b) == a
        assert not st.is_critical(a) and not st.is_critical(b)


def test_superposition_partners(sweep_runs):
    st = sweep_runs[15].state
    kinds = {r.id: r for r in st.regions.values()}
    assert {r.kind for r in kinds.values()} == {RegionKind.SUPERPOSITION}
    for r in kinds.values():
        assert kinds[r.partner].partner == r.id
    assert len(st.continuations) == 2


def test_unreached_pixels_error_lists_pixels():
    err = UnreachedPixelsError([(1, 2), (3, 4)])
    assert "unreached" in str(err)
    assert err.pixels == [(1, 2), (3, 4)]


def test_tracker_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(bfs_stop=0)
    with pytest.raises(ValueError):
        TrackerConfig(cos_eps=1.0)


def test_label_segregation(suite_runs):
    """Differently labelled pixels only touch next to a critical cluster or the soma."""
    run = suite_runs[0]
    st = run.state
    lab = st.labels
    guard = dilate(run.components.critical_pixels | run.components.soma_zone, square(2))
    h, w = lab.shape
    ys, xs = np.nonzero(lab)
    for y, x in zip(ys, xs):
        for dx, dy in ((1, 0), (1, 1), (0, 1), (-1, 1)):
            qx, qy = x + dx, y + dy
            if 0 <= qx < w and 0 <= qy < h and lab[qy, qx] and lab[qy, qx] != lab[y, x]:
                assert guard[y, x], (x, y)


def test_reference_cell_tracking_is_deterministic():
    from neurotrace.synth import reference_cell

    comp = decompose(generate(reference_cell(2))[0])
    a, b = track_all(comp), track_all(comp)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.continuations.pairs() == b.continuations.pairs()
