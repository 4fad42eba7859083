from __future__ import annotations

import math
from collections import Counter

import numpy as np
import pytest

from neurotrace.decompose import decompose
from neurotrace.synth import (
    CROSSING_FROM,
    SUPERPOSITION_BELOW,
    Branch,
    ShapeSpec,
    Soma,
    bfs_fixture_a,
    blur_and_rebinarize,
    drawing_to_mask,
    expected_kind,
    fill_specks,
    fixture_image,
    format_spec,
    generate,
    load_spec,
    parse_spec,
    reference_cell,
    reference_suite,
    skeleton_signature,
    stroke,
    topology,
    two_branch_overlap,
)
from neurotrace.tracker import RegionKind, track_all


def test_single_branch_truth():
    spec = ShapeSpec((100, 60), Soma(20, 30, 8), (Branch(((20, 30), (90, 30)), 3),))
    img, truth = generate(spec)
    assert truth.branch_count == 1
    assert truth.regions == ()
    assert truth.crossing_count == 0
    assert img[30, 85] and img[30, 20]


@pytest.mark.parametrize("theta,kind", [(90, "Crossing"), (15, "Superposition")])
def test_overlap_truth_and_classifier_agree(theta, kind):
    spec = two_branch_overlap(theta)
    img, truth = generate(spec)
    assert truth.crossing_count == 1
    crossing = [r for r in truth.regions if r.theta is not None]
    assert [r.kind for r in crossing] == [kind]
    assert crossing[0].theta == pytest.approx(theta)
    state = track_all(decompose(img))
    kinds = {r.kind.value for r in state.regions.values()}
    assert kinds == {kind}


@pytest.mark.parametrize(
    "theta,kind",
    [
        (90.0, "Crossing"),
        (CROSSING_FROM, "Crossing"),
        (CROSSING_FROM - 1, "Crossing|Superposition"),
        (SUPERPOSITION_BELOW, "Crossing|Superposition"),
        (SUPERPOSITION_BELOW - 0.5, "Superposition"),
        (10.0, "Superposition"),
    ],
)
def test_expected_kind_thresholds(theta, kind):
    assert expected_kind(theta) == kind


@pytest.mark.parametrize("theta", [10, 30, 45, 60, 90])
def test_crossing_angle_recovered(theta):
    (c,) = two_branch_overlap(theta).crossings
    assert 0 < c.theta <= 90
    assert c.theta == pytest.approx(theta, abs=1e-6)


def test_close_junctions_reported_merged():
    trunk = Branch(((10, 50), (190, 50)), 3)
    a = Branch(((100, 50), (100, 10)), 3)
    b = Branch(((105, 50), (105, 90)), 3)
    spec = ShapeSpec((200, 100), None, (trunk, a, b))
    _, truth = generate(spec, merge_distance=12)
    assert [r.kind for r in truth.regions] == ["merged"]
    _, apart = generate(spec, merge_distance=3)
    assert len(apart.regions) == 2


def test_generate_is_deterministic():
    spec = reference_cell(1)
    a, ta = generate(spec)
    b, tb = generate(spec)
    np.testing.assert_array_equal(a, b)
    assert ta == tb


def test_spec_round_trip(tmp_path):
    spec = reference_cell(2)
    text = format_spec(spec)
    again = parse_spec(text)
    assert again.size == spec.size and again.rng_seed == spec.rng_seed
    assert again.soma == spec.soma
    for b0, b1 in zip(spec.branches, again.branches):
        assert b0.width == b1.width
        assert np.allclose(b0.points, b1.points, atol=1e-4)
    path = tmp_path / "cell.spec"
    path.write_text("# a cell\n" + text)
    assert load_spec(path) == again


@pytest.mark.parametrize(
    "text",
    ["soma 1 2 3\n", "size 10 10\nblob 1\n", "size 10 10\nbranch 3 1,1\n", "size 10\n"],
)
def test_spec_errors(text):
    with pytest.raises(ValueError):
        parse_spec(text)


def test_stroke_width():
    m = stroke([(5, 10), (30, 10)], 3, (20, 40))
    assert m[:, 15].sum() == 3
    thin = stroke([(5, 10), (30, 17)], 1, (20, 40))
    from neurotrace.raster import label_components

    assert label_components(thin)[1] == 1


def test_fill_specks():
    m = np.ones((8, 8), bool)
    m[3, 3] = False
    m[5:7, 5:7] = False
    assert fill_specks(m, 1)[3, 3]
    assert not fill_specks(m, 1)[5, 5]
    assert fill_specks(m, 4).all()


def test_blur_sigma_zero_is_identity():
    img, _ = generate(reference_cell(0))
    np.testing.assert_array_equal(blur_and_rebinarize(img, 0), img)
    with pytest.raises(ValueError):
        blur_and_rebinarize(img, -1)


def test_small_blur_keeps_topology():
    img = stroke([(5, 20), (60, 28)], 3, (40, 70)) | stroke([(30, 5), (36, 35)], 3, (40, 70))
    out = blur_and_rebinarize(img, 1.0)
    assert not np.array_equal(out, img)
    assert topology(out) == topology(img)


def test_large_blur_merges_close_strokes():
    shape = (40, 80)
    img = stroke([(5, 18), (75, 18)], 3, shape) | stroke([(5, 23), (75, 23)], 3, shape)
    assert topology(img) == (2, 0)
    assert topology(blur_and_rebinarize(img, 2.5)) != topology(img)


def test_reference_suite_truth():
    specs = reference_suite()
    assert len(specs) == 3
    total = Counter()
    for spec in specs:
        _, truth = generate(spec)
        assert len(truth.regions) == 12
        total.update(truth.kinds())
    assert sum(total.values()) == 36
    assert total["Crossing"] == 6 and total["Superposition"] == 6


def test_reference_cell_scale_stretches_lengths():
    small, big = reference_cell(0), reference_cell(0, scale=2.0)
    assert big.size[0] == pytest.approx(2 * small.size[0], abs=2)
    assert [round(c.theta) for c in big.crossings] == [round(c.theta) for c in small.crossings]


def test_fixture_image_keeps_drawing_near_junction():
    img, names = fixture_image(bfs_fixture_a())
    comp = decompose(img)
    mask, raw = drawing_to_mask(bfs_fixture_a())
    assert set(names) == set(raw)
    for k, (x, y) in names.items():
        assert comp.skeleton[y, x], k


def test_skeleton_signature():
    m = np.zeros((15, 15), bool)
    m[7, 1:14] = True
    m[1:14, 7] = True
    assert skeleton_signature(m) == (1, 4, 5)


def test_branch_validation():
    with pytest.raises(ValueError):
        Branch(((0, 0),), 3)
    with pytest.raises(ValueError):
        Branch(((0, 0), (1, 1)), 0)


def test_truth_accepts_either_kind_in_band():
    (c,) = two_branch_overlap(45).crossings
    _, truth = generate(two_branch_overlap(45))
    region = next(r for r in truth.regions if r.theta is not None)
    assert truth.accepts("Crossing", region) and truth.accepts("Superposition", region)
    assert not truth.accepts(RegionKind.BIFURCATION1.value, region)
    assert math.isclose(c.theta, 45)
