import json

import numpy as np
import pytest
from scipy.spatial import cKDTree

from clk import phantom
from clk.phantom import BranchSpec, GroundTruth, PhantomError, PhantomSpec


def test_straight_tube_slices_are_digital_disks(suite):
    mask, _ = suite["straight"]
    fg = mask.foreground()
    cx, cy, _ = mask.mm_to_index((0.0, 0.0, 0.0))
    x, y = np.meshgrid(np.arange(mask.dims[0]) - cx, np.arange(mask.dims[1]) - cy, indexing="ij")
    disk = x**2 + y**2 <= 25
    slices = [z for z in range(mask.dims[2]) if fg[:, :, z].any()]
    assert len(slices) == 36
    for z in slices:
        assert np.array_equal(fg[:, :, z], disk)


def test_leaf_counts(suite):
    assert len(suite["straight"][1].endpoints) == 1
    y = suite["ytree"][1]
    assert len(y.endpoints) == 2
    assert len(y.centerline.junctions()) == 1
    t7 = suite["tree7"][1]
    assert len(t7.centerline.segments) == 7
    assert len(t7.endpoints) == 4
    assert len(t7.centerline.junctions()) == 3


def test_suite_contents():
    suite = phantom.standard_suite(42)
    assert len(suite) >= 5
    names = [n for n, _ in suite]
    for need in ("straight", "tapered", "helix", "tree7", "near_touching"):
        assert need in names
    tapered = dict(suite)["tapered"].branches[0]
    assert tapered.r_start / tapered.r_end == pytest.approx(5.0)
    again = phantom.standard_suite(42)
    assert [s.to_json() for _, s in suite] == [s.to_json() for _, s in again]


def test_rasterize_deterministic():
    a = phantom.rasterize(phantom.binary_tree(seed=3))[0]
    b = phantom.rasterize(phantom.binary_tree(seed=3))[0]
    assert a.data.tobytes() == b.data.tobytes()


@pytest.mark.parametrize("case", ["straight", "tapered", "helix", "ytree", "tree7", "near_touching"])
def test_truth_inside_mask_and_dense(suite, case):
    mask, truth = suite[case]
    fg = mask.foreground()
    for seg in truth.centerline.segments:
        vox = np.floor((seg.points - mask.origin) / mask.spacing + 0.5).astype(int)
        assert fg[tuple(vox.T)].all()
        assert np.linalg.norm(np.diff(seg.points, axis=0), axis=1).max() <= 0.25 * min(mask.spacing) + 1e-9
    assert len(truth.endpoints) == len(truth.centerline.leaves())


def test_foreground_matches_radius_away_from_ends(suite):
    # away from the flat end faces, foreground is exactly the set within the local radius
    mask, truth = suite["helix"]
    pts = truth.centerline.segments[0].points
    r = truth.radii[0]
    idx = np.argwhere(np.ones(mask.dims, bool))
    c = mask.centers(idx)
    dist, near = cKDTree(pts).query(c)
    interior = (near > 20) & (near < len(pts) - 21)
    fg = mask.foreground()[tuple(idx.T)]
    # sample spacing 0.1 mm bounds the distance error from discrete samples
    sure_in = interior & (dist <= r[near] - 0.05)
    sure_out = interior & (dist > r[near] + 0.05)
    assert fg[sure_in].all()
    assert not fg[sure_out].any()
    assert sure_in.sum() > 100


def test_near_touching_branches_do_not_merge(suite):
    mask, truth = suite["near_touching"]
    fg = mask.foreground()
    z = mask.mm_to_index((0, 0, 18.0))[2]
    row = fg[:, mask.mm_to_index((0, 0, 0))[1], z]
    runs = np.flatnonzero(np.diff(row.astype(int)))
    assert len(runs) == 4
    assert runs[2] - runs[1] == 1


def test_spec_validation():
    with pytest.raises(PhantomError):
        BranchSpec([(0, 0, 0)], 1.0, 1.0)
    with pytest.raises(PhantomError):
        BranchSpec([(0, 0, 0), (0, 0, 5)], 1.0, 2.0)
    b = BranchSpec([(0, 0, 0), (0, 0, 10)], 1.0, 1.0)
    with pytest.raises(PhantomError, match="branch 0 exits"):
        phantom.rasterize(PhantomSpec([b], (10, 10, 30)))
    with pytest.raises(PhantomError, match="not above"):
        phantom.rasterize(phantom.make_spec([BranchSpec([(0, 0, 0), (0, 0, 1.5)], 1.0, 1.0)]))
    child = BranchSpec([(3, 3, 3), (5, 5, 8)], 0.8, 0.8, parent=0)
    with pytest.raises(PhantomError, match="branch 1"):
        phantom.rasterize(phantom.make_spec([b, child]))


def test_json_round_trips(suite):
    spec = phantom.binary_tree(seed=5)
    assert PhantomSpec.from_json(json.loads(json.dumps(spec.to_json()))).to_json() == spec.to_json()
    _, truth = suite["ytree"]
    back = GroundTruth.from_json(json.loads(json.dumps(truth.to_json())))
    assert back.to_json() == truth.to_json()
    assert back.radius_at(0, 0.0) == pytest.approx(1.6)


def test_radius_profile_linear(suite):
    _, truth = suite["tapered"]
    s = truth.arclength[0]
    assert truth.radius_at(0, 0.0) == pytest.approx(3.0)
    assert truth.radius_at(0, s[-1]) == pytest.approx(0.6)
    assert truth.radius_at(0, s[-1] / 2) == pytest.approx(1.8)


def test_helix_length_matches_analytic(suite):
    _, truth = suite["helix"]
    assert truth.centerline.segments[0].length() == pytest.approx(phantom.helix_arclength(), rel=0.02)
