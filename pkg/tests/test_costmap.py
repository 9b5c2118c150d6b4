import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clk import costmap, kernels, phantom
from clk.costmap import CostMapError, SigmoidParams
from clk.volume import Volume3D
from oracles import brute_edt, random_edt_mask as random_mask


def test_edt_trivial():
    assert not costmap.edt_exact(Volume3D.mask(np.zeros((3, 3, 3)))).data.any()
    m = np.zeros((5, 5, 5))
    m[2, 2, 2] = 1
    e = costmap.edt_exact(Volume3D.mask(m, (0.4, 0.4, 0.4)))
    assert e.data[2, 2, 2] == pytest.approx(0.4)
    assert e.data.sum() == pytest.approx(0.4)


def test_edt_all_foreground_is_error():
    with pytest.raises(CostMapError):
        costmap.edt_exact(Volume3D.mask(np.ones((3, 3, 3))))


def test_edt_matches_brute_force_8cubed(rng):
    for _ in range(20):
        fg = rng.random((8, 8, 8)) < 0.7
        fg[0, 0, 0] = False
        m = Volume3D.mask(fg, (0.4, 0.4, 0.4))
        assert np.abs(costmap.edt_exact(m).data - brute_edt(m)).max() <= 1e-9


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_edt_brute_force_property(seed):
    m = random_mask(np.random.default_rng(seed))
    assert np.abs(costmap.edt_exact(m).data - brute_edt(m)).max() <= 1e-9


@pytest.mark.skipif("compiled" not in kernels.BACKENDS, reason="compiled kernels not built")
def test_edt_backends_bit_identical(rng):
    for _ in range(10):
        m = random_mask(rng)
        a = costmap.edt_exact(m, backend="python").data
        b = costmap.edt_exact(m, backend="compiled").data
        assert a.tobytes() == b.tobytes()


def test_straight_tube_axis_edt_is_radius(suite):
    mask, truth = suite["straight"]
    e = costmap.edt_exact(mask)
    ax = mask.mm_to_index(truth.centerline.segments[0].points[len(truth.centerline.segments[0].points) // 2])
    assert abs(e.data[ax] - 2.0) <= math.sqrt(3) * 0.4


def test_sigmoid_examples(rng):
    p = SigmoidParams((0.1, 0.2, 0.3), (0.5, 0.5 + 1e-9, 0.5 + 2e-9))
    edt = Volume3D(np.full((1, 1, 1), 0.5))
    assert costmap.baseline_sigmoid_map(edt, p).data[0, 0, 0] == pytest.approx(1.5, abs=1e-6)
    p = SigmoidParams((0.01, 0.01, 0.01), (1.0, 2.0, 3.0))
    assert costmap.baseline_sigmoid_map(Volume3D(np.zeros((1, 1, 1))), p).data[0, 0, 0] < 1e-30

    params = SigmoidParams()
    e = rng.uniform(0, 4, (5, 6, 7))
    got = costmap.baseline_sigmoid_map(Volume3D(e), params).data
    want = sum(1 / (1 + np.exp(-(e - b) / a)) for a, b in zip(params.alphas, params.betas))
    assert np.abs(got - want).max() <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=2, max_size=40))
def test_sigmoid_monotone(values):
    e = np.sort(np.array(values))
    out = costmap.baseline_sigmoid_map(Volume3D(e.reshape(-1, 1, 1))).data.ravel()
    assert (np.diff(out) >= 0).all()


def test_sigmoid_params_validation():
    with pytest.raises(ValueError):
        SigmoidParams((0.1, -0.2, 0.3), (1, 2, 3))
    with pytest.raises(ValueError):
        SigmoidParams((0.1, 0.2, 0.3), (1, 3, 2))
    assert SigmoidParams.parse("0.15,0.3,0.3,0.8,0.6,1.8") == SigmoidParams()
    with pytest.raises(ValueError):
        SigmoidParams.parse("1,2,3")


def test_baseline_cost_orientation(suite):
    mask, _ = suite["straight"]
    sig = costmap.baseline_sigmoid_map(costmap.edt_exact(mask))
    c = costmap.baseline_cost(mask, sig)
    fg = mask.foreground()
    assert np.allclose(c.data[fg], costmap.DEFAULT_POWER * np.log(3 - sig.data[fg] + 0.01))
    # cheaper at the centre than at the wall
    assert c.data[fg].min() < c.data[fg].max()
    with pytest.raises(ValueError):
        costmap.baseline_cost(mask, sig, power=0)


def test_reference_straight_tube(suite):
    mask, truth = suite["straight"]
    dm = costmap.reference_cl_distance(mask, truth.centerline, 0.01)
    fg = mask.foreground()
    pts = truth.centerline.segments[0].points
    on_axis = mask.mm_to_index(pts[len(pts) // 2])
    assert dm.cl_dist.data[on_axis] == 0.0
    assert dm.cl_log.data[on_axis] == pytest.approx(math.log(0.01))
    # boundary-adjacent voxel at 2.0 mm from the axis
    wall = (on_axis[0] + 5, on_axis[1], on_axis[2])
    assert fg[wall]
    assert abs(dm.cl_dist.data[wall] - 1.0) <= 0.4 / 2.0
    assert dm.cl_dist.data[fg].min() >= 0
    assert dm.cl_dist.data[fg].max() <= 1.0 + 1e-12
    assert np.allclose(dm.cl_log.data[fg], np.log(dm.cl_dist.data[fg] + 0.01))
    assert np.all(dm.cl_log.data[~fg] == math.log(1.01))


def slice_max(dm, mask):
    fg = mask.foreground()
    return np.array([dm.cl_dist.data[:, :, z][fg[:, :, z]].max() for z in range(mask.dims[2]) if fg[:, :, z].any()])


def test_reference_tapered_scale_invariant(suite):
    mask, truth = suite["tapered"]
    dm = costmap.reference_cl_distance(mask, truth.centerline)
    s = slice_max(dm, mask)
    assert s.min() >= 0.8 and s.max() <= 1.2


def test_reference_radius_doubling():
    means = []
    for r in (1.0, 2.0):
        mask, truth = phantom.rasterize(phantom.straight_tube(radius=r, length=10.0))
        means.append(slice_max(costmap.reference_cl_distance(mask, truth.centerline), mask).mean())
    assert abs(means[0] - means[1]) < 0.1


def test_reference_log_minimum_on_centerline(suite):
    mask, truth = suite["ytree"]
    dm = costmap.reference_cl_distance(mask, truth.centerline)
    fg = mask.foreground()
    vals = dm.cl_log.data
    argmin = np.unravel_index(np.argmin(np.where(fg, vals, np.inf)), mask.dims)
    samples = {mask.mm_to_index(p) for p in truth.centerline.all_points()}
    assert tuple(int(c) for c in argmin) in samples


def test_reference_errors(suite):
    mask, truth = suite["straight"]
    with pytest.raises(ValueError):
        costmap.reference_cl_distance(mask, truth.centerline, 0.0)
    from clk.minpath import Centerline, Segment

    outside = Centerline(np.zeros(3), [Segment(np.array([[100.0, 100.0, 100.0], [101.0, 100.0, 100.0]]))])
    with pytest.raises(CostMapError, match="outside"):
        costmap.reference_cl_distance(mask, outside)
    with pytest.raises(CostMapError):
        costmap.reference_cl_distance(mask, Centerline(np.zeros(3)))
