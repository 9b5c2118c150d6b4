import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from clk import endpoints, kernels, minpath
from clk.endpoints import ConfidenceField, EndpointError, EndpointSet
from clk.volume import Volume3D

DELTA = 3.0


def root_of(mask, truth):
    return minpath.nearest_foreground(mask, truth.centerline.root)


def test_gaussian_constants():
    assert endpoints.gaussian_peak(3.0) == pytest.approx(0.23033, abs=5e-6)
    assert endpoints.gaussian_peak(3.0) * math.exp(-1) == pytest.approx(0.08473, abs=5e-6)


def corridor(n=40, spacing=0.5):
    fg = np.zeros((n, 3, 3), bool)
    fg[:, 1, 1] = True
    return Volume3D.mask(fg, (spacing,) * 3)


def test_encode_values_along_corridor():
    mask = corridor()
    eps = EndpointSet((0, 0.5, 0.5), [((0.0, 0.5, 0.5), 1.0)])
    f = endpoints.encode_confidence(mask, eps, DELTA)
    line = f.map.data[:, 1, 1]
    assert line[0] == pytest.approx(0.23033, abs=5e-6)
    # D = 3 mm is six 0.5 mm steps
    assert line[6] == pytest.approx(0.08473, abs=5e-6)
    assert line[31] < 1e-10
    assert f.map.data[~mask.foreground()].max() == 0.0
    assert line.max() <= f.peak_value + 1e-9


def test_encode_empty_warns(caplog):
    mask = corridor()
    f = endpoints.encode_confidence(mask, EndpointSet(None, []), DELTA)
    assert not f.map.data.any()
    assert "no endpoints" in caplog.text


def test_encode_rejects_outside_point():
    with pytest.raises(EndpointError):
        endpoints.encode_confidence(corridor(), EndpointSet(None, [((5.0, 9.0, 9.0), 1.0)]), DELTA)
    with pytest.raises(ValueError):
        endpoints.encode_confidence(corridor(), EndpointSet(None, [((0.0, 0.5, 0.5), 1.0)]), 0.0)


def test_decode_trivial():
    mask = corridor()
    out = endpoints.decode_confidence(ConfidenceField(mask.like(np.zeros(mask.dims)), DELTA), mask)
    assert len(out) == 0
    # two endpoints 10 delta apart on a long corridor
    long = corridor(n=130, spacing=0.5)
    eps = EndpointSet(None, [((0.0, 0.5, 0.5), 1.0), ((60.0, 0.5, 0.5), 1.0)])
    out = endpoints.decode_confidence(endpoints.encode_confidence(long, eps, DELTA), long)
    assert len(out) == 2
    assert np.allclose(out.points(), eps.points())
    assert all(c == pytest.approx(1.0) for _, c in out.endpoints)


@pytest.mark.parametrize("method", endpoints.DECODE_METHODS)
def test_ytree_round_trip(suite, method):
    mask, truth = suite["ytree"]
    f = endpoints.encode_confidence(mask, truth.endpoints, DELTA)
    out = endpoints.decode_confidence(f, mask, method)
    assert len(out) == len(truth.endpoints)
    d = np.linalg.norm(out.points()[:, None] - truth.endpoints.points()[None], axis=-1).min(axis=1)
    tol = max(mask.spacing) if method == "peak" else 2.5 * DELTA
    assert d.max() <= tol


def test_decode_bad_method(suite):
    mask, truth = suite["ytree"]
    f = endpoints.encode_confidence(mask, truth.endpoints, DELTA)
    with pytest.raises(ValueError):
        endpoints.decode_confidence(f, mask, "median")


def test_superlevel_set_within_threshold_radius(suite):
    mask, truth = suite["straight"]
    tip = truth.endpoints.points()[0]
    f = endpoints.encode_confidence(mask, EndpointSet(None, [(tip, 1.0)]), DELTA)
    above = (f.map.data >= 0.5 * f.peak_value) & mask.foreground()
    d = endpoints.geodesic_distance(mask, [minpath.nearest_foreground(mask, tip)])
    assert d[above].max() <= DELTA * math.sqrt(math.log(2)) + max(mask.spacing)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_geodesic_not_below_euclidean(seed):
    r = np.random.default_rng(seed)
    fg = r.random((6, 6, 6)) < 0.7
    idx = np.argwhere(fg)
    assume(len(idx) > 1)
    spacing = tuple(float(s) for s in r.uniform(0.3, 1.2, 3))
    mask = Volume3D.mask(fg, spacing)
    src = tuple(int(c) for c in idx[r.integers(len(idx))])
    d = endpoints.geodesic_distance(mask, [src])
    e = np.linalg.norm(mask.centers(idx) - mask.centers([src])[0], axis=1)
    g = d[tuple(idx.T)]
    ok = np.isfinite(g)
    assert (g[ok] >= e[ok] - 1e-12).all()


def test_bfs_straight_tube(suite):
    mask, truth = suite["straight"]
    out = endpoints.bfs_arrival_endpoints(mask, root_of(mask, truth))
    assert len(out) == 1
    assert np.linalg.norm(out.points()[0] - truth.endpoints.points()[0]) <= max(mask.spacing) + 1e-9


def test_bfs_ytree(suite):
    mask, truth = suite["ytree"]
    out = endpoints.bfs_arrival_endpoints(mask, root_of(mask, truth))
    assert len(out) == 2
    d = np.linalg.norm(out.points()[:, None] - truth.endpoints.points()[None], axis=-1).min(axis=1)
    assert d.max() <= 2 * max(mask.spacing)


def test_bfs_tree7(suite):
    mask, truth = suite["tree7"]
    out = endpoints.bfs_arrival_endpoints(mask, root_of(mask, truth))
    assert len(out) == 4
    d = np.linalg.norm(out.points()[:, None] - truth.endpoints.points()[None], axis=-1)
    assert sorted(d.argmin(axis=1)) == [0, 1, 2, 3]
    assert d.min(axis=1).max() <= 2 * max(mask.spacing)


def test_bfs_sorted_by_arrival(suite):
    mask, truth = suite["tree7"]
    root = root_of(mask, truth)
    out = endpoints.bfs_arrival_endpoints(mask, root)
    arrival = endpoints.geodesic_distance(mask, [root])
    t = [arrival[mask.mm_to_index(p)] for p in out.points()]
    assert t == sorted(t, reverse=True)


def test_bfs_errors_and_warnings(caplog):
    fg = np.zeros((12, 3, 3), bool)
    fg[:8, 1, 1] = True
    fg[10:, 1, 1] = True
    mask = Volume3D.mask(fg, (0.5, 0.5, 0.5))
    with pytest.raises(EndpointError):
        endpoints.bfs_arrival_endpoints(mask, (0, 0, 0))
    out = endpoints.bfs_arrival_endpoints(mask, (0, 1, 1))
    assert len(out) == 1
    assert "unreachable" in caplog.text


def path_walk(r, n):
    """Monotone 26-connected walk whose adjacency graph is a simple path.

    Consecutive moves share an axis, so voxels two or more steps apart are
    never 26-neighbours.
    """
    moves = [m for m in np.ndindex(2, 2, 2) if any(m)]
    step = [moves[r.integers(len(moves))]]
    for _ in range(n - 2):
        ok = [m for m in moves if any(a and b for a, b in zip(m, step[-1]))]
        step.append(ok[r.integers(len(ok))])
    return np.vstack([np.zeros((1, 3), int), np.cumsum(step, axis=0)])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(8, 30))
def test_bfs_path_graph_has_one_endpoint(seed, n):
    p = path_walk(np.random.default_rng(seed), n)
    cheb = np.abs(p[:, None] - p[None]).max(axis=-1)
    i = np.arange(n)
    assert ((cheb == 1) == (np.abs(i[:, None] - i[None]) == 1)).all()
    fg = np.zeros(tuple(p.max(axis=0) + 3), bool)
    fg[tuple((p + 1).T)] = True
    mask = Volume3D.mask(fg, (0.5, 0.5, 0.5))
    out = endpoints.bfs_arrival_endpoints(mask, tuple(int(c) for c in p[0] + 1))
    assert len(out) == 1
    assert np.allclose(out.points()[0], mask.centers([p[-1] + 1])[0])


@pytest.mark.skipif("compiled" not in kernels.BACKENDS, reason="compiled kernels not built")
def test_persistence_backends_identical(suite):
    mask, truth = suite["tree7"]
    arrival = endpoints.geodesic_distance(mask, [root_of(mask, truth)]).ravel(order="F")
    reach = np.flatnonzero(np.isfinite(arrival))
    order = reach[np.lexsort((reach, -arrival[reach]))]
    vals = np.where(np.isfinite(arrival), arrival, -1.0)
    offs = kernels.neighbour_offsets(26)
    a = kernels.peak_persistence(vals, order, mask.dims, offs, backend="python")
    b = kernels.peak_persistence(vals, order, mask.dims, offs, backend="compiled")
    assert np.array_equal(a[0], b[0])
    assert np.array_equal(a[1], b[1])


def test_endpoint_set_json_round_trip():
    eps = EndpointSet((1, 2, 3), [((0.5, 0.25, 1.0), 0.75)], "bfs")
    back = EndpointSet.from_json(eps.to_json())
    assert back.to_json() == eps.to_json()
    with pytest.raises(ValueError):
        EndpointSet(None, [], "guess")
