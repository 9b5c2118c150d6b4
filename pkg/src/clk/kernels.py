"""Kernel backend selection.

The compiled extension is used when it imports; set ``CLK_PURE_PYTHON=1``
to force the pure-Python fallback. Both backends are importable directly
(``BACKENDS``) so tests and the benchmark can compare them.
"""

import itertools
import logging
import os

import numpy as np

from clk import _pykernels

log = logging.getLogger(__name__)

BACKENDS = {"python": _pykernels}
try:
    from clk import _ckernels
except ImportError:  # not built
    _ckernels = None
else:
    BACKENDS["compiled"] = _ckernels

if _ckernels is not None and not os.environ.get("CLK_PURE_PYTHON"):
    BACKEND = "compiled"
else:
    BACKEND = "python"
    if _ckernels is None:
        log.debug("compiled kernels unavailable, using pure-Python fallback")

_impl = BACKENDS[BACKEND]


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active backend)."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {sorted(BACKENDS)}") from None


def neighbour_offsets(connectivity=26):
    """Neighbour offsets as an (n, 3) int64 array in a fixed (z, y, x)-major order."""
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    offs = []
    for dz, dy, dx in itertools.product((-1, 0, 1), repeat=3):
        if (dx, dy, dz) == (0, 0, 0):
            continue
        if connectivity == 6 and abs(dx) + abs(dy) + abs(dz) != 1:
            continue
        offs.append((dx, dy, dz))
    return np.array(offs, dtype=np.int64)


def offset_lengths(offsets, spacing):
    """Physical centre-to-centre length of each neighbour offset."""
    sp = np.asarray(spacing, dtype=np.float64)
    return np.sqrt(((offsets * sp) ** 2).sum(axis=1))


def edt_sq_lines(f, spacing, backend=None):
    get_backend(backend).edt_sq_lines(f, float(spacing))


def dijkstra(fg, weight, dims, offsets, lengths, sources, init, backend=None):
    return get_backend(backend).dijkstra(
        np.ascontiguousarray(fg, dtype=np.uint8),
        np.ascontiguousarray(weight, dtype=np.float64),
        tuple(int(d) for d in dims),
        np.ascontiguousarray(offsets, dtype=np.int64),
        np.ascontiguousarray(lengths, dtype=np.float64),
        np.ascontiguousarray(sources, dtype=np.int64),
        np.ascontiguousarray(init, dtype=np.float64),
    )


def label_components(fg, dims, offsets, backend=None):
    return get_backend(backend).label_components(
        np.ascontiguousarray(fg, dtype=np.uint8),
        tuple(int(d) for d in dims),
        np.ascontiguousarray(offsets, dtype=np.int64),
    )


def peak_persistence(values, order, dims, offsets, backend=None):
    return get_backend(backend).peak_persistence(
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(order, dtype=np.int64),
        tuple(int(d) for d in dims),
        np.ascontiguousarray(offsets, dtype=np.int64),
    )
