"""Voxel-grid data model, coordinate transforms and ``.v3j`` file I/O.

Arrays are indexed ``data[x, y, z]``. Whenever a volume is flattened (file
payload, kernel input) the order is x fastest, z slowest, i.e. numpy
``order="F"`` on the ``(X, Y, Z)`` array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from clk import kernels

ROLES = ("mask", "map")


class VolumeError(Exception):
    """Base class for volume I/O and validation errors."""

    code = "volume"


class HeaderError(VolumeError):
    code = "malformed-header"


class InvalidDimsError(HeaderError):
    code = "invalid-dims"


class PayloadLengthError(VolumeError):
    code = "length-mismatch"


class NonFiniteError(VolumeError):
    code = "non-finite"


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Dense scalar field on an axis-aligned grid with physical spacing (mm)."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    role: str = "map"
    dims: tuple = field(init=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 3:
            raise InvalidDimsError(f"volume data must be 3-D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise InvalidDimsError(f"dims must be positive, got {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise HeaderError(f"spacing must be three positive reals, got {self.spacing}")
        if len(origin) != 3 or not all(np.isfinite(o) for o in origin):
            raise HeaderError(f"origin must be three finite reals, got {self.origin}")
        if self.role not in ROLES:
            raise HeaderError(f"role must be one of {ROLES}, got {self.role!r}")
        if self.role == "mask" and not np.isin(data, (0.0, 1.0)).all():
            raise VolumeError("mask volume may only contain 0 and 1")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", tuple(int(d) for d in data.shape))

    @classmethod
    def mask(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        return cls(np.asarray(data, dtype=bool).astype(np.float64), spacing, origin, "mask")

    def like(self, data, role="map"):
        """New volume on the same grid."""
        return Volume3D(data, self.spacing, self.origin, role)

    @property
    def size(self):
        return int(np.prod(self.dims))

    def foreground(self):
        return self.data > 0.5

    def flat(self):
        """Data flattened x-fastest."""
        return self.data.ravel(order="F")

    def flat_index(self, idx):
        x, y, z = (int(c) for c in idx)
        self.check_index((x, y, z))
        return x + self.dims[0] * (y + self.dims[1] * z)

    def unflat(self, flat):
        """Flat index (or array of them) to (x, y, z)."""
        return np.unravel_index(flat, self.dims, order="F")

    def check_index(self, idx):
        if len(idx) != 3 or not all(0 <= int(c) < d for c, d in zip(idx, self.dims)):
            raise IndexError(f"voxel index {tuple(idx)} outside dims {self.dims}")

    def mm_to_index(self, p):
        """Nearest voxel (by centre) to physical point ``p``; may be out of bounds."""
        q = (np.asarray(p, dtype=np.float64) - self.origin) / self.spacing
        return tuple(int(c) for c in np.floor(q + 0.5))

    def centers(self, indices):
        """Physical centres for an (n, 3) integer index array."""
        return np.asarray(indices, dtype=np.float64) * self.spacing + self.origin

    def __eq__(self, other):
        if not isinstance(other, Volume3D):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
            and self.role == other.role
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def index_to_mm(v: Volume3D, i) -> tuple:
    """Physical position of the centre of voxel ``i``."""
    v.check_index(i)
    return tuple(o + int(c) * s for o, c, s in zip(v.origin, i, v.spacing))


def _header(v: Volume3D) -> bytes:
    header = {"dims": list(v.dims), "spacing": list(v.spacing), "origin": list(v.origin), "role": v.role}
    return (json.dumps(header, separators=(",", ":")) + "\n").encode("utf-8")


def write_volume(v: Volume3D, path) -> None:
    payload = v.flat().astype("<f8", copy=False).tobytes()
    with open(path, "wb") as fh:
        fh.write(_header(v))
        fh.write(payload)


def read_volume(path) -> Volume3D:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise HeaderError(f"{path}: no header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: header is not JSON ({exc})") from None
    if not isinstance(header, dict):
        raise HeaderError(f"{path}: header must be a JSON object")
    missing = {"dims", "spacing", "origin", "role"} - header.keys()
    if missing:
        raise HeaderError(f"{path}: header missing keys {sorted(missing)}")
    dims = header["dims"]
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and not isinstance(d, bool) for d in dims)
    ):
        raise HeaderError(f"{path}: dims must be three integers, got {dims!r}")
    if min(dims) < 1:
        raise InvalidDimsError(f"{path}: dims must be positive, got {dims}")
    n = dims[0] * dims[1] * dims[2]
    payload = raw[nl + 1:]
    if len(payload) != 8 * n:
        raise PayloadLengthError(f"{path}: expected {8 * n} payload bytes, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.isfinite(flat).all():
        raise NonFiniteError(f"{path}: payload contains non-finite values")
    data = flat.reshape(dims, order="F")
    try:
        return Volume3D(data, tuple(header["spacing"]), tuple(header["origin"]), header["role"])
    except TypeError as exc:
        raise HeaderError(f"{path}: {exc}") from None


def connected_components(mask: Volume3D, connectivity: int = 26):
    """Label foreground components.

    Returns ``(labels, count)`` where ``labels`` is a map-role volume holding
    component ids 1..count (0 on background). Ids are assigned in order of
    each component's smallest x-fastest flat index.
    """
    offsets = kernels.neighbour_offsets(connectivity)
    fg = mask.foreground().ravel(order="F")
    labels, count = kernels.label_components(fg, mask.dims, offsets)
    data = labels.reshape(mask.dims, order="F").astype(np.float64)
    return mask.like(data), int(count)
