"""Sparse voxel radiance fields stored in coordinate-list (COO) form.

A field of resolution H covers an H^3 grid; only occupied voxels are stored,
as parallel arrays of integer (i, j, k) coordinates and feature vectors.
Feature layout per voxel: element 0 is the raw density, elements 1..d are
radiance coefficients. d=3 stores plain RGB; d=12 stores four coefficients
per color channel for view-dependent shading, channel-major
(R0 R1 R2 R3 G0..G3 B0..B3).

World coordinates in [-1, 1]^3 map affinely onto grid coordinates
[0, H-1]^3, voxel centers sitting on the integer lattice.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BoundsError,
    CapacityError,
    ConfigurationError,
    DuplicateVoxelError,
    FormatError,
)

VALID_COLOR_DIMS = (3, 12)
DENSIFY_MAX_RESOLUTION = 64

_MAGIC = b"SRF1"
_VERSION = 1


def grid_to_world(points, resolution):
    """Map grid coordinates [0, H-1] to world coordinates [-1, 1]."""
    return np.asarray(points, dtype=np.float64) * (2.0 / (resolution - 1)) - 1.0


def world_to_grid(points, resolution):
    """Map world coordinates [-1, 1] to grid coordinates [0, H-1]."""
    return (np.asarray(points, dtype=np.float64) + 1.0) * ((resolution - 1) / 2.0)


@dataclass(frozen=True)
class NormalizationSpec:
    """Fixed scales dividing densities and radiance coefficients."""

    density_scale: float = 10000.0
    color_scale: float = 10.0

    def __post_init__(self):
        if self.density_scale <= 0 or self.color_scale <= 0:
            raise ConfigurationError("normalization scales must be strictly positive")


class SparseRadianceField:
    """COO sparse voxel grid of density and radiance features.

    Invariants: coordinates unique and in [0, H)^3, one feature row of width
    1+d per coordinate. Construct empty via `new_srf` and fill with
    `insert_voxel`, or build in bulk with `from_arrays`.
    """

    def __init__(self, resolution, color_dim):
        if color_dim not in VALID_COLOR_DIMS:
            raise ConfigurationError(
                f"color_dim must be one of {VALID_COLOR_DIMS}, got {color_dim}"
            )
        if not isinstance(resolution, (int, np.integer)) or resolution < 2:
            raise ConfigurationError(f"resolution must be an integer >= 2, got {resolution}")
        self._resolution = int(resolution)
        self._color_dim = int(color_dim)
        self._coords = np.empty((0, 3), dtype=np.int32)
        self._features = np.empty((0, 1 + color_dim), dtype=np.float32)
        self._keys = set()

    # -- basic accessors ---------------------------------------------------

    @property
    def resolution(self):
        return self._resolution

    @property
    def color_dim(self):
        return self._color_dim

    @property
    def num_voxels(self):
        return self._coords.shape[0]

    @property
    def coords(self):
        """(M, 3) int32 array of voxel coordinates."""
        return self._coords

    @property
    def features(self):
        """(M, 1+d) float32 array; column 0 density, columns 1.. radiance."""
        return self._features

    @property
    def density(self):
        return self._features[:, 0]

    @property
    def radiance(self):
        return self._features[:, 1:]

    @property
    def sparsity(self):
        return 1.0 - self.num_voxels / float(self._resolution**3)

    def packed_keys(self):
        """Linearized int64 keys ((i*H)+j)*H+k, in storage order."""
        h = np.int64(self._resolution)
        c = self._coords.astype(np.int64)
        return (c[:, 0] * h + c[:, 1]) * h + c[:, 2]

    # -- construction ------------------------------------------------------

    @classmethod
    def from_arrays(
        cls, resolution, color_dim, coords, features, validate=True, dtype=np.float32
    ):
        """Bulk constructor. `dtype` picks the in-memory feature precision:
        float32 matches the on-disk format bitwise, float64 is used by
        optimization paths that need full-precision gradients."""
        field = cls(resolution, color_dim)
        coords = np.ascontiguousarray(coords, dtype=np.int32).reshape(-1, 3)
        features = np.ascontiguousarray(features, dtype=dtype).reshape(
            -1, 1 + color_dim
        )
        if validate:
            if coords.shape[0] != features.shape[0]:
                raise ConfigurationError("coords and features must have equal length")
            if coords.size and (coords.min() < 0 or coords.max() >= resolution):
                raise BoundsError("coordinate outside [0, resolution)")
            h = np.int64(resolution)
            keys = (coords[:, 0].astype(np.int64) * h + coords[:, 1]) * h + coords[:, 2]
            if np.unique(keys).size != keys.size:
                raise DuplicateVoxelError("duplicate coordinates in input arrays")
        field._coords = coords
        field._features = features
        field._keys = set(field.packed_keys().tolist())
        return field

    def insert_voxel(self, coord, feature):
        i, j, k = (int(c) for c in coord)
        h = self._resolution
        if not (0 <= i < h and 0 <= j < h and 0 <= k < h):
            raise BoundsError(f"coordinate {(i, j, k)} outside [0, {h})^3")
        feature = np.asarray(feature, dtype=self._features.dtype).reshape(-1)
        if feature.shape[0] != 1 + self._color_dim:
            raise ConfigurationError(
                f"feature width must be {1 + self._color_dim}, got {feature.shape[0]}"
            )
        key = (np.int64(i) * h + j) * h + k
        key = int(key)
        if key in self._keys:
            raise DuplicateVoxelError(f"voxel {(i, j, k)} already present")
        self._keys.add(key)
        self._coords = np.vstack([self._coords, np.array([[i, j, k]], dtype=np.int32)])
        self._features = np.vstack([self._features, feature[None, :]])

    def lookup(self, coord):
        """Feature row at `coord`, or None when the voxel is absent."""
        i, j, k = (int(c) for c in coord)
        h = self._resolution
        key = int((np.int64(i) * h + j) * h + k)
        if key not in self._keys:
            return None
        keys = self.packed_keys()
        idx = int(np.nonzero(keys == key)[0][0])
        return self._features[idx]

    # -- transforms --------------------------------------------------------

    def canonical(self):
        """Copy with rows sorted lexicographically by (i, j, k)."""
        order = np.lexsort((self._coords[:, 2], self._coords[:, 1], self._coords[:, 0]))
        return SparseRadianceField.from_arrays(
            self._resolution,
            self._color_dim,
            self._coords[order],
            self._features[order],
            validate=False,
            dtype=self._features.dtype,
        )

    def __eq__(self, other):
        if not isinstance(other, SparseRadianceField):
            return NotImplemented
        if self._resolution != other._resolution or self._color_dim != other._color_dim:
            return False
        a, b = self.canonical(), other.canonical()
        return np.array_equal(a._coords, b._coords) and np.array_equal(
            a._features, b._features
        )

    def __repr__(self):
        return (
            f"SparseRadianceField(H={self._resolution}, d={self._color_dim}, "
            f"M={self.num_voxels}, sparsity={self.sparsity:.4f})"
        )


def new_srf(resolution, color_dim):
    """Empty field; raises ConfigurationError on invalid dimensioning."""
    return SparseRadianceField(resolution, color_dim)


def densify(srf):
    """Dense (H, H, H, 1+d) float32 array; absent voxels all-zero.

    Guarded to H <= 64: this exists as a brute-force test oracle, not a
    production path.
    """
    h = srf.resolution
    if h > DENSIFY_MAX_RESOLUTION:
        raise CapacityError(
            f"densify refused for H={h} > {DENSIFY_MAX_RESOLUTION}"
        )
    dense = np.zeros((h, h, h, 1 + srf.color_dim), dtype=srf.features.dtype)
    c = srf.coords
    dense[c[:, 0], c[:, 1], c[:, 2]] = srf.features
    return dense


def sparsify(dense, color_dim=None):
    """Inverse of densify: keeps cells with any nonzero feature component."""
    dense = np.asarray(dense, dtype=np.float32)
    h = dense.shape[0]
    d = dense.shape[3] - 1 if color_dim is None else color_dim
    mask = np.any(dense != 0.0, axis=3)
    coords = np.argwhere(mask).astype(np.int32)
    features = dense[mask]
    return SparseRadianceField.from_arrays(h, d, coords, features, validate=False)


def normalize(srf, spec):
    """Divide densities by spec.density_scale and radiance by spec.color_scale."""
    features = srf.features.copy()
    features[:, 0] /= features.dtype.type(spec.density_scale)
    features[:, 1:] /= features.dtype.type(spec.color_scale)
    return SparseRadianceField.from_arrays(
        srf.resolution, srf.color_dim, srf.coords.copy(), features,
        validate=False, dtype=features.dtype,
    )


# -- binary serialization ---------------------------------------------------
#
# Layout, little-endian, no padding:
#   "SRF1" | u32 version | u32 H | u32 d | u64 M
#   | M*3 u16 coords, lexicographically sorted | M*(1+d) f32 features

_HEADER = struct.Struct("<4sIIIQ")


def save_srf(srf, path):
    """Write the field; voxel order in the file is canonical (sorted)."""
    canon = srf.canonical()
    m = canon.num_voxels
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(_MAGIC, _VERSION, canon.resolution, canon.color_dim, m)
        )
        fh.write(np.ascontiguousarray(canon.coords.astype("<u2")).tobytes())
        fh.write(np.ascontiguousarray(canon.features.astype("<f4")).tobytes())


def load_srf(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", offset=len(raw))
    magic, version, h, d, m = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", offset=0)
    if version != _VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if d not in VALID_COLOR_DIMS or h < 2:
        raise FormatError(f"invalid dimensions H={h} d={d}", offset=8)
    pos = _HEADER.size
    coord_bytes = m * 3 * 2
    feat_bytes = m * (1 + d) * 4
    if len(raw) != pos + coord_bytes + feat_bytes:
        raise FormatError(
            f"file length {len(raw)} does not match header (expected "
            f"{pos + coord_bytes + feat_bytes})",
            offset=min(len(raw), pos + coord_bytes + feat_bytes),
        )
    coords = np.frombuffer(raw, dtype="<u2", count=m * 3, offset=pos).reshape(m, 3)
    pos += coord_bytes
    features = np.frombuffer(raw, dtype="<f4", count=m * (1 + d), offset=pos)
    features = features.reshape(m, 1 + d)
    if m and int(coords.max()) >= h:
        raise FormatError("coordinate outside grid bounds", offset=_HEADER.size)
    return SparseRadianceField.from_arrays(
        h, d, coords.astype(np.int32), features.astype(np.float32), validate=True
    )
