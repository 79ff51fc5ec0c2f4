"""Sparse voxel tensors: quantization, hash-based coordinate lookup, devoxelization.

Voxel coordinates are ``floor(p / voxel_size)`` componentwise.  When several
points share a voxel, the voxel keeps the feature row of the lowest-index
point, which keeps quantization deterministic and its gradient trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud

# Coordinates are packed into one signed 64-bit key, 21 bits per axis.
_COORD_BITS = 21
_COORD_LIMIT = 1 << (_COORD_BITS - 1)  # coords must lie in [-2^20, 2^20)
_AXIS_MASK = (1 << _COORD_BITS) - 1


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack integer (N, 3) voxel coordinates into unique int64 keys."""
    c = np.asarray(coords, dtype=np.int64)
    if c.size and (c.min() < -_COORD_LIMIT or c.max() >= _COORD_LIMIT):
        raise ValueError(
            f"voxel coordinates must lie in [{-_COORD_LIMIT}, {_COORD_LIMIT}); "
            f"got range [{c.min()}, {c.max()}]"
        )
    s = c + _COORD_LIMIT
    return (s[:, 0] << (2 * _COORD_BITS)) | (s[:, 1] << _COORD_BITS) | s[:, 2]


def unpack_coords(keys: np.ndarray) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    x = (k >> (2 * _COORD_BITS)) & _AXIS_MASK
    y = (k >> _COORD_BITS) & _AXIS_MASK
    z = k & _AXIS_MASK
    return np.stack([x, y, z], axis=1) - _COORD_LIMIT


def _mix64(keys: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps by design
    k = keys.astype(np.uint64)
    k = (k ^ (k >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    k = (k ^ (k >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return k ^ (k >> np.uint64(31))


class VoxelHashMap:
    """Open-addressing map from integer voxel coordinates to row indices.

    Keys are the packed coordinates, hashed through a 64-bit mixer, with
    linear probing.  Construction and lookup are value-deterministic: the
    table layout depends only on the coordinate array, and no iteration
    order is ever observable in results.
    """

    __slots__ = ("keys", "_table", "_mask")

    def __init__(self, coords: np.ndarray):
        keys = pack_coords(coords)
        n = keys.shape[0]
        if np.unique(keys).shape[0] != n:
            raise ValueError("duplicate voxel coordinates")
        size = 1 << max(3, int(2 * n - 1).bit_length())  # load factor <= 0.5
        self.keys = keys
        self._mask = np.uint64(size - 1)
        table = np.full(size, -1, dtype=np.int64)
        slots = _mix64(keys) & self._mask
        pending = np.arange(n, dtype=np.int64)
        while pending.size:
            cand = slots[pending]
            free = table[cand] == -1
            attempt = pending[free]
            table[cand[free]] = attempt  # in-round collisions: last write wins
            placed = table[cand[free]] == attempt
            lost = np.concatenate([pending[~free], attempt[~placed]])
            slots[lost] = (slots[lost] + np.uint64(1)) & self._mask
            pending = lost
        self._table = table

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        """Row index per query coordinate; -1 where absent."""
        qkeys = pack_coords(coords)
        m = qkeys.shape[0]
        out = np.full(m, -1, dtype=np.int64)
        slots = _mix64(qkeys) & self._mask
        active = np.arange(m, dtype=np.int64)
        while active.size:
            entries = self._table[slots[active]]
            empty = entries == -1
            hit = np.zeros(active.shape[0], dtype=bool)
            occ = ~empty
            hit[occ] = self.keys[entries[occ]] == qkeys[active[occ]]
            out[active[hit]] = entries[hit]
            keep = occ & ~hit
            active = active[keep]
            slots[active] = (slots[active] + np.uint64(1)) & self._mask
        return out

    def lookup_one(self, coord) -> int | None:
        row = self.lookup(np.asarray(coord, dtype=np.int64).reshape(1, 3))[0]
        return None if row < 0 else int(row)


@dataclass(eq=False)
class SparseVoxelTensor:
    """Unique integer voxel coordinates with an aligned feature matrix.

    ``origin_map`` gives, for each point of the originating cloud, the row of
    its voxel; it is None for tensors created inside the network.  Treat
    instances as immutable after construction.
    """

    coords: np.ndarray
    features: np.ndarray
    voxel_size: float
    origin_map: np.ndarray | None = None
    _hash: VoxelHashMap | None = field(default=None, repr=False)

    def __post_init__(self):
        coords = np.ascontiguousarray(self.coords, dtype=np.int64)
        feats = np.asarray(self.features, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must have shape (M, 3), got {coords.shape}")
        if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
            raise ValueError(
                f"features must have one row per coordinate: {feats.shape} vs {coords.shape[0]}"
            )
        if self.origin_map is not None:
            om = np.asarray(self.origin_map, dtype=np.int64)
            if om.size and (om.min() < 0 or om.max() >= coords.shape[0]):
                raise ValueError("origin_map entries must be valid row indices")
            object.__setattr__(self, "origin_map", om)
        self.coords = coords
        self.features = feats

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def hash(self) -> VoxelHashMap:
        if self._hash is None:
            self._hash = VoxelHashMap(self.coords)  # duplicate check runs here
        return self._hash

    def replace_features(self, features: np.ndarray) -> "SparseVoxelTensor":
        """Same coordinates and bookkeeping, new feature matrix."""
        return SparseVoxelTensor(self.coords, features, self.voxel_size, self.origin_map, self._hash)


def quantize(pc: PointCloud, voxel_size: float) -> SparseVoxelTensor:
    """Quantize a point cloud onto a voxel grid of edge `voxel_size` meters.

    Each voxel's feature row comes from the lowest-index point that falls in
    it, or a constant 1.0 occupancy column when the cloud carries no features.
    Voxel rows are ordered canonically (sorted by packed coordinate).
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    vcoords = np.floor(pc.points / voxel_size).astype(np.int64)
    keys = pack_coords(vcoords)
    _, first_idx, inverse = np.unique(keys, return_index=True, return_inverse=True)
    coords = vcoords[first_idx]
    if pc.features is not None:
        feats = pc.features[first_idx].copy()
    else:
        feats = np.ones((first_idx.shape[0], 1), dtype=np.float64)
    return SparseVoxelTensor(coords, feats, float(voxel_size), inverse.astype(np.int64))


def devoxelize(t: SparseVoxelTensor) -> np.ndarray:
    """Per-original-point feature matrix: row i is feature row origin_map[i]."""
    if t.origin_map is None:
        raise ValueError("tensor has no origin_map; cannot devoxelize")
    return t.features[t.origin_map]


def voxel_hash_lookup(t: SparseVoxelTensor, coord) -> int | None:
    """Row index of `coord` in the tensor, or None when absent."""
    return t.hash.lookup_one(coord)


def first_point_indices(origin_map: np.ndarray) -> np.ndarray:
    """For each voxel row, the lowest original point index mapping to it."""
    rows, first = np.unique(origin_map, return_index=True)
    out = np.empty(rows.shape[0], dtype=np.int64)
    out[rows] = first
    return out


def collapse_matches_to_voxels(
    matches: np.ndarray, origin_map1: np.ndarray, origin_map2: np.ndarray
) -> np.ndarray:
    """Map point-level matches to voxel-row matches, greedily deduplicated.

    Walking matches in order, a match survives only if neither its left nor
    its right voxel row has been used yet, so the result pairs distinct rows
    on both sides (required by the softmax objective, where a repeated row
    would turn a negative into a hidden positive).
    """
    m = np.asarray(matches, dtype=np.int64)
    r1 = origin_map1[m[:, 0]]
    r2 = origin_map2[m[:, 1]]
    seen1 = np.zeros(int(origin_map1.max()) + 1, dtype=bool)
    seen2 = np.zeros(int(origin_map2.max()) + 1, dtype=bool)
    kept = []
    for a, b in zip(r1.tolist(), r2.tolist()):
        if not (seen1[a] or seen2[b]):
            seen1[a] = True
            seen2[b] = True
            kept.append((a, b))
    return np.asarray(kept, dtype=np.int64).reshape(-1, 2)
