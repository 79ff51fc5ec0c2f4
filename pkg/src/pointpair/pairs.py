"""View pairs: overlap measurement, point correspondences, pair generation.

Overlap between two views is the symmetric minimum of the two directed
inlier fractions (fraction of one view's points with a neighbor in the other
view within a radius).  Correspondences take, for every point of the first
view, its single nearest neighbor in the second view, kept when the distance
is within the radius.

Pair file layout (little-endian):
    magic "PCPR" | PLY block (view 1) | PLY block (view 2)
    | u64 match count | matches as (u32 i, u32 j) | f64 overlap
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .frames import DepthFrame, backproject
from .errors import EmptyViewError
from .geometry import PointCloud, build_index
from .ply import ply_bytes, read_ply
from .voxel import quantize, first_point_indices

log = logging.getLogger(__name__)

_PAIR_MAGIC = b"PCPR"

DEFAULT_STRIDE = 25
DEFAULT_OVERLAP_THRESHOLD = 0.30
DEFAULT_MATCH_RADIUS = 0.025
DEFAULT_VOXEL_SIZE = 0.025


@dataclass(frozen=True)
class CorrespondenceMap:
    """Index pairs (i, j) linking points of view 1 to points of view 2."""

    matches: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matches, dtype=np.int64).reshape(-1, 2)
        if m.size and m.min() < 0:
            raise ValueError("match indices must be non-negative")
        if m.shape[0] > 1:
            keys = m[:, 0] << 32 | m[:, 1]
            if np.unique(keys).shape[0] != m.shape[0]:
                raise ValueError("duplicate (i, j) match pair")
        object.__setattr__(self, "matches", m)

    def __len__(self) -> int:
        return self.matches.shape[0]


@dataclass(frozen=True)
class ScenePair:
    """Two partial views of one scene with their correspondence map."""

    x1: PointCloud
    x2: PointCloud
    correspondences: CorrespondenceMap
    overlap: float
    scene_id: str = ""
    frame_ids: tuple[int, int] = (0, 1)

    def __post_init__(self):
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError(f"overlap must lie in [0, 1], got {self.overlap}")
        m = self.correspondences.matches
        if m.shape[0] < 1:
            raise ValueError("a scene pair needs at least one correspondence")
        if m[:, 0].max() >= len(self.x1) or m[:, 1].max() >= len(self.x2):
            raise ValueError("correspondence indices out of range")


def compute_overlap(x1: PointCloud, x2: PointCloud, radius: float) -> float:
    """Symmetric overlap ratio: min of the two directed inlier fractions."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    idx2 = build_index(x2)
    _, d1 = idx2.nearest_many(x1.points)
    idx1 = build_index(x1)
    _, d2 = idx1.nearest_many(x2.points)
    frac1 = float(np.count_nonzero(d1 <= radius)) / len(x1)
    frac2 = float(np.count_nonzero(d2 <= radius)) / len(x2)
    return min(frac1, frac2)


def compute_correspondences(x1: PointCloud, x2: PointCloud, radius: float) -> CorrespondenceMap:
    """Nearest neighbor in x2 for every x1 point, thresholded at `radius`.

    Output i values are strictly increasing; several i may share one j.
    """
    idx2 = build_index(x2)
    j, d = idx2.nearest_many(x1.points)
    keep = d <= radius
    i = np.nonzero(keep)[0].astype(np.int64)
    return CorrespondenceMap(np.stack([i, j[keep]], axis=1))


def subsample_view(pc: PointCloud, voxel_size: float) -> PointCloud:
    """One representative point per voxel at `voxel_size` (lowest-index wins)."""
    t = quantize(pc, voxel_size)
    rep = first_point_indices(t.origin_map)
    feats = pc.features[rep] if pc.features is not None else None
    return PointCloud(pc.points[rep], feats)


def generate_pairs(
    frames: list[DepthFrame],
    stride: int = DEFAULT_STRIDE,
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD,
    radius: float = DEFAULT_MATCH_RADIUS,
    voxel_size: float = DEFAULT_VOXEL_SIZE,
    scene_id: str = "",
) -> list[ScenePair]:
    """Emit every view pair whose overlap reaches the threshold.

    Views are the back-projected frames at indices 0, stride, 2*stride, ...,
    voxel-subsampled at `voxel_size` before matching to bound cost.  Frames
    with no valid pixels are skipped with a warning.  Output order is
    canonical: ascending (frame index a, frame index b) with a < b.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not 0.0 < overlap_threshold <= 1.0:
        raise ValueError("overlap_threshold must lie in (0, 1]")
    views: list[tuple[int, PointCloud]] = []
    for fi in range(0, len(frames), stride):
        try:
            view = backproject(frames[fi])
        except EmptyViewError:
            log.warning("frame %d has no valid pixels; skipped", fi)
            continue
        views.append((fi, subsample_view(view, voxel_size)))
    pairs = []
    for a in range(len(views)):
        for b in range(a + 1, len(views)):
            fa, va = views[a]
            fb, vb = views[b]
            ov = compute_overlap(va, vb, radius)
            if ov >= overlap_threshold:
                matches = compute_correspondences(va, vb, radius)
                if len(matches) >= 1:
                    pairs.append(
                        ScenePair(va, vb, matches, ov, scene_id=scene_id, frame_ids=(fa, fb))
                    )
    return pairs


def write_pair(pair: ScenePair, target) -> None:
    blob = bytearray()
    blob += _PAIR_MAGIC
    blob += ply_bytes(pair.x1, binary=True)
    blob += ply_bytes(pair.x2, binary=True)
    m = pair.correspondences.matches
    blob += struct.pack("<Q", m.shape[0])
    blob += m.astype("<u4").tobytes()
    blob += struct.pack("<d", pair.overlap)
    if hasattr(target, "write"):
        target.write(bytes(blob))
    else:
        with open(target, "wb") as fh:
            fh.write(bytes(blob))


def read_pair(source, scene_id: str = "", frame_ids: tuple[int, int] = (0, 1)) -> ScenePair:
    if hasattr(source, "read"):
        return _read_pair_stream(source, scene_id, frame_ids)
    with open(source, "rb") as fh:
        return _read_pair_stream(fh, scene_id, frame_ids)


def _read_pair_stream(fh, scene_id, frame_ids) -> ScenePair:
    if fh.read(4) != _PAIR_MAGIC:
        raise FormatError("bad pair magic; expected PCPR")
    x1 = read_ply(fh)
    x2 = read_ply(fh)
    (count,) = struct.unpack("<Q", fh.read(8))
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError("truncated match payload")
    matches = np.frombuffer(raw, dtype="<u4").reshape(count, 2).astype(np.int64)
    (overlap,) = struct.unpack("<d", fh.read(8))
    return ScenePair(x1, x2, CorrespondenceMap(matches), overlap, scene_id, frame_ids)


def revalidate_pair(pair: ScenePair, radius: float, overlap_threshold: float) -> None:
    """Recheck a loaded pair: overlap still reaches the threshold and every
    stored match is within `radius`.  Raises FormatError on violation."""
    ov = compute_overlap(pair.x1, pair.x2, radius)
    if ov < overlap_threshold - 1e-6:  # slack for the float32 PLY round-trip
        raise FormatError(
            f"pair fails overlap recheck: {ov:.4f} < threshold {overlap_threshold:.4f}"
        )
    m = pair.correspondences.matches
    d = np.linalg.norm(pair.x1.points[m[:, 0]] - pair.x2.points[m[:, 1]], axis=1)
    if d.size and float(d.max()) > radius * (1.0 + 1e-6) + 1e-9:
        raise FormatError(f"pair match distance {d.max():.6f} exceeds radius {radius:.6f}")
