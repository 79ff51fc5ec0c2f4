"""Core 3D types: point clouds, rigid+scale transforms, exact nearest-neighbor search.

Distances are Euclidean throughout.  Nearest-neighbor ties are broken by the
lowest reference index, and the k-d tree computes each candidate distance with
the same summation order as the brute-force scan, so the two agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidTransformError

_ORTHO_TOL = 1e-9


def _as_points(points) -> np.ndarray:
    pts = np.array(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
    if pts.shape[0] < 1:
        raise ValueError("a point cloud must contain at least one point")
    if not np.isfinite(pts).all():
        raise ValueError("points contain non-finite coordinates")
    return pts


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points (meters) with optional per-point features.

    Parameters
    ----------
    points : ndarray, shape (N, 3)
        Finite coordinates, N >= 1.
    features : ndarray, shape (N, D), optional
        One feature row per point.
    """

    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        pts = _as_points(self.points)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.features is not None:
            feats = np.array(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"features must have one row per point: {feats.shape} vs {pts.shape[0]} points"
                )
            if not np.isfinite(feats).all():
                raise ValueError("features contain non-finite values")
            feats.flags.writeable = False
            object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def feature_dim(self) -> int | None:
        return None if self.features is None else self.features.shape[1]


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rotation matrix for `angle` radians about a 3D `axis` (Rodrigues form)."""
    ax = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(ax)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("rotation axis must be a nonzero finite vector")
    x, y, z = ax / n
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


@dataclass(frozen=True)
class RigidScaleTransform:
    """Similarity transform p -> scale * (rotation @ p) + translation.

    The rotation must be orthonormal with determinant +1 (tolerance 1e-9) and
    the scale strictly positive.  Composition order is fixed: scale and rotate
    first, then translate, which makes the inverse well defined.
    """

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if np.abs(rot.T @ rot - np.eye(3)).max() > _ORTHO_TOL:
            raise ValueError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(rot) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation matrix determinant is not +1")
        tr = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.isfinite(tr).all():
            raise ValueError("translation contains non-finite values")
        if not (np.isfinite(self.scale) and self.scale > 0.0):
            raise ValueError("scale must be a positive finite scalar")
        rot.flags.writeable = False
        tr.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls) -> "RigidScaleTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * (points @ self.rotation.T) + self.translation

    def inverse(self) -> "RigidScaleTransform":
        inv_rot = self.rotation.T.copy()
        inv_scale = 1.0 / self.scale
        inv_tr = -inv_scale * (inv_rot @ self.translation)
        return RigidScaleTransform(inv_rot, inv_tr, inv_scale)


def apply_transform(pc: PointCloud, t: RigidScaleTransform) -> PointCloud:
    """Transform every point of `pc`; features and ordering are preserved.

    Raises
    ------
    InvalidTransformError
        If any transformed coordinate is non-finite.
    """
    out = t.apply(pc.points)
    if not np.isfinite(out).all():
        raise InvalidTransformError("transform produced non-finite coordinates")
    return PointCloud(out, pc.features)


def brute_force_nearest(pc: PointCloud, query) -> tuple[int, float]:
    """Exhaustive nearest-neighbor scan; ties resolve to the lowest index.

    Serves as the oracle for `NeighborIndex.nearest`; both compute squared
    distances as (dx*dx + dy*dy + dz*dz) so results match exactly.
    """
    q = np.asarray(query, dtype=np.float64).reshape(3)
    diff = pc.points - q
    sq = (diff * diff).sum(axis=1)
    idx = int(np.argmin(sq))
    return idx, float(np.sqrt(sq[idx]))


class NeighborIndex:
    """Balanced k-d tree over a point cloud for exact nearest-neighbor queries.

    The tree is immutable after construction; concurrent read-only queries are
    safe.  Query results are identical to `brute_force_nearest`, including the
    lowest-index tie rule and the distance bit pattern.
    """

    __slots__ = ("cloud", "_pts", "_axis", "_left", "_right", "_root")

    def __init__(self, pc: PointCloud):
        self.cloud = pc
        n = len(pc)
        self._pts = pc.points.tolist()
        self._axis = [0] * n
        self._left = [-1] * n
        self._right = [-1] * n
        self._root = self._build(np.arange(n), 0)

    def _build(self, indices: np.ndarray, depth: int) -> int:
        if indices.size == 0:
            return -1
        axis = depth % 3
        if indices.size == 1:
            node = int(indices[0])
            self._axis[node] = axis
            return node
        mid = indices.size // 2
        order = np.argpartition(self.cloud.points[indices, axis], mid)
        indices = indices[order]
        node = int(indices[mid])
        self._axis[node] = axis
        self._left[node] = self._build(indices[:mid], depth + 1)
        self._right[node] = self._build(indices[mid:][1:], depth + 1)
        return node

    def nearest(self, query) -> tuple[int, float]:
        """Return (reference index, Euclidean distance) of the closest point."""
        q = np.asarray(query, dtype=np.float64).reshape(3)
        qx, qy, qz = float(q[0]), float(q[1]), float(q[2])
        pts = self._pts
        axis_of = self._axis
        left = self._left
        right = self._right
        best_sq = float("inf")
        best_idx = -1
        q3 = (qx, qy, qz)
        stack = [self._root]
        push = stack.append
        pop = stack.pop
        while stack:
            node = pop()
            if node < 0:
                continue
            p = pts[node]
            dx = p[0] - qx
            dy = p[1] - qy
            dz = p[2] - qz
            sq = dx * dx + dy * dy + dz * dz
            if sq < best_sq or (sq == best_sq and node < best_idx):
                best_sq = sq
                best_idx = node
            axis = axis_of[node]
            delta = q3[axis] - p[axis]
            if delta < 0.0:
                near, far = left[node], right[node]
            else:
                near, far = right[node], left[node]
            # visit the far side only if the splitting plane can still hold
            # a point at distance <= best (equality kept for tie-breaking)
            if far >= 0 and delta * delta <= best_sq:
                push(far)
            if near >= 0:
                push(near)
        return best_idx, float(np.sqrt(best_sq))

    def nearest_many(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vector form of `nearest` over rows of `queries`."""
        queries = np.asarray(queries, dtype=np.float64)
        n = queries.shape[0]
        idx = np.empty(n, dtype=np.int64)
        dist = np.empty(n, dtype=np.float64)
        nearest = self.nearest
        for i, row in enumerate(queries.tolist()):
            j, d = nearest(row)
            idx[i] = j
            dist[i] = d
        return idx, dist


def build_index(pc: PointCloud) -> NeighborIndex:
    """Build a `NeighborIndex` over `pc` (pure: equal clouds give equal answers)."""
    return NeighborIndex(pc)


def nearest(idx: NeighborIndex, query) -> tuple[int, float]:
    """Nearest reference point to `query`; ties go to the lowest index."""
    return idx.nearest(query)
