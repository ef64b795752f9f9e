"""Cameras, Plücker ray maps, pose normalization, and view sampling.

Convention: camera-to-world poses with the rotation columns being the
camera's right / down / forward axes (+z looks into the scene), pixel rays
cast through pixel centers (u + 0.5, v + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def scaled(self, out_w: int, out_h: int) -> "Intrinsics":
        """Rescale proportionally to a different pixel grid."""
        sx = out_w / self.width
        sy = out_h / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, out_w, out_h)


class Pose:
    """Camera-to-world rigid transform (rotation columns: right, down, forward)."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation, tol: float = _ORTHO_TOL):
        R = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValidationError(f"pose needs 3x3 rotation and 3-vector, got {R.shape}, {t.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > tol:
            raise ValidationError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > tol:
            raise ValidationError("rotation determinant is not +1")
        self.rotation = R
        self.translation = t

    @property
    def right(self):
        return self.rotation[:, 0]

    @property
    def down(self):
        return self.rotation[:, 1]

    @property
    def forward(self):
        return self.rotation[:, 2]

    def matrix(self) -> np.ndarray:
        """4x4 camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m, tol: float = _ORTHO_TOL) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(m[:3, :3], m[:3, 3], tol=tol)

    def orthonormalized(self) -> "Pose":
        """Project the rotation block onto the nearest rotation matrix."""
        u, _, vt = np.linalg.svd(self.rotation)
        R = u @ vt
        if np.linalg.det(R) < 0:
            u[:, -1] *= -1.0
            R = u @ vt
        return Pose(R, self.translation)

    def __repr__(self):
        return f"Pose(t={self.translation.round(4).tolist()})"


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def scaled(self, out_w: int, out_h: int) -> "Camera":
        return Camera(self.intrinsics.scaled(out_w, out_h), self.pose)


@dataclass
class PluckerRayMap:
    """Per-pixel oriented lines: unit direction d and moment m = origin x d."""

    data: np.ndarray  # H x W x 6

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def directions(self) -> np.ndarray:
        return self.data[..., :3]

    @property
    def moments(self) -> np.ndarray:
        return self.data[..., 3:]

    def max_invariant_violation(self) -> float:
        """Worst deviation from |d| = 1 and m . d = 0 over all pixels."""
        d = self.directions
        norm_err = np.abs(np.linalg.norm(d, axis=-1) - 1.0).max()
        dot_err = np.abs((self.moments * d).sum(axis=-1)).max()
        return float(max(norm_err, dot_err))


def pixel_ray_directions(intr: Intrinsics, pose: Pose, offsets=None) -> np.ndarray:
    """World-space unit ray directions through each pixel center, H x W x 3.

    `offsets` (H x W x 2), when given, shifts the sample point inside each
    pixel away from its center.
    """
    u = np.arange(intr.width, dtype=np.float64) + 0.5
    v = np.arange(intr.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    if offsets is not None:
        uu = uu + offsets[..., 0]
        vv = vv + offsets[..., 1]
    x = (uu - intr.cx) / intr.fx
    y = (vv - intr.cy) / intr.fy
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    dirs = dirs_cam @ pose.rotation.T
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def plucker_rays(camera: Camera, out_h: int, out_w: int) -> PluckerRayMap:
    """Plücker ray map of `camera` resampled to an out_h x out_w grid.

    Intrinsics are rescaled proportionally, so the grid need not match the
    image resolution.
    """
    if out_h < 1 or out_w < 1:
        raise ValidationError(f"ray map size must be positive, got {out_h}x{out_w}")
    intr = camera.intrinsics.scaled(out_w, out_h)
    d = pixel_ray_directions(intr, camera.pose)
    o = camera.pose.translation
    m = np.cross(np.broadcast_to(o, d.shape), d)
    return PluckerRayMap(np.concatenate([d, m], axis=-1))


@dataclass(frozen=True)
class SceneNormalization:
    """Rigid transform plus uniform scale mapping input poses into the
    averaged reference frame with the farthest camera at distance 1."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def apply_pose(self, pose: Pose) -> Pose:
        R = self.rotation @ pose.rotation
        t = (self.rotation @ pose.translation + self.translation) / self.scale
        return Pose(R, t)

    def apply_points(self, pts: np.ndarray) -> np.ndarray:
        return (pts @ self.rotation.T + self.translation) / self.scale

    def apply_camera(self, camera: Camera) -> Camera:
        return Camera(camera.intrinsics, self.apply_pose(camera.pose))


def _orthogonal_fallback(f: np.ndarray) -> np.ndarray:
    probe = np.array([0.0, 1.0, 0.0]) if abs(f[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    d = probe - (probe @ f) * f
    return d / np.linalg.norm(d)


def normalize_poses(poses: list[Pose]) -> tuple[list[Pose], SceneNormalization]:
    """Express all poses in the averaged reference frame, scaled so the
    farthest camera sits at distance 1.

    The reference frame orthonormalizes the mean axes by Gram-Schmidt with
    forward as the anchor, then down, then right = down x forward. Scenes
    whose cameras are all within 1e-8 of the centroid keep scale 1.
    """
    if not poses:
        raise ValidationError("normalize_poses needs at least one pose")
    center = np.mean([p.translation for p in poses], axis=0)
    mean_fwd = np.mean([p.forward for p in poses], axis=0)
    mean_down = np.mean([p.down for p in poses], axis=0)

    if np.linalg.norm(mean_fwd) < 1e-8:
        f = np.array([0.0, 0.0, 1.0])
    else:
        f = mean_fwd / np.linalg.norm(mean_fwd)
    d = mean_down - (mean_down @ f) * f
    if np.linalg.norm(d) < 1e-8:
        d = _orthogonal_fallback(f)
    else:
        d = d / np.linalg.norm(d)
    r = np.cross(d, f)
    ref = np.stack([r, d, f], axis=1)  # columns right/down/forward

    rot = ref.T
    centered = [rot @ (p.translation - center) for p in poses]
    max_dist = max(np.linalg.norm(t) for t in centered)
    scale = max_dist if max_dist >= 1e-8 else 1.0

    norm = SceneNormalization(rotation=rot, translation=-rot @ center, scale=scale)
    return [norm.apply_pose(p) for p in poses], norm


def lookat_pose(position, target=(0.0, 0.0, 0.0), world_down=(0.0, 1.0, 0.0)) -> Pose:
    """Pose at `position` with +z (forward) aimed at `target`.

    `world_down` seeds the camera's down axis; it must not be parallel to
    the viewing direction.
    """
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(f)
    if norm < 1e-12:
        raise ValidationError("camera position coincides with the look-at target")
    f = f / norm
    r = np.cross(np.asarray(world_down, dtype=np.float64), f)
    if np.linalg.norm(r) < 1e-8:
        r = np.cross(_orthogonal_fallback(f), f)
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    return Pose(np.stack([r, d, f], axis=1), position)


def farthest_point_sample(positions, count: int) -> list[int]:
    """Greedy farthest point sampling over camera positions.

    Starts from index 0; each pick maximizes the minimum distance to the
    chosen set, ties broken by lowest index.
    """
    pts = np.asarray(positions, dtype=np.float64)
    n = len(pts)
    if not 1 <= count <= n:
        raise ValidationError(f"sample count {count} out of range [1, {n}]")
    chosen = [0]
    dist = np.linalg.norm(pts - pts[0], axis=1)
    while len(chosen) < count:
        nxt = int(np.argmax(dist))  # argmax returns the lowest tied index
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return chosen
