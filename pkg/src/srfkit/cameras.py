"""Camera poses, pinhole ray generation, and view-split geometry.

Conventions: world frame has the scene inside [-1, 1]^3. Camera space is
right-handed with the camera looking down -z; poses are 4x4 camera-to-world
transforms. Image rows run top to bottom (row 0 maps to +y in camera space).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError

SCENE_HALF_DIAGONAL = np.sqrt(3.0)


class Split(str, enum.Enum):
    TRAIN = "train"
    TEST = "test"
    OOD = "ood"


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    focal: float  # in pixels; square pixels, principal point at image center

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigurationError("image dimensions must be >= 8 pixels")
        if self.focal <= 0:
            raise ConfigurationError("focal length must be positive")


@dataclass(frozen=True)
class CameraView:
    pose: np.ndarray  # 4x4 camera-to-world
    intrinsics: CameraIntrinsics
    split: Split = Split.TRAIN

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ContractError("pose must be a 4x4 matrix")
        rot = pose[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ContractError("pose rotation block is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise ContractError("pose rotation must have determinant +1")
        if not np.all(np.isfinite(pose)):
            raise ContractError("pose contains non-finite values")
        object.__setattr__(self, "pose", pose)

    @property
    def center(self):
        return self.pose[:3, 3]

    @property
    def forward(self):
        """Unit viewing direction in world space (camera -z axis)."""
        return -self.pose[:3, 2]


@dataclass(frozen=True)
class RayBundle:
    origins: np.ndarray  # (N, 3)
    directions: np.ndarray  # (N, 3), unit norm
    near: float
    far: float

    def __post_init__(self):
        if self.origins.shape != self.directions.shape:
            raise ContractError("origins and directions must match in shape")
        norms = np.linalg.norm(self.directions, axis=-1)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ContractError("ray directions must be unit length")
        if not self.near < self.far:
            raise ContractError("near must be < far")

    def __len__(self):
        return self.origins.shape[0]


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """Camera-to-world pose for a camera at `center` aimed at `target`.

    Near the up-axis poles the reference up vector is swapped to +x to keep
    the basis well conditioned.
    """
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up)) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(fwd, up)
    right = right / np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -fwd
    pose[:3, 3] = center
    return pose


def spherical_rig(n, radius, seed=0):
    """n deterministic camera poses on a sphere, looking at the origin.

    Centers sit on a Fibonacci lattice, which is near-uniform and covers
    low elevations (below the object) as well. The placement depends only on
    (n, radius); `seed` is accepted for interface symmetry and unused.
    """
    del seed
    if n < 1:
        raise ConfigurationError("need at least one view")
    if radius <= 0:
        raise ConfigurationError("rig radius must be positive")
    if n == 1:
        return [look_at(np.array([0.0, 0.0, radius]))]
    golden = np.pi * (3.0 - np.sqrt(5.0))
    poses = []
    for i in range(n):
        z = 1.0 - (2.0 * i + 1.0) / n
        r_xy = np.sqrt(max(0.0, 1.0 - z * z))
        theta = golden * i
        center = radius * np.array([np.cos(theta) * r_xy, np.sin(theta) * r_xy, z])
        poses.append(look_at(center))
    return poses


def random_sphere_views(n, radius, seed):
    """n poses at exactly `radius` from the origin, uniform random directions."""
    if n < 1:
        raise ConfigurationError("need at least one view")
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(n):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        poses.append(look_at(radius * d))
    return poses


def random_ood_views(n, radius, dist_range, seed):
    """n look-at poses at random directions and distances in
    [lo*radius, hi*radius]."""
    lo, hi = dist_range
    if not (0 < lo < hi):
        raise ConfigurationError(f"require 0 < lo < hi, got ({lo}, {hi})")
    rng = np.random.default_rng(seed)
    poses = []
    for _ in range(n):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        dist = radius * rng.uniform(lo, hi)
        poses.append(look_at(dist * d))
    return poses


def generate_rays(view):
    """One ray per pixel through the pixel center, row-major over the image.

    near/far bracket the [-1, 1]^3 scene cube seen from the camera center.
    """
    intr = view.intrinsics
    w, h = intr.width, intr.height
    px = (np.arange(w) + 0.5) - w / 2.0
    py = (np.arange(h) + 0.5) - h / 2.0
    xs, ys = np.meshgrid(px, py)  # row-major: ys varies over rows
    dirs_cam = np.stack(
        [xs / intr.focal, -ys / intr.focal, -np.ones_like(xs)], axis=-1
    ).reshape(-1, 3)
    rot = view.pose[:3, :3]
    dirs = dirs_cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(view.center, dirs.shape).copy()
    dist = float(np.linalg.norm(view.center))
    near = max(1e-2, dist - SCENE_HALF_DIAGONAL - 0.05)
    far = dist + SCENE_HALF_DIAGONAL + 0.05
    return RayBundle(origins=origins, directions=dirs, near=near, far=far)
