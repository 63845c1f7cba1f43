"""Pinhole cameras, rays and similarity transforms.

Convention: right-handed world, the camera looks down its local -z axis,
image rows grow downward and columns grow to the right. Pixel ``(row, col)``
is addressed by its integer index, so the default principal point of a
``W x H`` image is ``((W - 1) / 2, (H - 1) / 2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

_ORTHO_TOL = 1e-6


def _check_rotation(rotation: np.ndarray, what: str) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise InputError(f"{what} must be 3x3, got shape {rotation.shape}")
    if not np.all(np.isfinite(rotation)):
        raise InputError(f"{what} contains non-finite entries")
    err = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if err > _ORTHO_TOL or np.linalg.det(rotation) <= 0:
        raise InputError(f"{what} is not a proper rotation (|R^T R - I| = {err:.3g})")
    return rotation


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int
    height: int
    focal: float
    principal_point: tuple[float, float] | None = None

    def __post_init__(self):
        if int(self.width) < 1 or int(self.height) < 1:
            raise InputError(f"image size must be positive, got {self.width}x{self.height}")
        if not self.focal > 0:
            raise InputError(f"focal must be > 0, got {self.focal}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "focal", float(self.focal))
        if self.principal_point is None:
            pp = ((self.width - 1) / 2.0, (self.height - 1) / 2.0)
        else:
            pp = (float(self.principal_point[0]), float(self.principal_point[1]))
        object.__setattr__(self, "principal_point", pp)

    @property
    def cx(self) -> float:
        return self.principal_point[0]

    @property
    def cy(self) -> float:
        return self.principal_point[1]

    def with_focal_scale(self, factor: float) -> CameraIntrinsics:
        """Same image plane, focal length multiplied by ``factor`` (a zoom)."""
        return CameraIntrinsics(self.width, self.height, self.focal * factor, self.principal_point)

    def resized(self, width: int, height: int) -> CameraIntrinsics:
        """Intrinsics for the same camera rendered at a different resolution."""
        sx = width / self.width
        sy = height / self.height
        # pixel centres sit at integer indices, so map through the half-pixel offset
        cx = (self.cx + 0.5) * sx - 0.5
        cy = (self.cy + 0.5) * sy - 0.5
        return CameraIntrinsics(width, height, self.focal * 0.5 * (sx + sy), (cx, cy))


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, "pose rotation"))
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if t.shape != (3,) or not np.all(np.isfinite(t)):
            raise InputError(f"pose translation must be a finite 3-vector, got {self.translation!r}")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix) -> Pose:
        m = np.asarray(matrix, dtype=np.float64)
        if m.size == 12:
            m = m.reshape(3, 4)
        elif m.shape == (4, 4):
            m = m[:3]
        else:
            raise InputError(f"pose matrix must be 3x4 or 4x4, got {m.shape}")
        return cls(m[:, :3], m[:, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0)) -> Pose:
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        back = eye - target
        norm = np.linalg.norm(back)
        if norm < 1e-12:
            raise InputError("camera position coincides with its target")
        back /= norm
        right = np.cross(np.asarray(up, dtype=np.float64), back)
        if np.linalg.norm(right) < 1e-12:
            raise InputError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        return cls(np.stack([right, true_up, back], axis=1), eye)

    def matrix(self) -> np.ndarray:
        """3x4 ``[R | t]``."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    def translated(self, offset) -> Pose:
        return Pose(self.rotation, self.translation + np.asarray(offset, dtype=np.float64))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float


@dataclass
class Rays:
    """A batch of rays sharing one depth range.

    ``ray_ids`` key the counter-based sampler; by default they are the
    row-major pixel indices the rays were generated from.
    """

    origins: np.ndarray
    directions: np.ndarray
    t_near: float
    t_far: float
    ray_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        if self.origins.shape != self.directions.shape:
            raise InputError("origins and directions must have the same length")
        if not 0 < self.t_near < self.t_far:
            raise InputError(f"need 0 < t_near < t_far, got [{self.t_near}, {self.t_far}]")
        if self.ray_ids is None:
            self.ray_ids = np.arange(len(self.origins), dtype=np.uint64)
        else:
            self.ray_ids = np.asarray(self.ray_ids, dtype=np.uint64).reshape(-1)

    def __len__(self) -> int:
        return len(self.origins)

    def __getitem__(self, index) -> Rays:
        return Rays(self.origins[index], self.directions[index], self.t_near, self.t_far,
                    self.ray_ids[index])

    def ray(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i], self.t_near, self.t_far)

    def with_range(self, t_near: float, t_far: float) -> Rays:
        return Rays(self.origins, self.directions, t_near, t_far, self.ray_ids)


def pixel_grid(intrinsics: CameraIntrinsics) -> np.ndarray:
    """All ``(row, col)`` pairs of the image in row-major order."""
    rows, cols = np.meshgrid(np.arange(intrinsics.height), np.arange(intrinsics.width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def camera_rays(intrinsics: CameraIntrinsics, pose: Pose, rows, cols,
                t_near: float = 1.0, t_far: float = 10.0, ray_ids=None) -> Rays:
    """Rays through arbitrary (possibly fractional) pixel coordinates, no bounds check."""
    rows = np.asarray(rows, dtype=np.float64).reshape(-1)
    cols = np.asarray(cols, dtype=np.float64).reshape(-1)
    d_cam = np.stack([
        (cols - intrinsics.cx) / intrinsics.focal,
        -(rows - intrinsics.cy) / intrinsics.focal,
        -np.ones(len(rows)),
    ], axis=1)
    d_world = d_cam @ pose.rotation.T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.translation, d_world.shape).copy()
    return Rays(origins, d_world, t_near, t_far, ray_ids)


def generate_rays(intrinsics: CameraIntrinsics, pose: Pose, pixels=None,
                  t_near: float = 1.0, t_far: float = 10.0) -> Rays:
    """One unit-direction ray per ``(row, col)`` pixel (all pixels if ``None``)."""
    if pixels is None:
        pixels = pixel_grid(intrinsics)
    pixels = np.asarray(pixels).reshape(-1, 2)
    rows = pixels[:, 0]
    cols = pixels[:, 1]
    bad = (rows < 0) | (rows >= intrinsics.height) | (cols < 0) | (cols >= intrinsics.width)
    if np.any(bad):
        r, c = pixels[np.argmax(bad)]
        raise InputError(
            f"pixel (row={r}, col={c}) outside {intrinsics.width}x{intrinsics.height} image")
    ids = rows.astype(np.uint64) * np.uint64(intrinsics.width) + cols.astype(np.uint64)
    return camera_rays(intrinsics, pose, rows, cols, t_near, t_far, ids)


@dataclass(frozen=True)
class SimilarityTransform:
    """``p -> scale * R p + t``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale <= 0:
            raise InputError(f"similarity scale must be > 0, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, "similarity rotation"))
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if t.shape != (3,):
            raise InputError("similarity translation must be a 3-vector")
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> SimilarityTransform:
        return cls()

    def is_identity(self) -> bool:
        return (self.scale == 1.0 and np.array_equal(self.rotation, np.eye(3))
                and not np.any(self.translation))

    def apply(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def apply_direction(self, d) -> np.ndarray:
        """Linear part only (no translation); lengths scale by ``scale``."""
        return self.scale * (np.asarray(d, dtype=np.float64) @ self.rotation.T)

    def inverse(self) -> SimilarityTransform:
        inv_s = 1.0 / self.scale
        rt = self.rotation.T
        return SimilarityTransform(inv_s, rt, -inv_s * (rt @ self.translation))

    def compose(self, other: SimilarityTransform) -> SimilarityTransform:
        """``self ∘ other``: apply ``other`` first."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )


def apply_similarity(transform: SimilarityTransform, p) -> np.ndarray:
    return transform.apply(p)


def invert_similarity(transform: SimilarityTransform) -> SimilarityTransform:
    return transform.inverse()


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
