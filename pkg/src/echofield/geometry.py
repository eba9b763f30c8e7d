"""Probe poses and scanline sampling lattices for a linear-array probe.

Coordinates are in millimeters. The probe's local frame has the lateral axis
along +x and the beam along +z; scanlines are parallel, so a frame's samples
form a rectilinear (axial, lateral) grid suitable for 2D PSF convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform of the probe: x_world = rotation @ x_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self ∘ other: apply `other` first, then `self`."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an array of 3-vectors (last axis = xyz)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def as_matrix(self) -> np.ndarray:
        """3x4 [R|t] matrix."""
        return np.hstack([self.rotation, self.translation[:, None]])

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "RigidPose":
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape not in ((3, 4), (4, 4)):
            raise ValueError(f"pose matrix must be 3x4 or 4x4, got {mat.shape}")
        return RigidPose(mat[:3, :3], mat[:3, 3])


def rotation_about_x(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_about_y(angle_rad: float) -> np.ndarray:
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class ScanGeometry:
    """Sampling lattice of one frame.

    `frequency` is the normalized wave frequency in cycles per axial sample,
    which keeps the attenuation and PSF terms unit-consistent without a
    speed-of-sound parameter.
    """

    n_scanlines: int           # W, lateral
    n_samples: int             # H, axial
    lateral_spacing: float     # mm between scanlines
    axial_spacing: float       # mm between samples along the beam
    frequency: float           # cycles per axial sample

    def __post_init__(self):
        if self.n_scanlines < 2 or self.n_samples < 2:
            raise ValueError("n_scanlines and n_samples must be >= 2")
        if min(self.lateral_spacing, self.axial_spacing, self.frequency) <= 0:
            raise ValueError("spacings and frequency must be strictly positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_samples, self.n_scanlines)


@dataclass(frozen=True)
class SampleGrid:
    """H x W lattice of 3D sample points with per-scanline beam directions."""

    points: np.ndarray      # (H, W, 3) mm
    directions: np.ndarray  # (W, 3) unit vectors

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        dirs = np.asarray(self.directions, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3:
            raise ValueError(f"points must be (H, W, 3), got {pts.shape}")
        if dirs.shape != (pts.shape[1], 3):
            raise ValueError(f"directions must be (W, 3), got {dirs.shape}")
        norms = np.linalg.norm(dirs, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ValueError("directions must have unit norm")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "directions", dirs)


def scanline_grid(pose: RigidPose, geom: ScanGeometry) -> SampleGrid:
    """Sample lattice of one frame at `pose`.

    Column j starts at translation + R @ (j*ls - (W-1)*ls/2, 0, 0) and marches
    along R @ (0, 0, 1) in steps of axial_spacing.
    """
    w, h = geom.n_scanlines, geom.n_samples
    lateral = (np.arange(w) - (w - 1) / 2.0) * geom.lateral_spacing
    origins_local = np.zeros((w, 3))
    origins_local[:, 0] = lateral
    origins = origins_local @ pose.rotation.T + pose.translation        # (W, 3)
    direction = pose.rotation @ np.array([0.0, 0.0, 1.0])               # (3,)
    depths = np.arange(h)[:, None, None] * geom.axial_spacing           # (H, 1, 1)
    points = origins[None, :, :] + depths * direction[None, None, :]
    directions = np.broadcast_to(direction, (w, 3)).copy()
    return SampleGrid(points, directions)
