"""BEV grid, pinhole camera model and the frustum-to-ego transform.

Ego frame: x lateral (right), y forward, z up, meters.  Camera frame: x right,
y down, z along the optical axis.  A calibration maps ego points to camera
points as ``p_cam = R @ p_ego + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class BevGrid:
    x_min: float = -51.2
    x_max: float = 51.2
    y_min: float = 0.0
    y_max: float = 51.2
    nx: int = 128
    ny: int = 128

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"empty BEV extent: {self}")
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"BEV grid needs at least one cell per axis: {self}")

    @property
    def cell_x(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def cell_y(self) -> float:
        return (self.y_max - self.y_min) / self.ny

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.ny, self.nx)

    def cell_coords(self, x, y):
        """Continuous cell coordinates (fractional ix, iy) of world points."""
        fx = (np.asarray(x, dtype=np.float64) - self.x_min) * self.nx / (self.x_max - self.x_min)
        fy = (np.asarray(y, dtype=np.float64) - self.y_min) * self.ny / (self.y_max - self.y_min)
        return fx, fy

    def cells(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised floor binning: returns (ix, iy, inside) for an (N, >=2) array."""
        fx, fy = self.cell_coords(xy[:, 0], xy[:, 1])
        ix = np.floor(fx).astype(np.int64)
        iy = np.floor(fy).astype(np.int64)
        inside = (ix >= 0) & (ix < self.nx) & (iy >= 0) & (iy < self.ny)
        return ix, iy, inside

    def cell_center(self, ix, iy):
        return (
            self.x_min + (np.asarray(ix) + 0.5) * self.cell_x,
            self.y_min + (np.asarray(iy) + 0.5) * self.cell_y,
        )


def world_to_cell(p, grid: BevGrid) -> Optional[Tuple[int, int]]:
    """Half-open floor binning of a point; ``None`` outside the extent."""
    ix, iy, inside = grid.cells(np.asarray(p, dtype=np.float64).reshape(1, -1))
    if not inside[0]:
        return None
    return int(ix[0]), int(iy[0])


@dataclass(frozen=True)
class DepthBins:
    d_min: float = 1.0
    d_max: float = 51.2
    n_bins: int = 64

    def __post_init__(self):
        if self.d_min <= 0 or self.d_max <= self.d_min:
            raise ValueError(f"invalid depth range: {self}")
        if self.n_bins < 2:
            raise ValueError("need at least two depth bins")

    @property
    def width(self) -> float:
        return (self.d_max - self.d_min) / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.n_bins) + 0.5) * self.width

    def index(self, d) -> np.ndarray:
        """Bin index of depth(s); -1 outside [d_min, d_max)."""
        k = np.floor((np.asarray(d, dtype=np.float64) - self.d_min) / self.width).astype(np.int64)
        return np.where((k >= 0) & (k < self.n_bins), k, -1)


@dataclass(frozen=True, eq=False)
class CameraCalib:
    K: np.ndarray
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise CalibrationError("K and R must be 3x3")
        if abs(np.linalg.det(K)) < 1e-12:
            raise CalibrationError("singular intrinsic matrix")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or np.any(np.tril(K, -1) != 0):
            raise CalibrationError("K must be upper triangular with positive focal lengths")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise CalibrationError("R is not orthonormal")

    @classmethod
    def forward_camera(cls, focal: float, cx: float, cy: float, height: float = 1.5) -> "CameraCalib":
        """Forward-looking camera mounted ``height`` meters above the ego origin."""
        K = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
        # camera x = ego x, camera y = -ego z, camera z = ego y
        R = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        t = -R @ np.array([0.0, 0.0, height])
        return cls(K, R, t)

    def __eq__(self, other):
        return (
            isinstance(other, CameraCalib)
            and np.array_equal(self.K, other.K)
            and np.array_equal(self.R, other.R)
            and np.array_equal(self.t, other.t)
        )


def frustum_to_ego(u, v, d, calib: CameraCalib) -> np.ndarray:
    """Back-project pixel(s) at depth ``d`` (along the optical axis) into the ego frame.

    Scalars give a 3-vector; arrays broadcast and give (..., 3).
    """
    u, v, d = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, d)))
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    try:
        Kinv = np.linalg.inv(calib.K)
    except np.linalg.LinAlgError as exc:
        raise CalibrationError("singular intrinsic matrix") from exc
    pix = np.stack([u, v, np.ones_like(u)], axis=-1)
    cam = d[..., None] * (pix @ Kinv.T)
    return (cam - calib.t) @ calib.R


def project_to_image(p, calib: CameraCalib) -> np.ndarray:
    """Ego point(s) to (u, v, depth); inverse of :func:`frustum_to_ego`."""
    p = np.asarray(p, dtype=np.float64)
    cam = p @ calib.R.T + calib.t
    uvw = cam @ calib.K.T
    d = cam[..., 2]
    return np.stack([uvw[..., 0] / d, uvw[..., 1] / d, d], axis=-1)


def flatten_calib(calib: CameraCalib) -> np.ndarray:
    """Rotation (9), translation (3) and intrinsics (9), row-major, in that order."""
    return np.concatenate([calib.R.reshape(-1), calib.t.reshape(-1), calib.K.reshape(-1)])


def calib_from_kitti(P2: np.ndarray, R0_rect: np.ndarray, Tr_velo_to_cam: np.ndarray) -> CameraCalib:
    """Build a calibration from KITTI-style matrices.

    ``P2`` is 3x4, ``R0_rect`` 3x3 and ``Tr_velo_to_cam`` 3x4; the sensor
    (velodyne) frame plays the role of the ego frame.  Any translation baked
    into the fourth column of ``P2`` is folded into ``t``.
    """
    P2 = np.asarray(P2, dtype=np.float64).reshape(3, 4)
    R0 = np.asarray(R0_rect, dtype=np.float64).reshape(3, 3)
    Tr = np.asarray(Tr_velo_to_cam, dtype=np.float64).reshape(3, 4)
    K = P2[:, :3].copy()
    if abs(np.linalg.det(K)) < 1e-12:
        raise CalibrationError("singular intrinsic matrix in P2")
    t_p2 = np.linalg.solve(K, P2[:, 3])
    R = R0 @ Tr[:, :3]
    t = R0 @ Tr[:, 3] + t_p2
    # re-orthonormalise to absorb print precision in text files
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return CameraCalib(K, R, t)


def calib_to_kitti(calib: CameraCalib) -> dict:
    P2 = np.hstack([calib.K, np.zeros((3, 1))])
    Tr = np.hstack([calib.R, calib.t.reshape(3, 1)])
    return {"P2": P2, "R0_rect": np.eye(3), "Tr_velo_to_cam": Tr}
