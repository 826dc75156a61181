"""Pinhole cameras, plane-induced homographies, warp grids, bilinear sampling.

Conventions (shared with the scene JSON format):
  - world-to-camera pose: x_cam = R @ x_world + t, R orthonormal det +1,
    t in meters;
  - pixel centers sit at integer coordinates, (u,v) in [0,W-1]x[0,H-1];
    K maps a camera-frame point (x,y,z) to u = fx*x/z + cx, v = fy*y/z + cy;
  - depth planes are fronto-parallel, z = depth in the frame of the camera
    that anchors them, with normal n = [0,0,1] in that frame.

A homography here maps homogeneous TARGET pixels to SOURCE pixel
coordinates (the inverse-warp direction used to resample source images).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .tensor import Tensor, _make


class GeometryError(ValueError):
    pass


class DegeneratePlaneError(GeometryError):
    """The requested plane passes through a camera center."""


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus world-to-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        err = np.abs(self.R @ self.R.T - np.eye(3)).max()
        if err > 1e-6 or abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise GeometryError(f"R is not a proper rotation (orthonormality error {err:.2e})")

    def check_principal_point(self):
        """Strict load-time invariant; crops may legitimately move cx/cy
        outside the (cropped) image, so this is not enforced on construction."""
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")
        return self

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self):
        return np.array([[1.0 / self.fx, 0.0, -self.cx / self.fx],
                         [0.0, 1.0 / self.fy, -self.cy / self.fy],
                         [0.0, 0.0, 1.0]])

    def center_world(self):
        """Camera center in world coordinates (-R^T t)."""
        return -self.R.T @ self.t

    def shifted(self, du, dv):
        """Camera with the principal point moved by (-du, -dv) pixels (image crop at offset (du, dv))."""
        return CameraModel(self.fx, self.fy, self.cx - du, self.cy - dv,
                           self.width, self.height, self.R, self.t)

    def resized(self, width, height):
        return CameraModel(self.fx, self.fy, self.cx, self.cy, width, height, self.R, self.t)

    def same_pose(self, other):
        return np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t)

    def same_intrinsics(self, other):
        return (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy)


@dataclass(frozen=True)
class Homography:
    """3x3 map from homogeneous target pixels to source pixel directions."""

    H: np.ndarray
    plane_depth: float

    def __post_init__(self):
        object.__setattr__(self, "H", np.asarray(self.H, dtype=np.float64).reshape(3, 3))
        if not np.all(np.isfinite(self.H)):
            raise GeometryError("homography contains non-finite entries")


@dataclass
class WarpGrid:
    """Per-target-pixel source coordinates and their validity mask."""

    coords: np.ndarray  # [2, H, W]: (u_s, v_s)
    valid: np.ndarray   # [H, W] bool


def relative_pose(source: CameraModel, target: CameraModel):
    """(R_rel, t_rel) with x_source = R_rel @ x_target + t_rel."""
    if source.same_pose(target):
        return np.eye(3), np.zeros(3)
    r_rel = source.R @ target.R.T
    t_rel = source.t - r_rel @ target.t
    return r_rel, t_rel


def plane_homography(source: CameraModel, target: CameraModel, depth: float,
                     plane_frame: str = "target") -> Homography:
    """Homography induced by the fronto-parallel plane z = depth.

    plane_frame selects which camera the plane is attached to: "target" for
    sweep-volume planes anchored at the novel view, "source" for warping an
    already-built layer stack to a new viewpoint. depth may be +inf, in
    which case the translation term vanishes and the map is the pure
    rotation homography K_s R_rel K_t^-1.
    """
    if depth <= 0:
        raise GeometryError(f"plane depth must be positive, got {depth}")
    if plane_frame not in ("target", "source"):
        raise GeometryError(f"plane_frame must be 'target' or 'source', got {plane_frame!r}")
    if source.same_pose(target) and source.same_intrinsics(target):
        return Homography(np.eye(3), depth)

    r_rel, t_rel = relative_pose(source, target)
    if np.isinf(depth):
        mid = r_rel
    elif plane_frame == "target":
        # plane z=depth in target frame; ray K_t^-1 p hits it at depth * ray
        cz = -(r_rel.T @ t_rel)[2]  # source center z in target frame
        if abs(depth - cz) < 1e-12 * max(1.0, depth):
            raise DegeneratePlaneError(f"plane at depth {depth} passes through the source camera center")
        mid = r_rel.copy()
        mid[:, 2] += t_rel / depth
    else:
        # plane z=depth in source frame; target center z in source frame is t_rel_z
        tz = t_rel[2]
        if abs(depth - tz) < 1e-12 * max(1.0, depth):
            raise DegeneratePlaneError(f"plane at depth {depth} passes through the target camera center")
        mid = r_rel + np.outer(t_rel, r_rel[2]) / (depth - tz)
    return Homography(source.K @ mid @ target.K_inv, depth)


def _target_pixel_matrix(h: Homography, extra=None):
    mats = np.asarray([h.H] if extra is None else extra, dtype=np.float64)
    return np.ascontiguousarray(mats)


def warp_grid(h: Homography, source: CameraModel, target: CameraModel,
              dtype=np.float32) -> WarpGrid:
    """Source-pixel coordinates for every target pixel under h.

    Pixels mapping to nonpositive homogeneous depth or outside
    [0, W_s-1] x [0, H_s-1] are flagged invalid.
    """
    ht, wt = target.height, target.width
    gx = np.empty((1, ht, wt), dtype=dtype)
    gy = np.empty((1, ht, wt), dtype=dtype)
    valid = np.empty((1, ht, wt), dtype=np.bool_)
    _kernels.compute_grids(_target_pixel_matrix(h), ht, wt, gx, gy, valid,
                           source.height, source.width)
    return WarpGrid(np.ascontiguousarray(np.concatenate([gx, gy], axis=0)), valid[0])


def sample_bilinear(image, grid: WarpGrid):
    """Bilinear-resample image [C,H,W] at grid coords; invalid pixels -> 0.

    Returns a Tensor; gradients flow to the image values (the grid is held
    fixed). Sampling exactly at integer coordinates reproduces source
    pixels bit-for-bit.
    """
    img = image if isinstance(image, Tensor) else Tensor(image)
    gx = np.ascontiguousarray(grid.coords[0])
    gy = np.ascontiguousarray(grid.coords[1])
    valid = np.ascontiguousarray(grid.valid)
    out = np.empty((img.shape[0],) + gx.shape, dtype=img.dtype)
    _kernels.sample_grid(img.data, gx, gy, valid, out)

    def grad_fn(g):
        gimg = np.zeros_like(img.data)
        _kernels.scatter_grid_grad(np.ascontiguousarray(g), gx, gy, valid, gimg)
        img._accumulate(gimg)

    return _make(out, (img,), grad_fn)


def homography_grids(mats: np.ndarray, source: CameraModel, target: CameraModel,
                     dtype=np.float32):
    """Batched warp_grid for a stack of homography matrices [D,3,3]."""
    ht, wt = target.height, target.width
    d = mats.shape[0]
    gx = np.empty((d, ht, wt), dtype=dtype)
    gy = np.empty((d, ht, wt), dtype=dtype)
    valid = np.empty((d, ht, wt), dtype=np.bool_)
    _kernels.compute_grids(np.ascontiguousarray(mats), ht, wt, gx, gy, valid,
                           source.height, source.width)
    return gx, gy, valid


def warp_image_planes(image: np.ndarray, mats: np.ndarray,
                      source: CameraModel, target: CameraModel):
    """Warp one image onto D planes at once: returns (out [D,C,H,W], valid)."""
    gx, gy, valid = homography_grids(mats, source, target)
    out = np.empty((mats.shape[0], image.shape[0], target.height, target.width),
                   dtype=image.dtype)
    _kernels.sample_grid_planes(np.ascontiguousarray(image), gx, gy, valid, out)
    return out, valid
