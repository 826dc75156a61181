"""Depth-plane scheduling, sweep-volume assembly, and plane grouping.

A plane-sweep volume (PSV) holds every input view re-projected onto every
candidate depth plane of the target camera: data[d, v] is view v warped to
plane d. Building it is the pipeline's dominant cost, so per-stage wall
clock (homography mapping / coordinate transform / view sampling) is
accumulated for the benchmark harness.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels, geometry
from .geometry import CameraModel, plane_homography


class GroupingError(ValueError):
    """Requested group count does not divide the plane count."""


@dataclass(frozen=True)
class DepthSchedule:
    """D depths spaced uniformly in disparity between near and far.

    depths are strictly increasing (front-to-back); far may be +inf, which
    contributes disparity 0.
    """

    near: float
    far: float
    depths: np.ndarray

    @property
    def count(self):
        return len(self.depths)

    @property
    def disparities(self):
        with np.errstate(divide="ignore"):
            return 1.0 / self.depths


def make_schedule(near: float, far: float, count: int) -> DepthSchedule:
    """Uniform-disparity schedule; count == 1 degenerates to [near]."""
    if near <= 0:
        raise ValueError(f"near plane must be positive, got {near}")
    if far <= near:
        raise ValueError(f"far plane must exceed near, got near={near} far={far}")
    if count < 1:
        raise ValueError(f"plane count must be >= 1, got {count}")
    far_disp = 0.0 if np.isinf(far) else 1.0 / far
    disparities = np.linspace(1.0 / near, far_disp, count)
    with np.errstate(divide="ignore"):
        depths = 1.0 / disparities
    return DepthSchedule(near=float(near), far=float(far), depths=depths)


@dataclass
class StageTimings:
    """Thread-safe accumulator for the three sweep-construction stages."""

    mapping: float = 0.0
    coords: float = 0.0
    sampling: float = 0.0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, mapping=0.0, coords=0.0, sampling=0.0):
        with self._lock:
            self.mapping += mapping
            self.coords += coords
            self.sampling += sampling

    @property
    def total(self):
        return self.mapping + self.coords + self.sampling

    def as_dict(self):
        return {"mapping": self.mapping, "coords": self.coords, "sampling": self.sampling}


@dataclass
class PlaneSweepVolume:
    data: np.ndarray          # [D, V, 3, H, W] float32
    valid: np.ndarray         # [D, V, 1, H, W] bool
    schedule: DepthSchedule
    target_camera: CameraModel
    source_cameras: list
    timings: StageTimings = field(default_factory=StageTimings)

    @property
    def num_planes(self):
        return self.data.shape[0]

    @property
    def num_views(self):
        return self.data.shape[1]


# chunk of planes warped per kernel call; bounds the f32 grid scratch memory
_PLANE_CHUNK = 16


def build_psv(views, source_cameras, target_camera, schedule,
              timings: StageTimings | None = None, threads: int = 0) -> PlaneSweepVolume:
    """Warp every view onto every schedule plane of the target camera.

    views: list of [3,H,W] float32 arrays matching their cameras' sizes.
    Invalid (out-of-view) pixels are zero in data and False in valid.
    threads > 0 splits the per-view work across a thread pool; results are
    identical to the sequential path.
    """
    if len(views) != len(source_cameras):
        raise ValueError(f"{len(views)} views but {len(source_cameras)} cameras")
    for img, cam in zip(views, source_cameras):
        if img.shape[-2:] != (cam.height, cam.width):
            raise ValueError(f"view of shape {img.shape} does not match its camera ({cam.height}x{cam.width})")
    timings = timings if timings is not None else StageTimings()
    depths = schedule.depths
    d_planes, n_views = len(depths), len(views)
    ht, wt = target_camera.height, target_camera.width

    t0 = time.perf_counter()
    mats = np.empty((n_views, d_planes, 3, 3))
    for v, cam in enumerate(source_cameras):
        for d, depth in enumerate(depths):
            try:
                mats[v, d] = plane_homography(cam, target_camera, float(depth)).H
            except geometry.DegeneratePlaneError as exc:
                raise geometry.DegeneratePlaneError(f"plane {d} (depth {depth}), view {v}: {exc}") from exc
    timings.add(mapping=time.perf_counter() - t0)

    data = np.empty((d_planes, n_views, 3, ht, wt), dtype=np.float32)
    valid = np.empty((d_planes, n_views, 1, ht, wt), dtype=np.bool_)

    tasks = []
    for v in range(n_views):
        for lo in range(0, d_planes, _PLANE_CHUNK):
            tasks.append((v, lo, min(lo + _PLANE_CHUNK, d_planes)))

    imgs = [np.ascontiguousarray(v, dtype=np.float32) for v in views]

    def run(task):
        v, lo, hi = task
        cam = source_cameras[v]
        t1 = time.perf_counter()
        gx, gy, vmask = geometry.homography_grids(mats[v, lo:hi], cam, target_camera)
        t2 = time.perf_counter()
        # sample straight into the (strided) volume slice
        _kernels.sample_grid_planes(imgs[v], gx, gy, vmask, data[lo:hi, v])
        t3 = time.perf_counter()
        valid[lo:hi, v, 0] = vmask
        timings.add(coords=t2 - t1, sampling=t3 - t2)

    if threads > 0:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, tasks))
    else:
        for task in tasks:
            run(task)

    return PlaneSweepVolume(data=data, valid=valid, schedule=schedule,
                            target_camera=target_camera,
                            source_cameras=list(source_cameras), timings=timings)


@dataclass(frozen=True)
class GroupLayout:
    """Channel bookkeeping for grouped volumes.

    Within a group, channels are plane-major: channel index of (plane p in
    group, view v, color c) is p*(V*3) + v*3 + c. Groups hold consecutive
    planes, so group g covers global planes [g*D/G, (g+1)*D/G).
    """

    num_planes: int
    num_views: int
    num_groups: int

    @property
    def planes_per_group(self):
        return self.num_planes // self.num_groups

    def channel_index(self, plane_in_group, view, color):
        return plane_in_group * (self.num_views * 3) + view * 3 + color

    def global_plane(self, group, plane_in_group):
        return group * self.planes_per_group + plane_in_group


@dataclass
class GroupedPsv:
    data: np.ndarray      # [G, (D/G)*V*3, H, W]
    layout: GroupLayout
    schedule: DepthSchedule

    @property
    def num_groups(self):
        return self.data.shape[0]


def group(psv: PlaneSweepVolume, num_groups: int) -> GroupedPsv:
    """Split the volume into num_groups batch items of consecutive planes."""
    d = psv.num_planes
    if num_groups < 1 or d % num_groups != 0:
        raise GroupingError(f"group count {num_groups} does not divide plane count {d}")
    v = psv.num_views
    h, w = psv.data.shape[-2:]
    per = d // num_groups
    data = psv.data.reshape(num_groups, per * v * 3, h, w)
    return GroupedPsv(data=data, layout=GroupLayout(d, v, num_groups), schedule=psv.schedule)


def ungroup(grouped: np.ndarray, num_groups: int, channels: int) -> np.ndarray:
    """Inverse of group() generalized to super-sampled outputs.

    grouped: [G, P*channels, H, W] -> [G*P, channels, H, W], consecutive
    groups mapping to consecutive output planes (P is the per-group plane
    count, S*D/G for a head output). With channels=V*3 this is the exact
    inverse of group() on the raw volume data.
    """
    g, ch, h, w = grouped.shape
    if g != num_groups:
        raise GroupingError(f"got {g} groups, expected {num_groups}")
    if ch % channels != 0:
        raise GroupingError(f"{ch} channels not divisible by per-plane channel count {channels}")
    per = ch // channels
    return grouped.reshape(g * per, channels, h, w)
