"""Multiplane-image assembly, over-operator compositing, and layer warping.

An MPI is a front-to-back stack of RGBA planes anchored at a camera. The
network head does not predict colors directly: per output plane it emits
V-1 camera-weight logits, one background-weight logit and one alpha logit,
plus a single background RGB image per plane group. Colors are the softmax
blend of the V warped input-view pixels (from the disparity-nearest input
plane) and the background image, with the V-th camera's logit pinned to 0.

Rendering uses the standard over-operator: the contribution of plane d is
its premultiplied color times the transmittance of all strictly nearer
planes (the nearest plane sees transmittance 1).

File container: ".fmpi" (magic "FMPI", u32 version, u32 D/H/W, f64
near/far + depths, camera block, then float32 RGBA planes, little-endian).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels, geometry, tensor as T
from .geometry import CameraModel, plane_homography
from .psv import DepthSchedule, GroupedPsv, PlaneSweepVolume
from .tensor import Tensor

_FMPI_MAGIC = b"FMPI"
_FMPI_VERSION = 1


class MpiFormatError(ValueError):
    pass


@dataclass
class MultiplaneImage:
    rgba: Tensor               # [D, 4, H, W], alpha in [0,1], front-to-back
    schedule: DepthSchedule
    camera: CameraModel

    @property
    def num_planes(self):
        return self.rgba.shape[0]


@dataclass
class NetHeadOutput:
    """One group's raw head tensor plus the layout needed to slice it.

    Channel layout: planes-major blocks of (V+1) channels, each block
    holding [w_1 .. w_{V-1}, w_bg, alpha_logit], followed by 3 background
    RGB channels for the whole group.
    """

    raw: Tensor        # [(P*(V+1)) + 3, H, W]
    num_views: int
    planes: int        # output planes in this group (S * D/G)

    def __post_init__(self):
        expect = self.planes * (self.num_views + 1) + 3
        if self.raw.shape[0] != expect:
            raise ValueError(f"head tensor has {self.raw.shape[0]} channels, layout needs {expect}")

    def _plane_block(self):
        p, v = self.planes, self.num_views
        block = self.raw[: p * (v + 1)]
        return block.reshape(p, v + 1, *self.raw.shape[1:])

    def camera_logits(self):
        return self._plane_block()[:, : self.num_views - 1]

    def background_logit(self):
        v = self.num_views
        return self._plane_block()[:, v - 1: v]

    def alpha_logit(self):
        v = self.num_views
        return self._plane_block()[:, v: v + 1]

    def background_rgb(self):
        return self.raw[self.planes * (self.num_views + 1):]


def nearest_plane_map(input_schedule: DepthSchedule, output_schedule: DepthSchedule):
    """For each output plane, the disparity-nearest input plane index.

    Ties resolve to the nearer plane (lower index, planes being ordered
    front to back).
    """
    if input_schedule.count < 1:
        raise ValueError("empty input schedule")
    din = input_schedule.disparities
    dout = output_schedule.disparities
    gaps = np.abs(dout[:, None] - din[None, :])
    return gaps.argmin(axis=1)


def assemble_group(head: NetHeadOutput, candidates: np.ndarray) -> Tensor:
    """Blend one group's head output into RGBA planes [P,4,H,W].

    candidates: [P, V, 3, H, W] warped input-view pixels for each output
    plane (constant w.r.t. the network). The blend weight of candidate i is
    softmax over [w_1 .. w_{V-1}, 0, w_bg]; alpha is the sigmoid of the
    alpha logit.
    """
    p, v = head.planes, head.num_views
    if candidates.shape[:2] != (p, v):
        raise ValueError(f"candidates shaped {candidates.shape}, expected ({p}, {v}, 3, H, W)")
    h, w = candidates.shape[-2:]
    cam_logits = head.camera_logits()
    zero = Tensor(np.zeros((p, 1, h, w), dtype=cam_logits.dtype))
    logits = T.concat([cam_logits, zero, head.background_logit()], axis=1)
    weights = T.softmax(logits, axis=1).reshape(p, v + 1, 1, h, w)

    bg = head.background_rgb().reshape(1, 1, 3, h, w).broadcast_to((p, 1, 3, h, w))
    cands = T.concat([Tensor(candidates), bg], axis=1)          # [P, V+1, 3, H, W]
    rgb = (weights * cands).sum(axis=1)                         # [P, 3, H, W]
    alpha = T.sigmoid(head.alpha_logit())                       # [P, 1, H, W]
    return T.concat([rgb, alpha], axis=1)


def assemble_mpi(heads, psv: PlaneSweepVolume, output_schedule: DepthSchedule,
                 plane_map=None) -> MultiplaneImage:
    """Assemble all groups' head outputs into a full MPI at the PSV camera."""
    plane_map = nearest_plane_map(psv.schedule, output_schedule) if plane_map is None else plane_map
    per_group = output_schedule.count // len(heads)
    parts = []
    for g, head in enumerate(heads):
        sel = plane_map[g * per_group:(g + 1) * per_group]
        candidates = psv.data[sel]                              # [P, V, 3, H, W]
        parts.append(assemble_group(head, candidates))
    rgba = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    return MultiplaneImage(rgba=rgba, schedule=output_schedule, camera=psv.target_camera)


# ---------------------------------------------------------------------------
# compositing


def _over_accumulate(premults, alphas):
    """Shared over-operator loop: sum of premult_d * transmittance_d.

    premults/alphas are per-plane Tensors ([C,H,W] and [1,H,W]); the
    nearest plane has transmittance exactly 1 (no multiply), keeping the
    single-plane case and identity-warp comparisons bit-exact.
    """
    out = None
    trans = None
    for prem, alpha in zip(premults, alphas):
        contrib = prem if trans is None else prem * trans
        out = contrib if out is None else out + contrib
        one_minus = 1.0 - alpha
        trans = one_minus if trans is None else trans * one_minus
    return out, trans


def composite(mpi: MultiplaneImage) -> Tensor:
    """Over-composite the MPI front to back into an RGB image [3,H,W]."""
    prems, alphas = [], []
    for d in range(mpi.num_planes):
        rgb = mpi.rgba[d, :3]
        alpha = mpi.rgba[d, 3:4]
        prems.append(rgb * alpha)
        alphas.append(alpha)
    out, _ = _over_accumulate(prems, alphas)
    return out


def contribution_weights(mpi: MultiplaneImage) -> np.ndarray:
    """Per-plane compositing weights alpha_d * prod_{j<d}(1 - alpha_j)."""
    alphas = mpi.rgba.data[:, 3:4]
    trans = np.ones_like(alphas[0])
    weights = np.empty_like(alphas)
    for d in range(alphas.shape[0]):
        weights[d] = alphas[d] * trans
        trans = trans * (1.0 - alphas[d])
    return weights


def composite_depth(mpi: MultiplaneImage) -> Tensor:
    """Over-composite plane depths into a depth map [1,H,W].

    Pixels no plane claims (all alpha 0) read 0, the documented no-hit
    value. Requires finite plane depths; for far=inf schedules use
    composite_disparity.
    """
    depths = mpi.schedule.depths
    if not np.all(np.isfinite(depths)):
        raise ValueError("schedule reaches infinity; use composite_disparity")
    return _composite_scalar(mpi, depths)


def composite_disparity(mpi: MultiplaneImage) -> Tensor:
    """Over-composite plane disparities (1/depth; 0 at infinity)."""
    return _composite_scalar(mpi, mpi.schedule.disparities)


def _composite_scalar(mpi, values):
    prems, alphas = [], []
    for d in range(mpi.num_planes):
        alpha = mpi.rgba[d, 3:4]
        prems.append(alpha * float(values[d]))
        alphas.append(alpha)
    out, _ = _over_accumulate(prems, alphas)
    return out


def warp_mpi(mpi: MultiplaneImage, new_camera: CameraModel, return_valid=False):
    """Re-render the MPI from a new viewpoint without rebuilding it.

    Each plane is homography-warped from the MPI camera to the new camera
    at its own depth using premultiplied alpha (RGB*alpha and alpha are
    resampled; out-of-view samples are fully transparent), then composited
    front to back. With new_camera == mpi.camera this reproduces
    composite(mpi) bit-exactly.

    return_valid additionally yields the conjunction of the per-plane
    in-bounds masks (pixels with any disoccluded sample are False).
    """
    rgba = mpi.rgba.data
    d_planes, _, h, w = rgba.shape
    depths = mpi.schedule.depths
    mats = np.empty((d_planes, 3, 3))
    for d in range(d_planes):
        mats[d] = plane_homography(mpi.camera, new_camera, float(depths[d]),
                                   plane_frame="source").H
    gx, gy, vmask = geometry.homography_grids(mats, mpi.camera, new_camera)

    prems, alphas = [], []
    all_valid = np.ones((new_camera.height, new_camera.width), dtype=np.bool_)
    for d in range(d_planes):
        rgb = rgba[d, :3]
        alpha = rgba[d, 3:4]
        prem_rgba = np.ascontiguousarray(np.concatenate([rgb * alpha, alpha], axis=0))
        warped = np.empty((4, new_camera.height, new_camera.width), dtype=prem_rgba.dtype)
        _kernels.sample_grid(prem_rgba, gx[d], gy[d], vmask[d], warped)
        prems.append(Tensor(warped[:3]))
        alphas.append(Tensor(warped[3:4]))
        all_valid &= vmask[d]
    out, _ = _over_accumulate(prems, alphas)
    return (out, all_valid) if return_valid else out


# ---------------------------------------------------------------------------
# FMPI container


def save_mpi(path, mpi: MultiplaneImage):
    rgba = np.ascontiguousarray(mpi.rgba.data, dtype="<f4")
    d, _, h, w = rgba.shape
    cam = mpi.camera
    with open(path, "wb") as f:
        f.write(_FMPI_MAGIC)
        f.write(struct.pack("<IIII", _FMPI_VERSION, d, h, w))
        f.write(struct.pack("<dd", mpi.schedule.near, mpi.schedule.far))
        f.write(np.asarray(mpi.schedule.depths, dtype="<f8").tobytes())
        f.write(struct.pack("<ddddII", cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height))
        f.write(np.asarray(cam.R, dtype="<f8").tobytes())
        f.write(np.asarray(cam.t, dtype="<f8").tobytes())
        f.write(rgba.tobytes())


def load_mpi(path) -> MultiplaneImage:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != _FMPI_MAGIC:
            raise MpiFormatError(f"{path}: not an FMPI file")
        version, d, h, w = struct.unpack("<IIII", f.read(16))
        if version != _FMPI_VERSION:
            raise MpiFormatError(f"{path}: unsupported FMPI version {version}")
        near, far = struct.unpack("<dd", f.read(16))
        depths = np.frombuffer(f.read(8 * d), dtype="<f8")
        fx, fy, cx, cy, cw, ch = struct.unpack("<ddddII", f.read(40))
        r_mat = np.frombuffer(f.read(72), dtype="<f8").reshape(3, 3)
        t_vec = np.frombuffer(f.read(24), dtype="<f8")
        payload = np.frombuffer(f.read(), dtype="<f4")
    if payload.size != d * 4 * h * w:
        raise MpiFormatError(f"{path}: truncated plane payload")
    camera = CameraModel(fx, fy, cx, cy, cw, ch, r_mat.copy(), t_vec.copy())
    schedule = DepthSchedule(near=near, far=far, depths=depths.copy())
    return MultiplaneImage(rgba=Tensor(payload.reshape(d, 4, h, w).copy()),
                           schedule=schedule, camera=camera)


# ---------------------------------------------------------------------------
# end-to-end MPI prediction


def predict_mpi(views, cameras, target_camera, schedule_in: DepthSchedule,
                config, weights, *, psv_timings=None, threads=0,
                group_mode="batched"):
    """Full pipeline: sweep volume -> grouped forward passes -> assembled MPI.

    Returns (mpi, psv). `config`/`weights` follow the backbone module; the
    input schedule must have config.planes entries and the output schedule
    has S * D planes over the same [near, far] range.
    """
    from . import backbone, psv as psv_mod

    if schedule_in.count != config.planes:
        raise ValueError(f"schedule has {schedule_in.count} planes, config expects {config.planes}")
    vol = psv_mod.build_psv(views, cameras, target_camera, schedule_in,
                            timings=psv_timings, threads=threads)
    grouped = psv_mod.group(vol, config.groups)
    heads = backbone.run_groups(config, weights, grouped, mode=group_mode)
    out_schedule = psv_mod.make_schedule(schedule_in.near, schedule_in.far,
                                         config.supersample * schedule_in.count)
    return assemble_mpi(heads, vol, out_schedule), vol
