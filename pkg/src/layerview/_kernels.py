"""Compiled inner loops for projective warping and bilinear sampling.

The math here mirrors the numpy reference paths exactly (same operation
order, lerp form a + f*(b-a), strict IEEE), so warped volumes built through
these kernels are bit-identical to the differentiable sampling op applied
to the same grids. Parallelism is over rows / (plane, row) pairs with no
shared mutable state.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def compute_grids_par(mats, ht, wt, gx, gy, valid, hs, ws):
    """Apply homographies [D,3,3] to the target pixel grid.

    Writes source coords into gx, gy [D,ht,wt] (their dtype decides the
    stored precision; the projective math runs in float64) and the
    in-bounds/positive-depth mask into valid.
    """
    d_planes = mats.shape[0]
    for di in prange(d_planes * ht):
        d = di // ht
        i = di % ht
        h00, h01, h02 = mats[d, 0, 0], mats[d, 0, 1], mats[d, 0, 2]
        h10, h11, h12 = mats[d, 1, 0], mats[d, 1, 1], mats[d, 1, 2]
        h20, h21, h22 = mats[d, 2, 0], mats[d, 2, 1], mats[d, 2, 2]
        for j in range(wt):
            w = (h20 * j + h21 * i) + h22
            if w <= 0.0:
                valid[d, i, j] = False
                gx[d, i, j] = -1.0
                gy[d, i, j] = -1.0
                continue
            rw = 1.0 / w
            sx = ((h00 * j + h01 * i) + h02) * rw
            sy = ((h10 * j + h11 * i) + h12) * rw
            gx[d, i, j] = sx
            gy[d, i, j] = sy
            valid[d, i, j] = (0.0 <= sx <= ws - 1) and (0.0 <= sy <= hs - 1)


@njit(cache=True)
def compute_grids_ser(mats, ht, wt, gx, gy, valid, hs, ws):
    """Serial compute_grids_par; avoids thread-launch cost on small grids."""
    d_planes = mats.shape[0]
    for di in range(d_planes * ht):
        d = di // ht
        i = di % ht
        h00, h01, h02 = mats[d, 0, 0], mats[d, 0, 1], mats[d, 0, 2]
        h10, h11, h12 = mats[d, 1, 0], mats[d, 1, 1], mats[d, 1, 2]
        h20, h21, h22 = mats[d, 2, 0], mats[d, 2, 1], mats[d, 2, 2]
        for j in range(wt):
            w = (h20 * j + h21 * i) + h22
            if w <= 0.0:
                valid[d, i, j] = False
                gx[d, i, j] = -1.0
                gy[d, i, j] = -1.0
                continue
            rw = 1.0 / w
            sx = ((h00 * j + h01 * i) + h02) * rw
            sy = ((h10 * j + h11 * i) + h12) * rw
            gx[d, i, j] = sx
            gy[d, i, j] = sy
            valid[d, i, j] = (0.0 <= sx <= ws - 1) and (0.0 <= sy <= hs - 1)


# parallel pays off only once the thread-launch cost is amortized
_PARALLEL_THRESHOLD = 1 << 19


def compute_grids(mats, ht, wt, gx, gy, valid, hs, ws):
    if mats.shape[0] * ht * wt >= _PARALLEL_THRESHOLD:
        compute_grids_par(mats, ht, wt, gx, gy, valid, hs, ws)
    else:
        compute_grids_ser(mats, ht, wt, gx, gy, valid, hs, ws)


@njit(cache=True)
def sample_grid(img, gx, gy, valid, out):
    """Bilinear gather img[C,Hs,Ws] at (gx,gy) [H,W]; invalid pixels -> 0.

    Serial on purpose: callers hit this with many small images, where the
    parallel-region launch would dominate; the plane-stack variant below
    carries the bulk parallel work.
    """
    c_ch, hs, ws = img.shape
    h, w = gx.shape
    for i in range(h):
        for j in range(w):
            if not valid[i, j]:
                for c in range(c_ch):
                    out[c, i, j] = 0.0
                continue
            sx = gx[i, j]
            sy = gy[i, j]
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            x1 = min(x0 + 1, ws - 1)
            y1 = min(y0 + 1, hs - 1)
            fx = img.dtype.type(sx - x0)
            fy = img.dtype.type(sy - y0)
            for c in range(c_ch):
                a = img[c, y0, x0] + fx * (img[c, y0, x1] - img[c, y0, x0])
                b = img[c, y1, x0] + fx * (img[c, y1, x1] - img[c, y1, x0])
                out[c, i, j] = a + fy * (b - a)


@njit(cache=True, parallel=True)
def sample_grid_planes_par(img, gx, gy, valid, out):
    """sample_grid over a stack of plane grids [D,H,W] -> out [D,C,H,W]."""
    c_ch, hs, ws = img.shape
    d_planes, h, w = gx.shape
    for di in prange(d_planes * h):
        d = di // h
        i = di % h
        for j in range(w):
            if not valid[d, i, j]:
                for c in range(c_ch):
                    out[d, c, i, j] = 0.0
                continue
            sx = gx[d, i, j]
            sy = gy[d, i, j]
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            x1 = min(x0 + 1, ws - 1)
            y1 = min(y0 + 1, hs - 1)
            fx = img.dtype.type(sx - x0)
            fy = img.dtype.type(sy - y0)
            for c in range(c_ch):
                a = img[c, y0, x0] + fx * (img[c, y0, x1] - img[c, y0, x0])
                b = img[c, y1, x0] + fx * (img[c, y1, x1] - img[c, y1, x0])
                out[d, c, i, j] = a + fy * (b - a)


@njit(cache=True)
def sample_grid_planes_ser(img, gx, gy, valid, out):
    """Serial sample_grid_planes_par for small plane stacks."""
    c_ch, hs, ws = img.shape
    d_planes, h, w = gx.shape
    for di in range(d_planes * h):
        d = di // h
        i = di % h
        for j in range(w):
            if not valid[d, i, j]:
                for c in range(c_ch):
                    out[d, c, i, j] = 0.0
                continue
            sx = gx[d, i, j]
            sy = gy[d, i, j]
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            x1 = min(x0 + 1, ws - 1)
            y1 = min(y0 + 1, hs - 1)
            fx = img.dtype.type(sx - x0)
            fy = img.dtype.type(sy - y0)
            for c in range(c_ch):
                a = img[c, y0, x0] + fx * (img[c, y0, x1] - img[c, y0, x0])
                b = img[c, y1, x0] + fx * (img[c, y1, x1] - img[c, y1, x0])
                out[d, c, i, j] = a + fy * (b - a)


def sample_grid_planes(img, gx, gy, valid, out):
    if gx.size * img.shape[0] >= _PARALLEL_THRESHOLD:
        sample_grid_planes_par(img, gx, gy, valid, out)
    else:
        sample_grid_planes_ser(img, gx, gy, valid, out)


@njit(cache=True)
def scatter_grid_grad(gout, gx, gy, valid, gimg):
    """Transpose of sample_grid: scatter output grads into image grads."""
    c_ch, hs, ws = gimg.shape
    h, w = gx.shape
    for i in range(h):
        for j in range(w):
            if not valid[i, j]:
                continue
            sx = gx[i, j]
            sy = gy[i, j]
            x0 = int(np.floor(sx))
            y0 = int(np.floor(sy))
            x1 = min(x0 + 1, ws - 1)
            y1 = min(y0 + 1, hs - 1)
            fx = gimg.dtype.type(sx - x0)
            fy = gimg.dtype.type(sy - y0)
            for c in range(c_ch):
                g = gout[c, i, j]
                gimg[c, y0, x0] += g * (1 - fy) * (1 - fx)
                gimg[c, y0, x1] += g * (1 - fy) * fx
                gimg[c, y1, x0] += g * fy * (1 - fx)
                gimg[c, y1, x1] += g * fy * fx
