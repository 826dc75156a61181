"""The 4-level fully convolutional encoder-decoder operating on one group.

Layer sequence (3x3 kernels, same padding, ReLU everywhere but the last):

    conv1  s1  in -> 16          conv6a s1  128 -> 256
    conv2  s2  16 -> 32          up1, conv6b s1  256+64  -> 64
    conv3  s2  32 -> 64          up2, conv7  s1  64+32   -> 32
    conv4  s2  64 -> 128         up3, conv8  s1  32+16   -> 16
    conv5  s1  128 -> 128        conv9  s1  16 -> out (linear)

Decoder stages concatenate [upsampled, encoder skip] along channels, so
channel counts into conv6b/conv7/conv8 are 320/96/48. Input channels are
(D/G)*3V; output channels are S*(D/G)*(V+1) + 3 (per-plane head logits
plus one background RGB image per group). Spatial extents must be
divisible by 8 (three stride-2 stages).

Weight files: ".fmpw" (magic "FMPW", u32 version, config echo, then
little-endian (name, shape, raw data) records).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .mpi import NetHeadOutput
from .psv import GroupedPsv
from .tensor import ShapeError, Tensor

_FMPW_MAGIC = b"FMPW"
_FMPW_VERSION = 1
_MODE_FLAGS = {"bilinear": 0, "nearest": 1}
_MODE_NAMES = {v: k for k, v in _MODE_FLAGS.items()}
_DTYPE_FLAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPE_NAMES = {0: np.float32, 1: np.float64}


class WeightFormatError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    """Pipeline shape parameters: D input planes, G groups, S super-sampling
    factor, V input views, plus the decoder upsampling mode."""

    planes: int
    groups: int
    supersample: int = 1
    views: int = 4
    upsample_mode: str = "bilinear"

    def __post_init__(self):
        if self.planes < 1 or self.groups < 1 or self.planes % self.groups != 0:
            raise ValueError(f"groups={self.groups} must divide planes={self.planes}")
        if self.supersample < 1:
            raise ValueError(f"supersample factor must be >= 1, got {self.supersample}")
        if self.views < 1:
            raise ValueError(f"need at least one view, got {self.views}")
        if self.upsample_mode not in _MODE_FLAGS:
            raise ValueError(f"unknown upsample mode {self.upsample_mode!r}")

    @property
    def planes_per_group(self):
        return self.planes // self.groups

    @property
    def out_planes_per_group(self):
        return self.supersample * self.planes_per_group

    @property
    def in_channels(self):
        return self.planes_per_group * 3 * self.views

    @property
    def out_channels(self):
        return self.out_planes_per_group * (self.views + 1) + 3


def layer_table(cfg: UNetConfig):
    """(name, c_in, c_out, stride) for every convolution, in forward order."""
    return [
        ("conv1", cfg.in_channels, 16, 1),
        ("conv2", 16, 32, 2),
        ("conv3", 32, 64, 2),
        ("conv4", 64, 128, 2),
        ("conv5", 128, 128, 1),
        ("conv6a", 128, 256, 1),
        ("conv6b", 256 + 64, 64, 1),
        ("conv7", 64 + 32, 32, 1),
        ("conv8", 32 + 16, 16, 1),
        ("conv9", 16, cfg.out_channels, 1),
    ]


@dataclass
class WeightStore:
    """Ordered name -> Tensor map; names and shapes are fixed by the config."""

    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def parameters(self):
        return list(self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def num_params(self):
        return sum(t.size for t in self.tensors.values())

    def set_requires_grad(self, flag):
        for t in self.tensors.values():
            t.requires_grad = flag

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        return WeightStore({k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                            for k, v in self.tensors.items()})


def init_weights(cfg: UNetConfig, seed=0, dtype=np.float32) -> WeightStore:
    """Uniform(+-sqrt(6/fan_in)) kernels, zero biases."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for name, c_in, c_out, _ in layer_table(cfg):
        bound = np.sqrt(6.0 / (c_in * 9))
        w = rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3))
        store.tensors[f"{name}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        store.tensors[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
    return store


def expected_shapes(cfg: UNetConfig):
    shapes = {}
    for name, c_in, c_out, _ in layer_table(cfg):
        shapes[f"{name}.weight"] = (c_out, c_in, 3, 3)
        shapes[f"{name}.bias"] = (c_out,)
    return shapes


def _check_weights(cfg, store):
    for name, shape in expected_shapes(cfg).items():
        if name not in store.tensors:
            raise WeightFormatError(f"missing weight record {name}")
        got = tuple(store.tensors[name].shape)
        if got != shape:
            raise WeightFormatError(f"{name}: expected shape {shape}, got {got}")


def _forward_batch(cfg: UNetConfig, weights: WeightStore, x: Tensor) -> Tensor:
    """U-Net on [N,C,H,W]; returns [N, out_channels, H, W]."""
    h, w = x.shape[-2:]
    if h % 8 or w % 8:
        raise ShapeError(f"spatial size {h}x{w} must be divisible by 8")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, config expects {cfg.in_channels}")

    def conv(name, inp, stride=1):
        return T.conv2d(inp, weights[f"{name}.weight"], weights[f"{name}.bias"], stride=stride)

    a1 = T.relu(conv("conv1", x))
    a2 = T.relu(conv("conv2", a1, stride=2))
    a3 = T.relu(conv("conv3", a2, stride=2))
    a4 = T.relu(conv("conv4", a3, stride=2))
    a5 = T.relu(conv("conv5", a4))
    a6 = T.relu(conv("conv6a", a5))
    u1 = T.upsample2x(a6, cfg.upsample_mode)
    a6b = T.relu(conv("conv6b", T.concat([u1, a3], axis=1)))
    u2 = T.upsample2x(a6b, cfg.upsample_mode)
    a7 = T.relu(conv("conv7", T.concat([u2, a2], axis=1)))
    u3 = T.upsample2x(a7, cfg.upsample_mode)
    a8 = T.relu(conv("conv8", T.concat([u3, a1], axis=1)))
    return conv("conv9", a8)


def unet_forward(cfg: UNetConfig, weights: WeightStore, group_input) -> NetHeadOutput:
    """Run the network on one group's [C,H,W] input."""
    x = group_input if isinstance(group_input, Tensor) else Tensor(group_input)
    if x.dtype != weights.dtype:
        x = Tensor(x.data.astype(weights.dtype), requires_grad=x.requires_grad)
    _check_weights(cfg, weights)
    out = _forward_batch(cfg, weights, x.reshape((1,) + x.shape))
    return NetHeadOutput(raw=out[0], num_views=cfg.views, planes=cfg.out_planes_per_group)


def run_groups(cfg: UNetConfig, weights: WeightStore, grouped, mode="sequential",
               threads=0):
    """Apply the shared-weight network to every group.

    mode "sequential" loops groups one by one; "threads" runs the same
    per-group forward concurrently (bit-identical results, order
    preserved); "batched" stacks groups along the batch axis for one pass
    per layer (float32 results may differ from sequential within BLAS
    rounding, ~1e-5).
    """
    data = grouped.data if isinstance(grouped, GroupedPsv) else np.asarray(grouped)
    if data.ndim != 4:
        raise ShapeError(f"grouped input must be [G,C,H,W], got shape {data.shape}")
    if data.shape[0] != cfg.groups:
        raise ShapeError(f"grouped input has {data.shape[0]} groups, config expects {cfg.groups}")
    if data.shape[1] != cfg.in_channels:
        raise ShapeError(f"grouped input has {data.shape[1]} channels, config expects {cfg.in_channels}")
    _check_weights(cfg, weights)

    if mode == "batched":
        x = Tensor(data.astype(weights.dtype, copy=False))
        out = _forward_batch(cfg, weights, x)
        return [NetHeadOutput(raw=out[g], num_views=cfg.views,
                              planes=cfg.out_planes_per_group)
                for g in range(cfg.groups)]
    if mode == "threads":
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads or None) as pool:
            return list(pool.map(lambda g: unet_forward(cfg, weights, g), data))
    if mode == "sequential":
        return [unet_forward(cfg, weights, g) for g in data]
    raise ValueError(f"unknown group execution mode {mode!r}")


# ---------------------------------------------------------------------------
# cost model


def flops_model(cfg: UNetConfig, height, width):
    """Analytic conv FLOPs (2*Cin*9*Cout + bias per output pixel) for all
    G groups at the given spatial size; matches the conv2d instrumentation."""
    sizes = {1: (height, width), 2: (height // 2, width // 2),
             4: (height // 4, width // 4), 8: (height // 8, width // 8)}
    at = {"conv1": 1, "conv2": 2, "conv3": 4, "conv4": 8, "conv5": 8,
          "conv6a": 8, "conv6b": 4, "conv7": 2, "conv8": 1, "conv9": 1}
    total = 0
    for name, c_in, c_out, _ in layer_table(cfg):
        h, w = sizes[at[name]]
        total += (2 * c_in * 9 + 1) * c_out * h * w
    return total * cfg.groups


def param_count(cfg: UNetConfig):
    return sum(c_out * c_in * 9 + c_out for _, c_in, c_out, _ in layer_table(cfg))


# ---------------------------------------------------------------------------
# weight file I/O


def save_weights(path, store: WeightStore, cfg: UNetConfig):
    dtype_flag = _DTYPE_FLAGS[np.dtype(store.dtype)]
    with open(path, "wb") as f:
        f.write(_FMPW_MAGIC)
        f.write(struct.pack("<I", _FMPW_VERSION))
        f.write(struct.pack("<IIII", cfg.planes, cfg.groups, cfg.supersample, cfg.views))
        f.write(struct.pack("<BB", _MODE_FLAGS[cfg.upsample_mode], dtype_flag))
        f.write(struct.pack("<I", len(store.tensors)))
        for name, t in store.tensors.items():
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t.data, dtype=f"<f{t.data.itemsize}").tobytes())


def load_weights(path, cfg: UNetConfig | None = None):
    """Read an FMPW file; returns (WeightStore, UNetConfig).

    If cfg is given, the file's config echo must match it; record names and
    shapes are always validated against the layer table.
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            if f.read(4) != _FMPW_MAGIC:
                raise WeightFormatError(f"{path}: not an FMPW weight file")
            (version,) = struct.unpack("<I", f.read(4))
            if version != _FMPW_VERSION:
                raise WeightFormatError(f"{path}: unsupported FMPW version {version}")
            d, g, s, v = struct.unpack("<IIII", f.read(16))
            mode_flag, dtype_flag = struct.unpack("<BB", f.read(2))
            file_cfg = UNetConfig(planes=d, groups=g, supersample=s, views=v,
                                  upsample_mode=_MODE_NAMES[mode_flag])
            dtype = np.dtype(_DTYPE_NAMES[dtype_flag])
            (n_records,) = struct.unpack("<I", f.read(4))
            store = WeightStore()
            for _ in range(n_records):
                (name_len,) = struct.unpack("<H", f.read(2))
                name = f.read(name_len).decode()
                (ndim,) = struct.unpack("<B", f.read(1))
                shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
                count = int(np.prod(shape)) if ndim else 1
                payload = f.read(count * dtype.itemsize)
                if len(payload) != count * dtype.itemsize:
                    raise WeightFormatError(f"{path}: truncated data for record {name}")
                data = np.frombuffer(payload, dtype=f"<f{dtype.itemsize}").reshape(shape)
                store.tensors[name] = Tensor(data.astype(dtype), requires_grad=True)
    except struct.error as exc:
        raise WeightFormatError(f"{path}: truncated or corrupt header ({exc})") from exc
    # shape validation against the expected config names the first bad layer
    _check_weights(cfg or file_cfg, store)
    if cfg is not None and cfg != file_cfg:
        raise WeightFormatError(f"{path}: file config {file_cfg} does not match expected {cfg}")
    return store, file_cfg
