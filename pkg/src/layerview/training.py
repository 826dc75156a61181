"""Image-supervised loss, sign-momentum optimizer, and the toy training loop.

The loss is mean L1 plus structural dissimilarity (1 - SSIM); a perceptual
embedding term is deliberately not implemented (it would need a pretrained
classifier) and its configured weight is recorded but inert. Training runs
on random patches: a crop is applied consistently across all views of a
scene by shifting every camera's principal point by the crop offset, which
leaves all warp geometry unchanged on the overlap.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .backbone import UNetConfig, WeightStore, init_weights
from .mpi import composite, predict_mpi
from .psv import make_schedule
from .scenes_io import SceneBundle
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LossConfig:
    use_l1: bool = True
    use_ssim: bool = True
    lambda_perceptual: float = 0.01   # recorded; term not implemented
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    dynamic_range: float = 1.0

    def __post_init__(self):
        if not (self.use_l1 or self.use_ssim):
            raise ValueError("loss needs at least one enabled term")


# ---------------------------------------------------------------------------
# SSIM / PSNR


def _gaussian_window(size, sigma, dtype):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g).astype(dtype)


def ssim(x, y, config: LossConfig | None = None) -> Tensor:
    """Mean local SSIM over valid (unpadded) Gaussian windows; differentiable.

    Inputs are [C,H,W] in [0, dynamic_range]; identical images give exactly
    1. Returned as a scalar Tensor.
    """
    config = config or LossConfig()
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")
    k = config.ssim_window
    if x.shape[-2] < k or x.shape[-1] < k:
        raise ShapeError(f"image {x.shape[-2]}x{x.shape[-1]} smaller than the {k}x{k} SSIM window")
    c1 = (0.01 * config.dynamic_range) ** 2
    c2 = (0.03 * config.dynamic_range) ** 2
    kernel = Tensor(_gaussian_window(k, config.ssim_sigma, x.dtype.type).reshape(1, 1, k, k))

    def filt(img):
        c = img.shape[0]
        return T.conv2d(img.reshape(c, 1, *img.shape[1:]), kernel, padding=0)

    mu_x = filt(x)
    mu_y = filt(y)
    xx = filt(x * x) - mu_x * mu_x
    yy = filt(y * y) - mu_y * mu_y
    xy = filt(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return (num / den).mean()


_perceptual_note_shown = False


def loss(target, prediction, config: LossConfig | None = None) -> Tensor:
    """mean-L1 + (1 - SSIM) between target and prediction (scalar Tensor)."""
    global _perceptual_note_shown
    config = config or LossConfig()
    if not _perceptual_note_shown:
        log.info("perceptual loss term disabled (weight %.3g recorded, no pretrained embedding available)",
                 config.lambda_perceptual)
        _perceptual_note_shown = True
    target = target if isinstance(target, Tensor) else Tensor(target)
    prediction = prediction if isinstance(prediction, Tensor) else Tensor(prediction)
    if target.shape != prediction.shape:
        raise ShapeError(f"loss inputs differ in shape: {target.shape} vs {prediction.shape}")
    total = None
    if config.use_l1:
        total = (target - prediction).abs().mean()
    if config.use_ssim:
        dssim = 1.0 - ssim(target, prediction, config)
        total = dssim if total is None else total + dssim
    return total


def psnr(a, b, cap=99.0):
    """10*log10(1/MSE) for images in [0,1]; identical images report `cap`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = np.mean((a - b) ** 2)
    if mse <= 0:
        return float(cap)
    return float(min(cap, 10.0 * np.log10(1.0 / mse)))


# ---------------------------------------------------------------------------
# Lion optimizer (sign of interpolated momentum, decoupled momentum update)


class Lion:
    """update = -lr * sign(beta1*m + (1-beta1)*g);  m <- beta2*m + (1-beta2)*g.

    No weight decay. Every touched element moves by exactly lr whenever the
    interpolated momentum is nonzero.
    """

    def __init__(self, params, lr=9e-5, beta1=0.99, beta2=0.90):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.momentum = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p, m in zip(self.params, self.momentum):
            if p.grad is None:
                continue
            g = p.grad
            if np.isnan(g).any():
                raise TrainingDivergedError("NaN gradient in optimizer step")
            p.data -= lr * np.sign(self.beta1 * m + (1.0 - self.beta1) * g)
            m *= self.beta2
            m += (1.0 - self.beta2) * g

    def zero_grad(self):
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# patch sampling


def sample_patch(bundle: SceneBundle, patch: int, rng) -> SceneBundle:
    """Random consistent crop of all views plus a random target view.

    All cameras share the crop offset, applied by shifting their principal
    points, so plane-sweep geometry on the cropped views matches the crop
    of the full-image geometry. patch must be a multiple of 8 (network
    constraint) and fit inside every view.
    """
    if patch % 8:
        raise ValueError(f"patch size must be a multiple of 8, got {patch}")
    h = min(cam.height for _, cam in bundle.sources)
    w = min(cam.width for _, cam in bundle.sources)
    if patch > min(h, w):
        raise ValueError(f"patch {patch} exceeds the smallest view {h}x{w}")
    du = int(rng.integers(0, w - patch + 1))
    dv = int(rng.integers(0, h - patch + 1))
    ti = int(rng.integers(0, len(bundle.targets)))

    def crop(img, cam):
        cropped = np.ascontiguousarray(img[:, dv:dv + patch, du:du + patch])
        return cropped, cam.shifted(du, dv).resized(patch, patch)

    sources = [crop(img, cam) for img, cam in bundle.sources]
    tcam, timg = bundle.targets[ti]
    timg_c, tcam_c = crop(timg, tcam) if timg is not None else (None, tcam.shifted(du, dv).resized(patch, patch))
    return SceneBundle(sources=sources, targets=[(tcam_c, timg_c)],
                       near=bundle.near, far=bundle.far, synthetic=bundle.synthetic)


# ---------------------------------------------------------------------------
# toy training loop


@dataclass
class TrainConfig:
    net: UNetConfig
    iters: int = 2000
    patch: int = 64
    lr: float = 9e-5
    beta1: float = 0.99
    beta2: float = 0.90
    decay_tail: float = 0.2       # final fraction of iterations at lr/decay_factor
    decay_factor: float = 10.0
    seed: int = 0
    eval_interval: int = 100
    dtype: str = "f32"            # "f64" for the determinism checks
    loss: LossConfig = field(default_factory=LossConfig)

    def numpy_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32


def train_toy(cfg: TrainConfig, scene_generator, iters=None, weights=None):
    """Train on patches from the generator; returns (weights, metric rows).

    Deterministic given cfg.seed and a deterministic generator. Rows are
    dicts {iter, loss, l1, ssim, psnr} sampled every eval_interval steps
    (and at the final step). Aborts with TrainingDivergedError on NaN loss.
    """
    iters = cfg.iters if iters is None else iters
    rng = np.random.default_rng(cfg.seed)
    if weights is None:
        weights = init_weights(cfg.net, seed=cfg.seed, dtype=cfg.numpy_dtype())
    optimizer = Lion(weights.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    rows = []
    window = []
    for i in range(iters):
        bundle = sample_patch(next(scene_generator), cfg.patch, rng)
        schedule = make_schedule(bundle.near, bundle.far, cfg.net.planes)
        mpi, _ = predict_mpi(bundle.view_images(), bundle.view_cameras(),
                             bundle.targets[0][0], schedule, cfg.net, weights,
                             group_mode="batched")
        rendered = composite(mpi)
        gt = Tensor(bundle.targets[0][1].astype(cfg.numpy_dtype()))
        step_loss = loss(gt, rendered, cfg.loss)
        value = step_loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} at iteration {i}")
        optimizer.zero_grad()
        step_loss.backward()
        lr = cfg.lr / cfg.decay_factor if i >= iters * (1.0 - cfg.decay_tail) else cfg.lr
        optimizer.step(lr=lr)
        window.append(value)
        if i % cfg.eval_interval == 0 or i == iters - 1:
            l1_v = float(np.mean(np.abs(gt.data - rendered.data)))
            ssim_v = float(ssim(gt.detach(), rendered.detach(), cfg.loss).item())
            rows.append({"iter": i, "loss": value, "l1": l1_v, "ssim": ssim_v,
                         "psnr": psnr(gt.data, np.clip(rendered.data, 0, 1)),
                         "loss_window": float(np.mean(window))})
            window = []
    return weights, rows


def evaluate_psnr(net_cfg: UNetConfig, weights: WeightStore, bundles, *,
                  group_mode="batched"):
    """Mean PSNR of composited renders against every target of every bundle."""
    values = []
    with T.no_grad():
        for bundle in bundles:
            schedule = make_schedule(bundle.near, bundle.far, net_cfg.planes)
            for tcam, timg in bundle.targets:
                if timg is None:
                    continue
                mpi, _ = predict_mpi(bundle.view_images(), bundle.view_cameras(),
                                     tcam, schedule, net_cfg, weights,
                                     group_mode=group_mode)
                rendered = np.clip(composite(mpi).data, 0.0, 1.0)
                values.append(psnr(timg, rendered))
    return float(np.mean(values))


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["iter", "loss", "l1", "ssim", "psnr"],
                                extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


def default_eval_bundles(seed, spec=None, count=4, skip=10_000):
    """Held-out bundles drawn far past any training index."""
    from .scenes_io import FamilySpec, generate_scene_family
    gen = generate_scene_family(seed + skip, spec or FamilySpec())
    return [next(gen) for _ in range(count)]
