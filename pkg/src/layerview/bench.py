"""Benchmark harness: timing runs, linear-scaling fits, CSV and SVG output.

Timing protocol: 3 warm-up runs, then `repeats` timed runs (default 30,
minimum 10 for reported rows); mean and population std over the timed
runs, default float32, no auto-tuning. Reports carry an environment
fingerprint (library versions, CPU count, thread settings) but no
timestamps, so outputs are deterministic given the measured numbers.
"""

from __future__ import annotations

import os
import platform
import sys
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import backbone, psv as psv_mod, tensor as T
from .geometry import CameraModel
from .psv import StageTimings, build_psv, group, make_schedule

CSV_FIELDS = ["operation", "D", "G", "S", "V", "H", "W", "repeats",
              "mean_ms", "std_ms", "mapping_ms", "coords_ms", "sampling_ms",
              "network_ms", "composite_ms", "flops_measured", "flops_model"]


@dataclass
class BenchRow:
    operation: str
    D: int = 0
    G: int = 0
    S: int = 0
    V: int = 0
    H: int = 0
    W: int = 0
    repeats: int = 0
    mean_ms: float = 0.0
    std_ms: float = 0.0
    mapping_ms: float = 0.0
    coords_ms: float = 0.0
    sampling_ms: float = 0.0
    network_ms: float = 0.0
    composite_ms: float = 0.0
    flops_measured: int = 0
    flops_model: int = 0


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    environment: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w") as f:
            for key in sorted(self.environment):
                f.write(f"# {key}={self.environment[key]}\n")
            for name, fit in sorted(self.fits.items()):
                f.write(f"# fit_{name}: slope_ms={fit['slope']:.6f} intercept_ms={fit['intercept']:.6f} r2={fit['r2']:.6f}\n")
            f.write(",".join(CSV_FIELDS) + "\n")
            for row in self.rows:
                d = asdict(row)
                f.write(",".join(_fmt(d[k]) for k in CSV_FIELDS) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def environment_fingerprint(threads=0):
    import numba
    return {
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "numba": numba.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "worker_threads": threads,
        "blas_threads": os.environ.get("OPENBLAS_NUM_THREADS", "default"),
        "precision": "f32",
    }


def measure(fn, repeats, warmup=3):
    """(mean_ms, std_ms, per-run ms list) over `repeats` after `warmup` runs."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1000.0)
    arr = np.asarray(times)
    return float(arr.mean()), float(arr.std()), times


def linear_fit(x, y):
    """Least-squares line fit with coefficient of determination."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2}


# ---------------------------------------------------------------------------
# benchmark camera rig (fixed, deterministic)


def _rotation(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    cc = 1 - c
    return np.array([[c + x * x * cc, x * y * cc - z * s, x * z * cc + y * s],
                     [y * x * cc + z * s, c + y * y * cc, y * z * cc - x * s],
                     [z * x * cc - y * s, z * y * cc + x * s, c + z * z * cc]])


def bench_cameras(num_views, height, width, seed=7):
    """Target at the origin plus num_views slightly rotated/offset sources."""
    rng = np.random.default_rng(seed)
    fx = 0.9 * width
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    target = CameraModel(fx, fx, cx, cy, width, height, np.eye(3), np.zeros(3))
    sources = []
    for _ in range(num_views):
        rot = _rotation(rng.normal(size=3), rng.uniform(-0.05, 0.05))
        center = rng.uniform(-0.25, 0.25, size=3) * np.array([1.0, 1.0, 0.2])
        sources.append(CameraModel(fx, fx, cx, cy, width, height, rot, -rot @ center))
    return target, sources


def _bench_views(num_views, height, width, seed=11):
    rng = np.random.default_rng(seed)
    return [rng.random((3, height, width), dtype=np.float32) for _ in range(num_views)]


# ---------------------------------------------------------------------------
# benchmarks


def bench_psv(d_list, v_list, height, width, repeats=30, threads=0,
              near=1.0, far=100.0, views_for_planes=4, planes_for_views=32):
    """Sweep-volume build time over plane count and view count.

    Produces one row per configuration plus least-squares fits of mean
    build time against D (at views_for_planes views) and against V (at
    planes_for_views planes).
    """
    report = BenchReport(environment=environment_fingerprint(threads))
    max_v = max(max(v_list, default=1), views_for_planes)
    target, sources = bench_cameras(max_v, height, width)
    views = _bench_views(max_v, height, width)

    def run_config(d, v):
        schedule = make_schedule(near, far, d)
        timings = StageTimings()

        def once():
            build_psv(views[:v], sources[:v], target, schedule,
                      timings=timings, threads=threads)

        mean, std, _ = measure(once, repeats)
        total_runs = repeats + 3
        return BenchRow(operation="build_psv", D=d, G=0, S=1, V=v, H=height,
                        W=width, repeats=repeats, mean_ms=mean, std_ms=std,
                        mapping_ms=timings.mapping / total_runs * 1000,
                        coords_ms=timings.coords / total_runs * 1000,
                        sampling_ms=timings.sampling / total_runs * 1000)

    d_rows = [run_config(d, views_for_planes) for d in d_list]
    v_rows = [run_config(planes_for_views, v) for v in v_list]
    report.rows = d_rows + v_rows
    if len(d_rows) >= 2:
        report.fits["time_vs_planes"] = linear_fit([r.D for r in d_rows],
                                                   [r.mean_ms for r in d_rows])
    if len(v_rows) >= 2:
        report.fits["time_vs_views"] = linear_fit([r.V for r in v_rows],
                                                  [r.mean_ms for r in v_rows])
    return report


def bench_grouping(planes, g_list, height, width, views=4, supersample=1,
                   repeats=10, seed=0, parallel_groups=0):
    """Network latency and FLOPs per group count.

    parallel_groups=0 runs groups sequentially (the latency-trend
    protocol); N > 0 uses an N-thread pool over groups.
    """
    report = BenchReport(environment=environment_fingerprint(parallel_groups))
    report.environment["parallel_groups"] = parallel_groups
    mode = "sequential" if parallel_groups == 0 else "threads"
    rng = np.random.default_rng(seed)
    for g in sorted(g_list):
        cfg = backbone.UNetConfig(planes=planes, groups=g, supersample=supersample,
                                  views=views)
        weights = backbone.init_weights(cfg, seed=seed)
        data = rng.random((g, cfg.in_channels, height, width), dtype=np.float32)

        T.flops.reset()
        T.flops.enabled = True
        with T.no_grad():
            backbone.run_groups(cfg, weights, data, mode="sequential")
        T.flops.enabled = False
        measured = T.flops.count

        def once():
            with T.no_grad():
                backbone.run_groups(cfg, weights, data, mode=mode,
                                    threads=parallel_groups)

        mean, std, _ = measure(once, repeats)
        report.rows.append(BenchRow(
            operation="grouped_forward", D=planes, G=g, S=supersample, V=views,
            H=height, W=width, repeats=repeats, mean_ms=mean, std_ms=std,
            network_ms=mean, flops_measured=measured,
            flops_model=backbone.flops_model(cfg, height, width)))
    return report


def bench_supersample(d_list, s_list, height, width, views=4, repeats=10,
                      threads=0, near=1.0, far=100.0):
    """Sweep-build cost of (D, S) pipelines with matching output plane counts.

    Pairs d_list and s_list elementwise; every pair also records the
    network parameter count so equal-output configurations can be compared
    (they differ only in the final layer).
    """
    if len(d_list) != len(s_list):
        raise ValueError("d_list and s_list must pair up")
    report = BenchReport(environment=environment_fingerprint(threads))
    target, sources = bench_cameras(views, height, width)
    view_imgs = _bench_views(views, height, width)
    for d, s in zip(d_list, s_list):
        schedule = make_schedule(near, far, d)
        timings = StageTimings()

        def once():
            build_psv(view_imgs, sources, target, schedule,
                      timings=timings, threads=threads)

        mean, std, _ = measure(once, repeats)
        cfg = backbone.UNetConfig(planes=d, groups=max(1, d // 2),
                                  supersample=s, views=views)
        report.rows.append(BenchRow(
            operation="psv_for_supersample", D=d, G=cfg.groups, S=s, V=views,
            H=height, W=width, repeats=repeats, mean_ms=mean, std_ms=std,
            flops_model=backbone.param_count(cfg)))
    return report


# ---------------------------------------------------------------------------
# minimal deterministic SVG plotting


def write_svg_plot(path, title, xlabel, ylabel, series, size=(640, 420)):
    """Line plot of {label: (xs, ys)} as a small standalone SVG."""
    w, h = size
    ml, mr, mt, mb = 70, 20, 40, 50
    pw, ph = w - ml - mr, h - mt - mb
    all_x = [x for xs, _ in series.values() for x in xs]
    all_y = [y for _, ys in series.values() for y in ys]
    x0, x1 = min(all_x), max(all_x)
    y0, y1 = min(all_y), max(all_y)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    y0 = min(y0, 0.0)

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<text x="{w/2:.1f}" y="22" text-anchor="middle" font-size="15" font-family="sans-serif">{title}</text>',
             f'<line x1="{ml}" y1="{mt+ph}" x2="{ml+pw}" y2="{mt+ph}" stroke="black"/>',
             f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt+ph}" stroke="black"/>',
             f'<text x="{ml+pw/2:.1f}" y="{h-12}" text-anchor="middle" font-size="12" font-family="sans-serif">{xlabel}</text>',
             f'<text x="16" y="{mt+ph/2:.1f}" text-anchor="middle" font-size="12" font-family="sans-serif" transform="rotate(-90 16 {mt+ph/2:.1f})">{ylabel}</text>']
    for i in range(5):
        xv = x0 + (x1 - x0) * i / 4
        yv = y0 + (y1 - y0) * i / 4
        parts.append(f'<text x="{sx(xv):.1f}" y="{mt+ph+16}" text-anchor="middle" font-size="10" font-family="sans-serif">{xv:g}</text>')
        parts.append(f'<text x="{ml-6}" y="{sy(yv)+3:.1f}" text-anchor="end" font-size="10" font-family="sans-serif">{yv:.3g}</text>')
        parts.append(f'<line x1="{ml}" y1="{sy(yv):.1f}" x2="{ml+pw}" y2="{sy(yv):.1f}" stroke="#dddddd"/>')
    for idx, (label, (xs, ys)) in enumerate(series.items()):
        color = colors[idx % len(colors)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}"/>')
        parts.append(f'<text x="{ml+pw-8}" y="{mt+16+14*idx}" text-anchor="end" font-size="11" font-family="sans-serif" fill="{color}">{label}</text>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")
