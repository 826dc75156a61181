"""Scene ingestion/serialization and the synthetic ray-trace oracle.

Synthetic scenes are stacks of textured fronto-parallel rectangles (in the
frame of a reference camera). They admit an exact per-pixel renderer:
intersect each ray with each rectangle front to back and alpha-composite
analytically. Texture lookups go through the same bilinear kernel as image
warping, so the oracle and the pipeline resample identically.

scene.json schema (version 1):
  format, version, convention (documentation string), near, far,
  sources:  [{image: <file>, camera: {...}}, ...],
  targets:  [{image: <file> | null, camera: {...}}, ...],
  synthetic: optional generator spec for oracle-alpha rendering.
camera: {width, height, fx, fy, cx, cy, R: [9 row-major floats,
world-to-camera], t: [3 floats, meters]}.

Images: 8-bit PNG for ingestion, or ".fimg" raw float32 containers
(magic "FIMG", u32 version, u32 C/H/W, little-endian float32 data) for
lossless fixtures.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .geometry import CameraModel, GeometryError

CONVENTION = "x_cam = R @ x_world + t; pixel centers at integer coordinates; u = fx*x/z + cx"

_FIMG_MAGIC = b"FIMG"
_FIMG_VERSION = 1


class SceneFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# image files


def save_image(path, image):
    """Write [3,H,W] float image in [0,1]; format chosen by extension."""
    path = Path(path)
    image = np.asarray(image, dtype=np.float32)
    if path.suffix == ".fimg":
        with open(path, "wb") as f:
            f.write(_FIMG_MAGIC)
            f.write(struct.pack("<IIII", _FIMG_VERSION, *image.shape))
            f.write(image.astype("<f4").tobytes())
    elif path.suffix == ".png":
        arr = np.clip(image, 0.0, 1.0)
        arr = (arr * 255.0).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(path)
    else:
        raise SceneFormatError(f"unsupported image extension {path.suffix!r}")


def load_image(path):
    path = Path(path)
    if path.suffix == ".fimg":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != _FIMG_MAGIC:
                raise SceneFormatError(f"{path}: bad magic {magic!r}")
            version, c, h, w = struct.unpack("<IIII", f.read(16))
            if version != _FIMG_VERSION:
                raise SceneFormatError(f"{path}: unsupported fimg version {version}")
            data = np.frombuffer(f.read(), dtype="<f4")
        if data.size != c * h * w:
            raise SceneFormatError(f"{path}: truncated fimg payload")
        return data.reshape(c, h, w).astype(np.float32)
    if path.suffix == ".png":
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
        return np.ascontiguousarray(arr.transpose(2, 0, 1))
    raise SceneFormatError(f"unsupported image extension {path.suffix!r}")


# ---------------------------------------------------------------------------
# synthetic scenes


def checker_texture(rng, size, cell, colors=None):
    """Procedural checkerboard [3,size,size]."""
    if colors is None:
        colors = rng.random((2, 3)).astype(np.float32)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    mask = ((yy // cell + xx // cell) % 2).astype(np.float32)
    tex = colors[0][:, None, None] * (1 - mask) + colors[1][:, None, None] * mask
    return tex.astype(np.float32)


def noise_texture(rng, size, cell):
    """Smooth value noise: a coarse random grid linearly upsampled."""
    coarse = rng.random((3, max(2, size // cell), max(2, size // cell))).astype(np.float32)
    ch, cw = coarse.shape[1:]
    ys = np.linspace(0, ch - 1, size)
    xs = np.linspace(0, cw - 1, size)
    y0 = np.clip(np.floor(ys).astype(int), 0, ch - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, cw - 2)
    fy = (ys - y0).astype(np.float32)[None, :, None]
    fx = (xs - x0).astype(np.float32)[None, None, :]
    a = coarse[:, y0][:, :, x0]
    b = coarse[:, y0][:, :, x0 + 1]
    c = coarse[:, y0 + 1][:, :, x0]
    d = coarse[:, y0 + 1][:, :, x0 + 1]
    top = a + fx * (b - a)
    bot = c + fx * (d - c)
    return (top + fy * (bot - top)).astype(np.float32)


def make_texture(spec):
    """Regenerate a texture from its JSON-serializable spec."""
    rng = np.random.default_rng(spec["seed"])
    if spec["kind"] == "checker":
        return checker_texture(rng, spec["size"], spec["cell"])
    if spec["kind"] == "noise":
        return noise_texture(rng, spec["size"], spec["cell"])
    raise SceneFormatError(f"unknown texture kind {spec['kind']!r}")


@dataclass
class Rect:
    """Textured fronto-parallel rectangle at z = depth in the reference frame.

    (x0,y0)-(x1,y1) are meters in the reference camera's frame at that
    depth; texture texel centers map linearly onto the extent.
    """

    depth: float
    x0: float
    y0: float
    x1: float
    y1: float
    opacity: float
    texture_spec: dict
    texture: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.depth <= 0:
            raise SceneFormatError(f"rectangle depth must be positive, got {self.depth}")
        if not 0.0 <= self.opacity <= 1.0:
            raise SceneFormatError(f"opacity must be in [0,1], got {self.opacity}")
        if self.texture is None:
            self.texture = make_texture(self.texture_spec)

    def to_json(self):
        return {"depth": self.depth, "x0": self.x0, "y0": self.y0,
                "x1": self.x1, "y1": self.y1, "opacity": self.opacity,
                "texture": self.texture_spec}

    @staticmethod
    def from_json(d):
        return Rect(depth=d["depth"], x0=d["x0"], y0=d["y0"], x1=d["x1"], y1=d["y1"],
                    opacity=d["opacity"], texture_spec=d["texture"])


@dataclass
class SyntheticScene:
    """Rectangles sorted nearest-first, anchored at a reference camera."""

    reference: CameraModel
    rects: list

    def __post_init__(self):
        self.rects = sorted(self.rects, key=lambda r: r.depth)

    def to_json(self):
        return {"reference": camera_to_json(self.reference),
                "rects": [r.to_json() for r in self.rects]}

    @staticmethod
    def from_json(d):
        return SyntheticScene(reference=camera_from_json(d["reference"]),
                              rects=[Rect.from_json(r) for r in d["rects"]])


def _rect_hit(rect: Rect, camera: CameraModel, reference: CameraModel):
    """Ray-rectangle intersection for every camera pixel.

    Returns (tex_u, tex_v, hit) where (tex_u, tex_v) are texel coordinates
    of the intersection and hit flags rays that meet the rectangle in front
    of the camera.
    """
    h, w = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays_cam = np.stack([(uu - camera.cx) / camera.fx,
                         (vv - camera.cy) / camera.fy,
                         np.ones_like(uu)])                      # [3,H,W]
    r_cam_to_ref = reference.R @ camera.R.T
    origin = reference.R @ camera.center_world() + reference.t    # camera center in ref frame
    dirs = np.einsum("ij,jhw->ihw", r_cam_to_ref, rays_cam)
    dz = dirs[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = (rect.depth - origin[2]) / dz
    px = origin[0] + lam * dirs[0]
    py = origin[1] + lam * dirs[1]
    hit = (dz != 0) & (lam > 0) & \
          (px >= rect.x0) & (px <= rect.x1) & (py >= rect.y0) & (py <= rect.y1)
    th, tw = rect.texture.shape[1:]
    tex_u = (px - rect.x0) / (rect.x1 - rect.x0) * (tw - 1)
    tex_v = (py - rect.y0) / (rect.y1 - rect.y0) * (th - 1)
    return tex_u, tex_v, hit


def raytrace(scene: SyntheticScene, camera: CameraModel):
    """Exact front-to-back over-composite of the scene's rectangles.

    Per pixel, each rectangle contributes opacity * texture color weighted
    by the transmittance of everything nearer; misses contribute nothing.
    Returns [3,H,W] float32 (black background).
    """
    h, w = camera.height, camera.width
    out = np.zeros((3, h, w), dtype=np.float32)
    transmittance = np.ones((h, w), dtype=np.float32)
    for rect in scene.rects:
        tex_u, tex_v, hit = _rect_hit(rect, camera, scene.reference)
        color = np.empty((3, h, w), dtype=np.float32)
        _kernels.sample_grid(rect.texture,
                             np.ascontiguousarray(tex_u),
                             np.ascontiguousarray(tex_v),
                             np.ascontiguousarray(hit), color)
        alpha = rect.opacity * hit.astype(np.float32)
        out += color * (alpha * transmittance)
        transmittance *= 1.0 - alpha
    return out


def oracle_alpha(scene: SyntheticScene, camera: CameraModel, schedule):
    """Ground-truth per-plane opacity [D,1,H,W] for an MPI at `camera`.

    Each rectangle lands on the schedule plane nearest to it in disparity
    (ties to the nearer plane); its alpha there is its silhouette times its
    opacity. Rectangles mapping to the same plane composite front-to-back.
    """
    depths = schedule.depths
    with np.errstate(divide="ignore"):
        plane_disp = 1.0 / depths
    h, w = camera.height, camera.width
    alpha = np.zeros((len(depths), 1, h, w), dtype=np.float32)
    for rect in scene.rects:
        gaps = np.abs(plane_disp - 1.0 / rect.depth)
        best = np.flatnonzero(gaps == gaps.min())[0]  # tie -> nearer plane (lower index)
        _, _, hit = _rect_hit(rect, camera, scene.reference)
        contrib = rect.opacity * hit.astype(np.float32)
        prev = alpha[best, 0]
        alpha[best, 0] = 1.0 - (1.0 - prev) * (1.0 - contrib)
    return alpha


# ---------------------------------------------------------------------------
# scene bundles and directory format


@dataclass
class SceneBundle:
    """Input views with cameras, plus target views for supervision."""

    sources: list          # [(image [3,H,W] float32, CameraModel), ...]
    targets: list          # [(CameraModel, image | None), ...]
    near: float
    far: float
    synthetic: SyntheticScene | None = None

    def __post_init__(self):
        if not self.sources:
            raise SceneFormatError("a scene needs at least one source view")
        for img, cam in self.sources:
            if img.shape != (3, cam.height, cam.width):
                raise SceneFormatError(f"source image shape {img.shape} does not match camera {cam.height}x{cam.width}")
        for cam, img in self.targets:
            if img is not None and img.shape != (3, cam.height, cam.width):
                raise SceneFormatError(f"target image shape {img.shape} does not match camera {cam.height}x{cam.width}")

    @property
    def num_views(self):
        return len(self.sources)

    def view_images(self):
        return [img for img, _ in self.sources]

    def view_cameras(self):
        return [cam for _, cam in self.sources]


def camera_to_json(cam: CameraModel):
    return {"width": cam.width, "height": cam.height,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "R": [float(x) for x in cam.R.reshape(-1)],
            "t": [float(x) for x in cam.t]}


def camera_from_json(d):
    try:
        return CameraModel(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                           width=d["width"], height=d["height"],
                           R=np.array(d["R"], dtype=np.float64).reshape(3, 3),
                           t=np.array(d["t"], dtype=np.float64)).check_principal_point()
    except GeometryError as exc:
        raise SceneFormatError(f"invalid camera: {exc}") from exc


def save_scene_dir(path, bundle: SceneBundle, image_format="fimg"):
    """Write scene.json plus one image file per view."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    doc = {"format": "layerview-scene", "version": 1, "convention": CONVENTION,
           "near": bundle.near, "far": bundle.far, "sources": [], "targets": []}
    for i, (img, cam) in enumerate(bundle.sources):
        name = f"source_{i:02d}.{image_format}"
        save_image(path / name, img)
        doc["sources"].append({"image": name, "camera": camera_to_json(cam)})
    for i, (cam, img) in enumerate(bundle.targets):
        name = None
        if img is not None:
            name = f"target_{i:02d}.{image_format}"
            save_image(path / name, img)
        doc["targets"].append({"image": name, "camera": camera_to_json(cam)})
    if bundle.synthetic is not None:
        doc["synthetic"] = bundle.synthetic.to_json()
    with open(path / "scene.json", "w") as f:
        json.dump(doc, f, indent=1)


def load_scene_dir(path) -> SceneBundle:
    path = Path(path)
    manifest = path / "scene.json"
    if not manifest.is_file():
        raise SceneFormatError(f"{path} has no scene.json")
    try:
        doc = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{manifest}: invalid JSON ({exc})") from exc
    if doc.get("format") != "layerview-scene":
        raise SceneFormatError(f"{manifest}: not a layerview scene file")
    sources = [(load_image(path / s["image"]), camera_from_json(s["camera"]))
               for s in doc["sources"]]
    targets = [(camera_from_json(t["camera"]),
                load_image(path / t["image"]) if t.get("image") else None)
               for t in doc["targets"]]
    synthetic = SyntheticScene.from_json(doc["synthetic"]) if "synthetic" in doc else None
    return SceneBundle(sources=sources, targets=targets,
                       near=doc["near"], far=doc["far"], synthetic=synthetic)


# ---------------------------------------------------------------------------
# scene family generator


@dataclass
class FamilySpec:
    """Camera rig and scene statistics for the synthetic family.

    Texture cell sizes are kept small enough that sub-pixel misalignment
    (e.g. from depth-plane quantization) is visible in image metrics.
    """

    width: int = 64
    height: int = 64
    num_views: int = 4
    rig_width: float = 0.40      # meters
    rig_height: float = 0.25
    fov_deg: float = 50.0
    near: float = 1.0
    far: float = 20.0
    num_targets: int = 3
    min_rects: int = 3
    max_rects: int = 5
    checker_fraction: float = 0.5
    min_cell: int = 4
    max_cell: int = 12


def _rig_cameras(spec: FamilySpec):
    fx = 0.5 * spec.width / np.tan(np.radians(spec.fov_deg) / 2)
    cx, cy = (spec.width - 1) / 2.0, (spec.height - 1) / 2.0
    hw, hh = spec.rig_width / 2, spec.rig_height / 2
    corners = [(-hw, -hh), (hw, -hh), (-hw, hh), (hw, hh)]
    cams = []
    for i in range(spec.num_views):
        x, y = corners[i % 4]
        if i >= 4:  # extra views spiral inwards
            x, y = x * (0.5 ** (i // 4)), y * (0.5 ** (i // 4))
        # R = I so t = -center
        cams.append(CameraModel(fx, fx, cx, cy, spec.width, spec.height,
                                np.eye(3), -np.array([x, y, 0.0])))
    return cams, fx


def _random_scene(rng, spec: FamilySpec, reference: CameraModel, fx):
    tan_half = 0.5 * spec.width / fx
    rects = []

    def cell():
        return int(rng.integers(spec.min_cell, spec.max_cell + 1))

    # opaque background covering every frustum
    bg_depth = rng.uniform(spec.far * 0.3, spec.far * 0.8)
    half = (tan_half * bg_depth + spec.rig_width) * 1.4
    rects.append(Rect(depth=bg_depth, x0=-half, y0=-half, x1=half, y1=half, opacity=1.0,
                      texture_spec={"kind": "noise", "seed": int(rng.integers(1 << 31)),
                                    "size": 128, "cell": cell()}))
    for _ in range(int(rng.integers(spec.min_rects - 1, spec.max_rects))):
        # foreground depth drawn uniformly in disparity, clear of both limits
        disp = rng.uniform(1 / (bg_depth * 0.85), 1 / (spec.near * 1.15))
        depth = 1.0 / disp
        span = tan_half * depth
        size = rng.uniform(0.3, 0.9) * span
        cx_m = rng.uniform(-0.6, 0.6) * span
        cy_m = rng.uniform(-0.6, 0.6) * span
        kind = "checker" if rng.random() < spec.checker_fraction else "noise"
        opacity = 1.0 if rng.random() < 0.8 else float(rng.uniform(0.5, 0.9))
        rects.append(Rect(depth=depth, x0=cx_m - size, y0=cy_m - size,
                          x1=cx_m + size, y1=cy_m + size, opacity=opacity,
                          texture_spec={"kind": kind, "seed": int(rng.integers(1 << 31)),
                                        "size": 96, "cell": cell()}))
    return SyntheticScene(reference=reference, rects=rects)


def scene_pool(seed, spec: FamilySpec | None = None, size=256):
    """Pre-generated finite scene set, cycled as an infinite iterator.

    Ray-tracing scenes up front keeps it out of the training step; patch
    and target sampling still randomize every iteration. Deterministic for
    a given (seed, spec, size).
    """
    import itertools

    gen = generate_scene_family(seed, spec)
    return itertools.cycle([next(gen) for _ in range(size)])


def generate_scene_family(seed, spec: FamilySpec | None = None):
    """Deterministic infinite iterator of ray-traced SceneBundles."""
    spec = spec or FamilySpec()
    cams, fx = _rig_cameras(spec)
    reference = CameraModel(fx, fx, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0,
                            spec.width, spec.height, np.eye(3), np.zeros(3))
    index = 0
    while True:
        rng = np.random.default_rng([seed, index])
        scene = _random_scene(rng, spec, reference, fx)
        sources = [(raytrace(scene, cam), cam) for cam in cams]
        targets = []
        for _ in range(spec.num_targets):
            x = rng.uniform(-spec.rig_width / 2, spec.rig_width / 2)
            y = rng.uniform(-spec.rig_height / 2, spec.rig_height / 2)
            cam = CameraModel(fx, fx, reference.cx, reference.cy,
                              spec.width, spec.height, np.eye(3), -np.array([x, y, 0.0]))
            targets.append((cam, raytrace(scene, cam)))
        yield SceneBundle(sources=sources, targets=targets,
                          near=spec.near, far=spec.far, synthetic=scene)
        index += 1
