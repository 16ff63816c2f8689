"""Analytic ground truth: SDF scenes with known motion, multi-view renders, meshes.

Scenes live in the unit cube.  Each part of a scene is a primitive tree with
its own closed-form trajectory; the scene SDF at frame t is the union of the
parts, each evaluated at its inverse-warped point.

On-disk layout written by :func:`generate_dataset`::

    cameras.json            {"cameras": [{fx, fy, cx, cy, width, height,
                             world_from_camera (4x4 row-major)}, ...]}
    bounds.json             {"min": [x, y, z], "max": [x, y, z]}
    scene.json              {"scene", "frames", "cameras", "size", "seed"}
    frames/<t>/rgb_<c>.png  8-bit RGB, black background
    frames/<t>/mask_<c>.png 8-bit, 255 where the centre ray hits the object
    gt/mesh_<t>.obj         marching cubes of the analytic SDF on a 128^3 grid
    warp_<t>.json           {"frame", "parts": [{center, translation, angle_rad,
                             ramp_inner, ramp_outer}]} per scene part
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import TriangleMesh, marching_cubes, read_obj, sample_sdf_grid, write_obj
from .renderer import Camera, intersect_unit_cube

GT_RESOLUTION = 128
TRACE_EPS = 1e-5
TRACE_MAX_STEPS = 256


# ---------------------------------------------------------------- primitives


@dataclass
class Sphere:
    center: tuple
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass
class Box:
    center: tuple
    half_extents: tuple

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        return outside + np.minimum(np.max(q, axis=-1), 0.0)


@dataclass
class Capsule:
    a: tuple
    b: tuple
    radius: float

    def sdf(self, p: np.ndarray) -> np.ndarray:
        a, b = np.asarray(self.a), np.asarray(self.b)
        pa, ba = p - a, b - a
        h = np.clip((pa @ ba) / (ba @ ba), 0.0, 1.0)
        return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - self.radius


@dataclass
class Union:
    children: list

    def sdf(self, p):
        return np.min([c.sdf(p) for c in self.children], axis=0)


@dataclass
class Subtract:
    base: object
    cut: object

    def sdf(self, p):
        return np.maximum(self.base.sdf(p), -self.cut.sdf(p))


# ---------------------------------------------------------------- motion


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


@dataclass
class Warp:
    """Frame-t pose of one part: swirl about the vertical axis through ``center``,
    then translation.

    The swirl angle is ``angle * ramp(r)`` where r is the horizontal distance to
    the axis and ramp rises smoothly from 0 at ``ramp_inner`` to 1 at
    ``ramp_outer``.  Swirling preserves r and z, so the inverse is the same
    swirl with the opposite angle.  ``ramp_outer <= ramp_inner`` means a rigid
    rotation.
    """

    center: tuple = (0.5, 0.5, 0.5)
    translation: tuple = (0.0, 0.0, 0.0)
    angle: float = 0.0
    ramp_inner: float = 0.0
    ramp_outer: float = 0.0

    def _angles(self, rel: np.ndarray, sign: float) -> np.ndarray:
        r = np.hypot(rel[..., 0], rel[..., 1])
        if self.ramp_outer <= self.ramp_inner:
            ramp = np.ones_like(r)
        else:
            ramp = _smoothstep((r - self.ramp_inner) / (self.ramp_outer - self.ramp_inner))
        return sign * self.angle * ramp

    @staticmethod
    def _rotate(rel, ang):
        c, s = np.cos(ang), np.sin(ang)
        out = rel.copy()
        out[..., 0] = c * rel[..., 0] - s * rel[..., 1]
        out[..., 1] = s * rel[..., 0] + c * rel[..., 1]
        return out

    @property
    def is_identity(self) -> bool:
        return self.angle == 0.0 and not any(self.translation)

    def forward(self, x0: np.ndarray) -> np.ndarray:
        """Canonical (frame 0) point -> frame-t point."""
        if self.is_identity:
            return np.array(x0, dtype=np.float64)
        rel = x0 - np.asarray(self.center)
        return self._rotate(rel, self._angles(rel, 1.0)) + np.asarray(self.center) + np.asarray(
            self.translation)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        """Frame-t point -> canonical point."""
        if self.is_identity:
            return np.array(x, dtype=np.float64)
        rel = x - np.asarray(self.center) - np.asarray(self.translation)
        return self._rotate(rel, self._angles(rel, -1.0)) + np.asarray(self.center)

    def lipschitz_bound(self) -> float:
        # |d angle / d r| * r bounds the shear of the swirl
        if self.ramp_outer <= self.ramp_inner or self.angle == 0.0:
            return 1.0
        width = self.ramp_outer - self.ramp_inner
        return 1.0 + abs(self.angle) * 1.5 / width * self.ramp_outer

    def to_dict(self) -> dict:
        return {"center": list(self.center), "translation": list(self.translation),
                "angle_rad": self.angle, "ramp_inner": self.ramp_inner,
                "ramp_outer": self.ramp_outer}

    @classmethod
    def from_dict(cls, d: dict) -> "Warp":
        return cls(tuple(d["center"]), tuple(d["translation"]), d["angle_rad"], d["ramp_inner"],
                   d["ramp_outer"])


@dataclass
class Part:
    shape: object
    trajectory: list                # one Warp per frame
    albedo_a: tuple = (0.85, 0.55, 0.25)
    albedo_b: tuple = (0.25, 0.45, 0.8)
    period: float = 0.12

    def warp(self, t: int) -> Warp:
        return self.trajectory[t] if t < len(self.trajectory) else self.trajectory[-1]

    def albedo(self, x0: np.ndarray) -> np.ndarray:
        # soft 3-D checker in the canonical frame, so texture moves with the part
        k = 2.0 * math.pi / self.period
        pat = np.sin(k * x0[..., 0]) * np.sin(k * x0[..., 1]) * np.sin(k * x0[..., 2])
        mix = 0.5 + 0.5 * np.tanh(3.0 * pat)
        a, b = np.asarray(self.albedo_a), np.asarray(self.albedo_b)
        return a + mix[..., None] * (b - a)


@dataclass
class AnalyticScene:
    name: str
    parts: list
    num_frames: int
    lights: list = field(default_factory=lambda: [((0.6, -0.4, 0.7), 0.75), ((-0.7, 0.5, 0.2), 0.35)])
    ambient: float = 0.25

    def sdf(self, t: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.min([p.shape.sdf(p.warp(t).inverse(x)) for p in self.parts], axis=0)

    def closest_part(self, t: int, x: np.ndarray) -> np.ndarray:
        vals = np.stack([p.shape.sdf(p.warp(t).inverse(x)) for p in self.parts])
        return np.argmin(vals, axis=0)

    def albedo(self, t: int, x: np.ndarray) -> np.ndarray:
        owner = self.closest_part(t, x)
        out = np.zeros(x.shape[:-1] + (3,))
        for k, p in enumerate(self.parts):
            sel = owner == k
            if np.any(sel):
                out[sel] = p.albedo(p.warp(t).inverse(x[sel]))
        return out

    def lipschitz_bound(self, t: int) -> float:
        return max(p.warp(t).lipschitz_bound() for p in self.parts)

    def warps(self, t: int) -> list:
        return [p.warp(t) for p in self.parts]


def analytic_sdf(scene: AnalyticScene, t: int, x) -> np.ndarray:
    return scene.sdf(t, np.asarray(x, dtype=np.float64))


def blob_walk(num_frames: int = 5, topology_change: bool = False) -> AnalyticScene:
    """Sphere body with a capsule arm that walks 0.15 along +y while the arm bends +-15 deg.

    The topology variant adds a small sphere fused to the top of the body that
    lifts off and is fully detached from frame 3 on.
    """
    body_c = (0.42, 0.42, 0.5)
    body = Union([Sphere(body_c, 0.17), Capsule((0.48, 0.42, 0.5), (0.72, 0.42, 0.5), 0.065)])
    steps = max(num_frames - 1, 1)
    traj = []
    for t in range(num_frames):
        shift = 0.15 * t / steps
        angle = math.radians(15.0) * math.sin(2.0 * math.pi * t / steps)
        traj.append(Warp(body_c, (0.0, shift, 0.0), angle, 0.08, 0.28))
    parts = [Part(body, traj)]
    if topology_change:
        lift = [0.0, 0.03, 0.06, 0.12, 0.16]
        bud_traj = []
        for t in range(num_frames):
            dz = lift[t] if t < len(lift) else lift[-1] + 0.02 * (t - len(lift) + 1)
            bud_traj.append(Warp((0.42, 0.42, 0.66), (0.0, traj[t].translation[1], dz)))
        parts.append(Part(Sphere((0.42, 0.42, 0.66), 0.08), bud_traj,
                          albedo_a=(0.9, 0.8, 0.3), albedo_b=(0.3, 0.75, 0.35)))
    return AnalyticScene("blob-walk-topo" if topology_change else "blob-walk", parts, num_frames)


def rigid_spin(num_frames: int = 5, degrees_per_frame: float = 20.0) -> AnalyticScene:
    """Off-centre box + sphere rotating rigidly about the vertical axis through (0.5, 0.5)."""
    shape = Union([Box((0.5, 0.5, 0.5), (0.18, 0.1, 0.12)), Sphere((0.64, 0.5, 0.55), 0.1)])
    traj = [Warp((0.5, 0.5, 0.5), (0.0, 0.0, 0.0), math.radians(degrees_per_frame * t))
            for t in range(num_frames)]
    return AnalyticScene("rigid-spin", [Part(shape, traj)], num_frames)


def single_sphere(num_frames: int = 1, radius: float = 0.25) -> AnalyticScene:
    traj = [Warp((0.5, 0.5, 0.5), (0.0, 0.0, 0.0)) for _ in range(num_frames)]
    return AnalyticScene("sphere", [Part(Sphere((0.5, 0.5, 0.5), radius), traj)], num_frames)


SCENES = {"blob-walk": lambda n: blob_walk(n, False),
          "blob-walk-topo": lambda n: blob_walk(n, True),
          "rigid-spin": rigid_spin,
          "sphere": single_sphere}


def make_scene(name: str, num_frames: int) -> AnalyticScene:
    try:
        return SCENES[name](num_frames)
    except KeyError:
        raise ValueError(f"unknown scene {name!r}; choose from {sorted(SCENES)}") from None


# ---------------------------------------------------------------- cameras and tracing


@dataclass
class CameraRig:
    cameras: list

    @classmethod
    def ring(cls, n_cameras: int = 8, size: int = 64, distance: float = 1.5,
             elevations=(25.0, -25.0), fit_radius: float = 0.45,
             target=(0.5, 0.5, 0.5)) -> "CameraRig":
        """Inward-looking cameras split over elevation rings; each frames a sphere of
        ``fit_radius`` around the target."""
        target = np.asarray(target, dtype=np.float64)
        half = math.asin(min(fit_radius / distance, 0.99))
        focal = 0.5 * size / math.tan(half)
        rings = len(elevations)
        cams = []
        for i in range(n_cameras):
            ring = i % rings
            k = i // rings
            per_ring = (n_cameras - ring + rings - 1) // rings
            az = 2.0 * math.pi * k / per_ring + ring * math.pi / max(per_ring, 1)
            el = math.radians(elevations[ring])
            eye = target + distance * np.array([math.cos(el) * math.cos(az),
                                                math.cos(el) * math.sin(az), math.sin(el)])
            cams.append(Camera.look_at(eye, target, (0.0, 0.0, 1.0), size, size, focal))
        return cls(cams)


@dataclass
class Hit:
    hit: np.ndarray        # (N,) bool
    t: np.ndarray          # (N,) ray parameter (inf on miss)
    position: np.ndarray   # (N, 3)
    normal: np.ndarray     # (N, 3) unit normals (zero on miss)


def sphere_trace(scene: AnalyticScene, t_frame: int, origins, directions, t_far=None,
                 t_start=None, step_scale: float | None = None) -> Hit:
    """March x <- x + s * dir until |s| < 1e-5, t > t_far or 256 steps.

    Steps are divided by the scene's Lipschitz bound, so warped SDFs whose
    gradient may exceed one in magnitude cannot step through the surface.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    n = len(o)
    if t_far is None or t_start is None:
        near, far, inside = intersect_unit_cube(o, d)
        t_start = np.where(inside, near, np.inf) if t_start is None else np.asarray(t_start, float)
        t_far = np.where(inside, far, -np.inf) if t_far is None else np.asarray(t_far, float)
    t = np.broadcast_to(np.asarray(t_start, dtype=np.float64), (n,)).copy()
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (n,))
    scale = 1.0 / (scene.lipschitz_bound(t_frame) if step_scale is None else step_scale)
    active = np.isfinite(t) & (t <= t_far)
    hit = np.zeros(n, dtype=bool)
    for _ in range(TRACE_MAX_STEPS):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        s = scene.sdf(t_frame, o[idx] + t[idx, None] * d[idx])
        done = np.abs(s) < TRACE_EPS
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, s * scale)
        active[idx[done]] = False
        active &= t <= t_far
    t = np.where(hit, t, np.inf)
    pos = np.where(hit[:, None], o + np.where(hit, t, 0.0)[:, None] * d, 0.0)
    normal = np.zeros_like(pos)
    if hit.any():
        normal[hit] = analytic_normal(scene, t_frame, pos[hit])
    return Hit(hit, t, pos, normal)


def analytic_normal(scene: AnalyticScene, t_frame: int, p: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    g = np.stack([scene.sdf(t_frame, p + eps * e) - scene.sdf(t_frame, p - eps * e)
                  for e in np.eye(3)], axis=-1) / (2.0 * eps)
    return g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)


def shade(scene: AnalyticScene, t_frame: int, hit: Hit) -> np.ndarray:
    """Lambertian colour under the scene's directional lights; black where missed."""
    rgb = np.zeros((len(hit.hit), 3))
    if not hit.hit.any():
        return rgb
    n = hit.normal[hit.hit]
    light = np.full(len(n), scene.ambient)
    for direction, intensity in scene.lights:
        l = np.asarray(direction, dtype=np.float64)
        light += intensity * np.maximum(n @ (l / np.linalg.norm(l)), 0.0)
    rgb[hit.hit] = np.clip(scene.albedo(t_frame, hit.position[hit.hit]) * light[:, None], 0.0, 1.0)
    return rgb


def render_view(scene: AnalyticScene, t_frame: int, camera: Camera):
    """Pixel-centre ground truth (rgb float (H, W, 3), mask bool (H, W))."""
    from .renderer import generate_rays

    rays = generate_rays(camera, np.arange(camera.num_pixels), None)
    h = sphere_trace(scene, t_frame, rays.origins, rays.directions)
    rgb = shade(scene, t_frame, h)
    return rgb.reshape(camera.height, camera.width, 3), h.hit.reshape(camera.height, camera.width)


def gt_mesh(scene: AnalyticScene, t_frame: int, resolution: int = GT_RESOLUTION) -> TriangleMesh:
    return marching_cubes(sample_sdf_grid(lambda p: scene.sdf(t_frame, p), resolution))


# ---------------------------------------------------------------- dataset files


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def generate_dataset(scene: AnalyticScene, rig: CameraRig, num_frames: int, out_dir,
                     seed: int = 0, gt_resolution: int = GT_RESOLUTION) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "cameras.json", {"cameras": [c.to_dict() for c in rig.cameras]})
        _write_json(out / "bounds.json", {"min": [0.0, 0.0, 0.0], "max": [1.0, 1.0, 1.0]})
        size = rig.cameras[0].width if rig.cameras else 0
        _write_json(out / "scene.json", {"scene": scene.name, "frames": num_frames,
                                         "cameras": len(rig.cameras), "size": size, "seed": seed})
        (out / "gt").mkdir(exist_ok=True)
        for t in range(num_frames):
            fdir = out / "frames" / str(t)
            fdir.mkdir(parents=True, exist_ok=True)
            for c, cam in enumerate(rig.cameras):
                rgb, mask = render_view(scene, t, cam)
                Image.fromarray(to_uint8(rgb), "RGB").save(fdir / f"rgb_{c}.png")
                Image.fromarray(mask.astype(np.uint8) * 255, "L").save(fdir / f"mask_{c}.png")
            write_obj(out / "gt" / f"mesh_{t}.obj", gt_mesh(scene, t, gt_resolution))
            _write_json(out / f"warp_{t}.json",
                        {"frame": t, "parts": [w.to_dict() for w in scene.warps(t)]})
    except OSError as exc:
        raise OSError(f"writing dataset under {out}: {exc}") from exc
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class Frame:
    index: int
    images: list      # (H, W, 3) float arrays in [0, 1]
    masks: list       # (H, W) float arrays in {0, 1}


class Dataset:
    """Reader for the layout above; world coordinates are mapped into the unit cube."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            cams = json.loads((self.root / "cameras.json").read_text())["cameras"]
            bounds = json.loads((self.root / "bounds.json").read_text())
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"dataset at {self.root} is missing {exc.filename}") from None
        lo, hi = np.asarray(bounds["min"], float), np.asarray(bounds["max"], float)
        extent = hi - lo
        if not np.allclose(extent, extent[0]):
            raise ValueError("scene bounds must be a cube so SDF units stay isotropic")
        self.bounds_min, self.scale = lo, float(extent[0])
        self.cameras = [self._normalize(Camera.from_dict(c)) for c in cams]
        meta_path = self.root / "scene.json"
        self.meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        frames_dir = self.root / "frames"
        self.num_frames = len([p for p in frames_dir.iterdir() if p.is_dir()]) if frames_dir.exists() else 0
        self._cache: dict[int, Frame] = {}

    def _normalize(self, cam: Camera) -> Camera:
        pose = cam.pose.copy()
        pose[:3, 3] = (pose[:3, 3] - self.bounds_min) / self.scale
        return Camera(cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, pose)

    def frame(self, t: int) -> Frame:
        if t in self._cache:
            return self._cache[t]
        fdir = self.root / "frames" / str(t)
        if not fdir.exists():
            raise FileNotFoundError(f"frame {t} not found under {fdir}")
        images, masks = [], []
        for c in range(len(self.cameras)):
            rgb_path, mask_path = fdir / f"rgb_{c}.png", fdir / f"mask_{c}.png"
            if not rgb_path.exists():
                raise FileNotFoundError(f"missing image {rgb_path}")
            images.append(np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.float64) / 255.0)
            if mask_path.exists():
                masks.append((np.asarray(Image.open(mask_path).convert("L")) > 127).astype(np.float64))
            else:
                masks.append(np.ones(images[-1].shape[:2]))
        fr = Frame(t, images, masks)
        self._cache[t] = fr
        return fr

    def gt_mesh(self, t: int) -> TriangleMesh:
        mesh = read_obj(self.root / "gt" / f"mesh_{t}.obj")
        return TriangleMesh((mesh.vertices - self.bounds_min) / self.scale, mesh.triangles)

    def warps(self, t: int) -> list:
        data = json.loads((self.root / f"warp_{t}.json").read_text())
        return [Warp.from_dict(p) for p in data["parts"]]
