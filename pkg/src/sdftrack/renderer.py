"""Rays, stratified samples, SDF-to-opacity conversion and compositing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .fields import (DeformationField, RadianceField, SdfField, deform, normal_to_observation,
                     sdf_with_normal)

DEFAULT_SAMPLES = 80
PHI_FLOOR = 1e-12


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray  # world-from-camera, 4x4; the camera looks down its -z axis

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)
        rot = self.pose[:3, :3]
        if self.pose.shape != (4, 4) or np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9:
            raise ValueError("camera pose must be a rigid 4x4 transform with orthonormal rotation")

    @property
    def center(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "world_from_camera": self.pose.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.asarray(d["world_from_camera"], dtype=np.float64))

    @classmethod
    def look_at(cls, eye, target, up, width: int, height: int, focal: float) -> "Camera":
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        back = eye - target
        back /= np.linalg.norm(back)
        right = np.cross(up, back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        pose = np.eye(4)
        pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, true_up, back, eye
        return cls(focal, focal, width / 2.0, height / 2.0, width, height, pose)


@dataclass
class Rays:
    origins: np.ndarray      # (N, 3)
    directions: np.ndarray   # (N, 3), unit length
    t_near: np.ndarray       # (N,)
    t_far: np.ndarray        # (N,)
    valid: np.ndarray        # (N,) bool; False for rays that miss the unit cube
    pixels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.t_near[idx], self.t_far[idx],
                    self.valid[idx], self.pixels[idx] if len(self.pixels) else self.pixels)


def intersect_unit_cube(origins: np.ndarray, directions: np.ndarray):
    """Slab test against [0,1]^3; returns (t_near, t_far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (0.0 - origins) * inv
        t1 = (1.0 - origins) * inv
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # a ray parallel to a slab is inside it iff its origin is
    par = directions == 0.0
    inside = (origins >= 0.0) & (origins <= 1.0)
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(lo.max(axis=1), 0.0)
    t_far = hi.min(axis=1)
    hit = t_far > t_near
    return np.where(hit, t_near, 0.0), np.where(hit, t_far, 0.0), hit


def generate_rays(camera: Camera, pixel_indices, rng: np.random.Generator | None = None) -> Rays:
    """Rays through flat pixel indices (row * width + col).

    With an ``rng`` each ray passes through a uniformly jittered point inside
    its pixel; without one it passes through the pixel centre.
    """
    pix = np.asarray(pixel_indices, dtype=np.int64).reshape(-1)
    if pix.size and (pix.min() < 0 or pix.max() >= camera.num_pixels):
        raise IndexError("pixel index outside the image")
    row, col = np.divmod(pix, camera.width)
    if rng is None:
        jx = jy = np.full(len(pix), 0.5)
    else:
        jx, jy = rng.uniform(0.0, 1.0, len(pix)), rng.uniform(0.0, 1.0, len(pix))
    u = col + jx
    v = row + jy
    d_cam = np.stack([(u - camera.cx) / camera.fx, -(v - camera.cy) / camera.fy,
                      -np.ones(len(pix))], axis=1)
    d_world = d_cam @ camera.pose[:3, :3].T
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    t_near, t_far, hit = intersect_unit_cube(origins, d_world)
    return Rays(origins, d_world, t_near, t_far, hit, pix)


def sample_along_ray(rays: Rays, n_samples: int = DEFAULT_SAMPLES,
                     rng: np.random.Generator | None = None):
    """Stratified depths: one uniform draw in each of ``n_samples`` equal bins.

    Without an ``rng`` the bin midpoints are used.  Returns (t, positions,
    bin_width) with t of shape (N, S) and positions (N, S, 3).
    """
    n = len(rays)
    if rng is None:
        offs = np.full((n, n_samples), 0.5)
    else:
        offs = rng.uniform(0.0, 1.0, (n, n_samples))
    width = (rays.t_far - rays.t_near) / n_samples
    t = rays.t_near[:, None] + (np.arange(n_samples)[None, :] + offs) * width[:, None]
    pos = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return t, pos, width


def alpha_from_sdf(s: ad.Tensor, s_next: ad.Tensor, kappa) -> ad.Tensor:
    """max((Phi(k s_i) - Phi(k s_{i+1})) / Phi(k s_i), 0) with Phi the logistic CDF."""
    s, s_next = ad.as_tensor(s), ad.as_tensor(s_next)
    kappa = ad.as_tensor(kappa, like=s)
    phi = ad.sigmoid(ad.mul(s, kappa))
    phi_next = ad.sigmoid(ad.mul(s_next, kappa))
    ratio = ad.div(ad.sub(phi, phi_next), ad.clamp(phi, lo=PHI_FLOOR))
    return ad.maximum0(ratio)


def composite(alphas: ad.Tensor, colors: ad.Tensor):
    """Front-to-back compositing along the last sample axis.

    alphas (N, S), colors (N, S, 3) -> (C (N, 3), W (N,), weights (N, S)).
    """
    alphas, colors = ad.as_tensor(alphas), ad.as_tensor(colors)
    if alphas.shape != colors.shape[:-1]:
        raise ad.ShapeError("composite", [alphas.shape, colors.shape])
    trans = ad.cumprod_exclusive(ad.sub(1.0, alphas))
    weights = ad.mul(trans, alphas)
    w3 = ad.reshape(weights, weights.shape + (1,))
    color = ad.sum(ad.mul(w3, colors), axis=-2)
    return color, ad.sum(weights, axis=-1), weights


def transmittance(alphas: np.ndarray) -> np.ndarray:
    out = np.ones_like(alphas)
    out[..., 1:] = np.cumprod(1.0 - alphas[..., :-1], axis=-1)
    return out


# ---------------------------------------------------------------- full model


class SdfToAlpha:
    """Trainable logistic sharpness kappa = exp(log_kappa)."""

    def __init__(self, params: ad.ParameterSet, init_std: float = 0.3, dtype=np.float32,
                 name: str = "render.log_kappa"):
        # a logistic with scale 1/kappa has standard deviation pi / (kappa sqrt 3)
        kappa0 = math.pi / (init_std * math.sqrt(3.0))
        self.log_kappa = params.register(name, ad.Tensor(np.array([math.log(kappa0)], dtype=dtype)))

    @property
    def value(self) -> float:
        return float(np.exp(self.log_kappa.data[0]))

    def kappa(self) -> ad.Tensor:
        return ad.exp(self.log_kappa)


@dataclass
class RenderSettings:
    n_samples: int = DEFAULT_SAMPLES
    sdf_active_levels: int | None = None
    deform_active_levels: int | None = None
    eps: float | None = None
    normal_rotation: str = "inverse"


@dataclass
class RenderOutput:
    color: ad.Tensor         # (N, 3); black for degenerate rays
    weight_sum: ad.Tensor    # (N,); zero for degenerate rays
    normals: ad.Tensor | None  # (M*S, 3) canonical-gradient normals of valid-ray samples
    weights: np.ndarray      # (M, S) compositing weights of valid rays
    sdf: np.ndarray          # (M, S)
    alphas: np.ndarray       # (M, S)
    valid: np.ndarray        # (N,) bool
    t: np.ndarray            # (M, S)


def render_rays(sdf_field: SdfField, rgb_field: RadianceField, to_alpha: SdfToAlpha,
                deform_field: DeformationField | None, rays: Rays, settings: RenderSettings,
                rng: np.random.Generator | None = None) -> RenderOutput:
    """Render a batch of rays through the (optional) deformation.

    Each sample is warped to the canonical frame, its SDF, feature and
    central-difference normal are evaluated there, the normal is rotated back
    to the observation frame and fed with the view direction to the radiance
    field.  The last sample on each ray reuses its own SDF as the successor,
    so its opacity is zero.
    """
    n_rays = len(rays)
    dtype = sdf_field.grid.table.dtype
    valid_idx = np.flatnonzero(rays.valid)
    m, s_count = len(valid_idx), settings.n_samples
    if m == 0:
        zero3 = ad.Tensor(np.zeros((n_rays, 3), dtype=dtype))
        zero = ad.Tensor(np.zeros(n_rays, dtype=dtype))
        empty = np.zeros((0, s_count))
        return RenderOutput(zero3, zero, None, empty, empty, empty, rays.valid.copy(), empty)
    sub = rays.subset(valid_idx)
    t, pos, _ = sample_along_ray(sub, s_count, rng)
    x = ad.Tensor(pos.reshape(-1, 3).astype(dtype))
    warp = deform(deform_field, x, settings.deform_active_levels)
    eps = settings.eps if settings.eps is not None else sdf_field.default_eps(settings.sdf_active_levels)
    s, d, n_canon = sdf_with_normal(sdf_field, warp.x_hat, eps, settings.sdf_active_levels)
    n_obs = n_canon if deform_field is None else normal_to_observation(
        warp.rotation, n_canon, settings.normal_rotation)
    view = np.repeat(sub.directions, s_count, axis=0).astype(dtype)
    c = rgb_field(warp.x_hat, view, n_obs, d)
    s2 = ad.reshape(s, (m, s_count))
    s_next = ad.concat([s2[:, 1:], s2[:, -1:]], axis=1)
    alpha = alpha_from_sdf(s2, s_next, to_alpha.kappa())
    color, wsum, weights = composite(alpha, ad.reshape(c, (m, s_count, 3)))
    if m < n_rays:
        color = ad.scatter_rows(color, valid_idx, n_rays)
        wsum = ad.scatter_rows(wsum, valid_idx, n_rays)
    return RenderOutput(color, wsum, n_canon, weights.data, s2.data, alpha.data,
                        rays.valid.copy(), t)


def render_pixel(sdf_field, rgb_field, to_alpha, deform_field, ray: Rays, settings: RenderSettings,
                 rng=None):
    """(C_r, W_r) for a single ray (a length-1 :class:`Rays`)."""
    out = render_rays(sdf_field, rgb_field, to_alpha, deform_field, ray, settings, rng)
    return out.color.data[0], float(out.weight_sum.data[0])


def render_image(sdf_field, rgb_field, to_alpha, deform_field, camera: Camera,
                 settings: RenderSettings, chunk: int = 2048):
    """Full image without gradients, pixel-centre rays and bin-midpoint samples.

    Returns (rgb (H, W, 3), weight_sum (H, W)).
    """
    rgb = np.zeros((camera.num_pixels, 3))
    wsum = np.zeros(camera.num_pixels)
    with ad.no_grad():
        for start in range(0, camera.num_pixels, chunk):
            pix = np.arange(start, min(start + chunk, camera.num_pixels))
            rays = generate_rays(camera, pix, None)
            out = render_rays(sdf_field, rgb_field, to_alpha, deform_field, rays, settings, None)
            rgb[pix] = out.color.data
            wsum[pix] = out.weight_sum.data
    return (rgb.reshape(camera.height, camera.width, 3),
            wsum.reshape(camera.height, camera.width))
