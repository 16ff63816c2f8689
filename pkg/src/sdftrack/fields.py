"""Neural fields: canonical SDF, radiance, per-frame deformation.

All fields take points in the normalized unit cube.  Signed distances are in
the same (normalized) units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoding import HashGrid, HashGridConfig, encode

SDF_BETA = 100.0

# real spherical harmonics, bands 0..3
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792,
          0.5462742152960396)
_SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
          -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


class FieldError(FloatingPointError):
    pass


class MLP:
    """Stack of affine layers with softplus between them."""

    def __init__(self, params: ad.ParameterSet, prefix: str, dims: list[int],
                 rng: np.random.Generator, dtype=np.float32, beta: float = SDF_BETA):
        self.dims = dims
        self.beta = beta
        self.weights: list[ad.Tensor] = []
        self.biases: list[ad.Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            self.weights.append(params.register(f"{prefix}.w{i}", ad.Tensor(w.astype(dtype)),
                                                decay=True))
            self.biases.append(params.register(f"{prefix}.b{i}",
                                               ad.Tensor(np.zeros(fan_out, dtype=dtype))))

    def __call__(self, h: ad.Tensor) -> ad.Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.affine(h, w, b)
            if i < last:
                h = ad.softplus(h, self.beta)
        return h


# ---------------------------------------------------------------- rotations


def _rodrigues_coeffs(q: np.ndarray):
    """A, B and their derivatives w.r.t. q = |omega|^2 for R = I + A K + B K^2."""
    theta = np.sqrt(q)
    small = theta < 1e-6
    tiny_d = theta < 1e-2
    safe = np.where(small, 1.0, theta)
    half = np.sin(0.5 * safe)
    a = np.where(small, 1.0 - q / 6.0 + q * q / 120.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - q / 24.0 + q * q / 720.0, 2.0 * half * half / (safe * safe))
    safe_d = np.where(tiny_d, 1.0, theta)
    c, s = np.cos(safe_d), np.sin(safe_d)
    da = np.where(tiny_d, -1.0 / 6.0 + q / 60.0 - q * q / 1680.0,
                  (safe_d * c - s) / (2.0 * safe_d ** 3))
    db = np.where(tiny_d, -1.0 / 24.0 + q / 360.0 - q * q / 13440.0,
                  (safe_d * s - 2.0 * (1.0 - c)) / (2.0 * safe_d ** 4))
    return a, b, da, db


def _hat(w: np.ndarray) -> np.ndarray:
    k = np.zeros(w.shape[:-1] + (3, 3), dtype=w.dtype)
    k[..., 0, 1], k[..., 0, 2] = -w[..., 2], w[..., 1]
    k[..., 1, 0], k[..., 1, 2] = w[..., 2], -w[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -w[..., 1], w[..., 0]
    return k


_GENERATORS = _hat(np.eye(3))


def so3_exp(omega) -> ad.Tensor:
    """Rotation matrices exp([omega]_x) for omega of shape (N, 3) -> (N, 3, 3)."""
    omega = ad.as_tensor(omega)
    w = omega.data
    if w.ndim != 2 or w.shape[1] != 3:
        raise ad.ShapeError("so3_exp", [w.shape])
    q = np.sum(w * w, axis=1)
    a, b, da, db = _rodrigues_coeffs(q)
    k = _hat(w)
    k2 = k @ k
    eye = np.eye(3, dtype=w.dtype)
    r = eye + a[:, None, None] * k + b[:, None, None] * k2

    def bw(g):
        gens = _GENERATORS.astype(w.dtype)
        # d/d omega_j of A K + B K^2, holding A and B fixed
        t_a = np.einsum("nab,jab->nj", g, gens)
        gk = np.einsum("nab,jbc->najc", k, gens)           # K E_j
        ek = np.einsum("jab,nbc->najc", gens, k)           # E_j K
        t_b = np.einsum("nac,najc->nj", g, gk + ek)
        radial = np.sum(g * (da[:, None, None] * k + db[:, None, None] * k2), axis=(1, 2))
        return (a[:, None] * t_a + b[:, None] * t_b + 2.0 * w * radial[:, None],)

    return ad.record("so3_exp", (omega,), r.astype(w.dtype, copy=False), bw)


def rotation_matrix(omega) -> np.ndarray:
    """Plain-array convenience wrapper around :func:`so3_exp` for one 3-vector."""
    w = np.asarray(omega, dtype=np.float64).reshape(1, 3)
    with ad.no_grad():
        return so3_exp(ad.Tensor(w)).data[0]


def normal_to_observation(r: ad.Tensor, n_canonical: ad.Tensor, mode: str = "inverse") -> ad.Tensor:
    """Carry a canonical-frame normal back to observation space.

    The warp maps observation -> canonical with x_hat = R x + u, so the pull
    back uses R^T.  ``mode="forward"`` applies R instead.
    """
    if mode == "inverse":
        return ad.matvec(r, n_canonical, transpose=True)
    if mode == "forward":
        return ad.matvec(r, n_canonical)
    raise ValueError(f"unknown normal_rotation mode {mode!r}")


# ---------------------------------------------------------------- SDF


class SdfField:
    """Hash grid + one softplus hidden layer -> (signed distance, feature vector)."""

    def __init__(self, params: ad.ParameterSet, grid_config: HashGridConfig,
                 rng: np.random.Generator, dtype=np.float32, feature_dim: int = 15,
                 hidden: int = 64, init_radius: float = 0.5, center=(0.5, 0.5, 0.5),
                 prefix: str = "sdf"):
        self.grid = HashGrid(grid_config, rng, dtype)
        params.register(f"{prefix}.grid", self.grid.table)
        self.feature_dim = feature_dim
        in_dim = grid_config.output_dim + 3
        self.mlp = MLP(params, f"{prefix}.mlp", [in_dim, hidden, 1 + feature_dim], rng, dtype)
        self._geometric_init(rng, init_radius, np.asarray(center, dtype=np.float64))

    def _geometric_init(self, rng, radius, center):
        # approximately |x - center| - radius; the encoded features start switched off
        w0, b0 = self.mlp.weights[0], self.mlp.biases[0]
        w1, b1 = self.mlp.weights[1], self.mlp.biases[1]
        hidden = w0.shape[1]
        enc = w0.shape[0] - 3
        w0.data[:enc] = 0.0
        w0.data[enc:] = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(hidden), size=(3, hidden))
        b0.data[:] = -(center @ w0.data[enc:].astype(np.float64))
        w1.data[:, 0] = rng.normal(math.sqrt(math.pi) / math.sqrt(hidden), 1e-4, size=hidden)
        w1.data[:, 1:] = rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, w1.shape[1] - 1))
        b1.data[:] = 0.0
        b1.data[0] = -radius

    def raw(self, x_hat: ad.Tensor, active_levels: int | None = None) -> ad.Tensor:
        feats = encode(x_hat, self.grid, active_levels)
        return self.mlp(ad.concat([feats, ad.as_tensor(x_hat)], axis=1))

    def __call__(self, x_hat, active_levels: int | None = None):
        out = self.raw(ad.as_tensor(x_hat), active_levels)
        return out[:, 0], out[:, 1:]

    def default_eps(self, active_levels: int | None = None) -> float:
        active = self.grid.config.levels if active_levels is None else active_levels
        return 1.0 / (2.0 * self.grid.finest_active_resolution(active))


def sdf_eval(field: SdfField, x_hat, active_levels: int | None = None):
    """(s, d) at canonical points; s has shape (N,), d (N, G)."""
    return field(x_hat, active_levels)


_OFFSETS = np.concatenate([np.stack([np.eye(3)[k], -np.eye(3)[k]]) for k in range(3)])


def sdf_with_normal(field: SdfField, x_hat, eps: float, active_levels: int | None = None):
    """(s, d, n) with n the unnormalized central-difference gradient of s.

    The centre point and its six offsets go through the field as one batch.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x_hat = ad.as_tensor(x_hat)
    n = x_hat.shape[0]
    offs = (_OFFSETS * eps).astype(x_hat.dtype)
    stacked = ad.concat([x_hat] + [x_hat + offs[j] for j in range(6)], axis=0)
    out = field.raw(stacked, active_levels)
    s_all = out[:, 0]
    s = s_all[:n]
    d = out[:n, 1:]
    diffs = [(s_all[(1 + 2 * k) * n:(2 + 2 * k) * n] - s_all[(2 + 2 * k) * n:(3 + 2 * k) * n])
             for k in range(3)]
    normal = ad.reshape(ad.concat(diffs, axis=0), (3, n))
    normal = ad.mul(_transpose(normal), 1.0 / (2.0 * eps))
    return s, d, normal


def _transpose(t: ad.Tensor) -> ad.Tensor:
    return ad.record("transpose", (t,), t.data.T.copy(), lambda g: (g.T.copy(),))


def sdf_normal(field: SdfField, x_hat, eps: float, active_levels: int | None = None) -> ad.Tensor:
    return sdf_with_normal(field, x_hat, eps, active_levels)[2]


# ---------------------------------------------------------------- radiance


def sh_encode(v: np.ndarray) -> np.ndarray:
    """Degree-4 (16 coefficient) real spherical-harmonic basis of unit directions."""
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((len(v), 16), dtype=v.dtype)
    out[:, 0] = _SH_C0
    out[:, 1] = -_SH_C1 * y
    out[:, 2] = _SH_C1 * z
    out[:, 3] = -_SH_C1 * x
    out[:, 4] = _SH_C2[0] * x * y
    out[:, 5] = _SH_C2[1] * y * z
    out[:, 6] = _SH_C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = _SH_C2[3] * x * z
    out[:, 8] = _SH_C2[4] * (xx - yy)
    out[:, 9] = _SH_C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = _SH_C3[1] * x * y * z
    out[:, 11] = _SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = _SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = _SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = _SH_C3[5] * z * (xx - yy)
    out[:, 15] = _SH_C3[6] * x * (xx - 3.0 * yy)
    return out


class RadianceField:
    """Color from (canonical position, view direction, normal, SDF feature)."""

    def __init__(self, params: ad.ParameterSet, feature_dim: int, rng: np.random.Generator,
                 dtype=np.float32, hidden: int = 64, prefix: str = "rgb"):
        in_dim = 3 + 16 + 3 + feature_dim
        self.mlp = MLP(params, f"{prefix}.mlp", [in_dim, hidden, hidden, 3], rng, dtype)

    def __call__(self, x_hat, v: np.ndarray, n, d) -> ad.Tensor:
        x_hat, n, d = ad.as_tensor(x_hat), ad.as_tensor(n), ad.as_tensor(d)
        dirs = ad.Tensor(sh_encode(np.asarray(v, dtype=x_hat.dtype)))
        return ad.sigmoid(self.mlp(ad.concat([x_hat, dirs, n, d], axis=1)))


def rgb_eval(field: RadianceField, x_hat, v, n, d) -> ad.Tensor:
    return field(x_hat, v, n, d)


# ---------------------------------------------------------------- deformation


@dataclass
class WarpResult:
    rotation: ad.Tensor     # (N, 3, 3)
    translation: ad.Tensor  # (N, 3)
    x_hat: ad.Tensor        # (N, 3)


class DeformationField:
    """Hash grid + one hidden layer -> twist (omega, u); identity at creation."""

    def __init__(self, params: ad.ParameterSet, grid_config: HashGridConfig,
                 rng: np.random.Generator, dtype=np.float32, hidden: int = 64,
                 prefix: str = "deform"):
        self.grid = HashGrid(grid_config, rng, dtype)
        params.register(f"{prefix}.grid", self.grid.table)
        in_dim = grid_config.output_dim + 3
        self.mlp = MLP(params, f"{prefix}.mlp", [in_dim, hidden, 6], rng, dtype)
        self.mlp.weights[-1].data[:] = 0.0
        self.mlp.biases[-1].data[:] = 0.0
        self.frame: int | None = None

    def twist(self, x, active_levels: int | None = None) -> ad.Tensor:
        x = ad.as_tensor(x)
        feats = encode(x, self.grid, active_levels)
        return self.mlp(ad.concat([feats, x], axis=1))


def deform(field: DeformationField | None, x, active_levels: int | None = None) -> WarpResult:
    """Observation-space points -> canonical points, x_hat = R x + u."""
    x = ad.as_tensor(x)
    n = x.shape[0]
    if field is None:
        eye = np.broadcast_to(np.eye(3, dtype=x.dtype), (n, 3, 3)).copy()
        return WarpResult(ad.Tensor(eye), ad.Tensor(np.zeros((n, 3), dtype=x.dtype)), x)
    tw = field.twist(x, active_levels)
    if not np.all(np.isfinite(tw.data)):
        bad = int(np.argmax(~np.all(np.isfinite(tw.data), axis=1)))
        raise FieldError(f"deformation field (frame {field.frame}) produced a non-finite twist "
                         f"at point {x.data[bad].tolist()}")
    omega, u = tw[:, :3], tw[:, 3:]
    r = so3_exp(omega)
    x_hat = ad.add(ad.matvec(r, x), u)
    return WarpResult(r, u, x_hat)
