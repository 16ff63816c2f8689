"""Multi-resolution hash-grid encoding with trilinear interpolation.

Level ``l`` is a lattice of ``N_l`` vertices per axis spanning the unit cube.
Levels whose ``N_l**3`` vertices fit in the table are indexed densely in
row-major order; finer levels use the XOR/prime spatial hash.  All levels
share one parameter tensor of shape ``(total_rows, F)``; ``offsets`` marks the
row range owned by each level.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numba
import numpy as np

from . import autodiff as ad

PRIMES = (1, 2654435761, 805459861)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    base_resolution: int = 32
    max_resolution: int = 2048
    features_per_level: int = 4
    log2_table_size: int = 19

    def __post_init__(self):
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be >= 1")
        if not 2 <= self.base_resolution <= self.max_resolution:
            raise ValueError("need 2 <= base_resolution <= max_resolution")
        if self.log2_table_size < 1:
            raise ValueError("log2_table_size must be >= 1")

    @classmethod
    def full_scale(cls) -> "HashGridConfig":
        return cls()

    @classmethod
    def desk(cls) -> "HashGridConfig":
        return cls(levels=8, base_resolution=16, max_resolution=128, features_per_level=2,
                   log2_table_size=14)

    @property
    def growth(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp((math.log(self.max_resolution) - math.log(self.base_resolution))
                        / (self.levels - 1))

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HashGridConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown hash grid keys: {sorted(unknown)}")
        return cls(**d)


def level_resolution(config: HashGridConfig, level: int) -> int:
    """Vertices per axis at ``level``; geometric between the two endpoint resolutions."""
    if not 0 <= level < config.levels:
        raise IndexError(f"level {level} outside [0, {config.levels})")
    if level == config.levels - 1:
        return config.max_resolution
    # small slack so exact powers are not floored one below
    return int(math.floor(config.base_resolution * config.growth ** level + 1e-9))


def level_rows(config: HashGridConfig, level: int) -> int:
    n = level_resolution(config, level)
    return min(config.table_size, n ** 3)


def level_is_dense(config: HashGridConfig, level: int) -> bool:
    return level_resolution(config, level) ** 3 <= config.table_size


def hash_index(cell, level: int, config: HashGridConfig) -> int:
    """Table row (relative to the level's block) for an integer lattice vertex."""
    n = level_resolution(config, level)
    cx, cy, cz = (int(c) for c in cell)
    if level_is_dense(config, level):
        return cx + cy * n + cz * n * n
    h = (cx * PRIMES[0]) ^ (cy * PRIMES[1]) ^ (cz * PRIMES[2])
    return h % config.table_size


class HashGrid:
    """Trainable feature tables for one encoding."""

    def __init__(self, config: HashGridConfig, rng: np.random.Generator, dtype=np.float32,
                 init_scale: float = 1e-4):
        self.config = config
        self.resolutions = np.array([level_resolution(config, l) for l in range(config.levels)],
                                    dtype=np.int64)
        self.dense = np.array([level_is_dense(config, l) for l in range(config.levels)])
        rows = [level_rows(config, l) for l in range(config.levels)]
        self.offsets = np.concatenate([[0], np.cumsum(rows)]).astype(np.int64)
        self.sizes = np.array(rows, dtype=np.int64)
        # hashed levels have power-of-two sizes, so modulo is a bit mask
        self.masks = self.sizes - 1
        data = rng.uniform(-init_scale, init_scale,
                           size=(int(self.offsets[-1]), config.features_per_level))
        self.table = ad.Tensor(data.astype(dtype), requires_grad=True)
        self.stats = {"clamped": 0, "evaluated": 0}

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def level_slice(self, level: int) -> slice:
        return slice(int(self.offsets[level]), int(self.offsets[level + 1]))

    def finest_active_resolution(self, active_levels: int) -> int:
        return int(self.resolutions[min(active_levels, self.config.levels) - 1])

    def encode(self, x: ad.Tensor, active_levels: int | None = None) -> ad.Tensor:
        return encode(x, self, active_levels)


def encode(x: ad.Tensor, grid: HashGrid, active_levels: int | None = None) -> ad.Tensor:
    """Concatenated per-level features, shape (N, L*F).

    Levels at or above ``active_levels`` produce exact zeros and receive no
    gradient.  Points outside the unit cube are clamped onto it and counted in
    ``grid.stats``; the clamped coordinates get zero gradient.
    """
    x = ad.as_tensor(x)
    cfg = grid.config
    active = cfg.levels if active_levels is None else int(active_levels)
    if not 1 <= active <= cfg.levels:
        raise ValueError(f"active_levels {active} outside [1, {cfg.levels}]")
    if x.ndim != 2 or x.shape[1] != 3:
        raise ad.ShapeError("hash_encode", [x.shape])
    table = grid.table
    xd = np.ascontiguousarray(x.data, dtype=table.dtype)
    outside = np.any((xd < 0.0) | (xd > 1.0), axis=1)
    grid.stats["clamped"] += int(outside.sum())
    grid.stats["evaluated"] += len(xd)
    feats = _encode_forward(xd, table.data, grid.offsets, grid.resolutions, grid.dense,
                            grid.masks, active)

    def bw(g):
        g = np.ascontiguousarray(g, dtype=table.dtype)
        gt, gx = _encode_backward(xd, g, table.data, grid.offsets, grid.resolutions, grid.dense,
                                  grid.masks, active, table.requires_grad, x.requires_grad)
        return (gx.astype(x.dtype, copy=False) if x.requires_grad else None,
                gt if table.requires_grad else None)

    return ad.record("hash_encode", (x, table), feats, bw)


# ---------------------------------------------------------------- kernels


@numba.njit(cache=True, fastmath=True, inline="always")
def _corner_terms(n, dense, hx, hy, hz, cx, cy, cz):
    # per-axis row contributions; a corner's row combines one entry per axis
    if dense:
        for b in range(2):
            hx[b] = np.uint64(cx + b)
            hy[b] = np.uint64((cy + b) * n)
            hz[b] = np.uint64((cz + b) * n * n)
    else:
        for b in range(2):
            hx[b] = np.uint64(cx + b)
            hy[b] = np.uint64(cy + b) * np.uint64(2654435761)
            hz[b] = np.uint64(cz + b) * np.uint64(805459861)


@numba.njit(cache=True, fastmath=True, inline="always")
def _corner_row(dense, hx, hy, hz, mask):
    if dense:
        return np.int64(hx + hy + hz)
    return np.int64((hx ^ hy ^ hz) & mask)


@numba.njit(cache=True, fastmath=True, inline="always")
def _cell(v, n):
    pos = v * (n - 1)
    c = min(np.int64(pos), n - 2)
    return c, pos - c


@numba.njit(cache=True, fastmath=True, parallel=True)
def _encode_forward(x, table, offsets, res, dense, masks, active):
    npts = x.shape[0]
    nf = table.shape[1]
    nlev = res.shape[0]
    out = np.zeros((npts, nlev * nf), dtype=table.dtype)
    chunk = 4096
    for k in numba.prange((npts + chunk - 1) // chunk):
        wx = np.empty(2, dtype=table.dtype)
        wy = np.empty(2, dtype=table.dtype)
        wz = np.empty(2, dtype=table.dtype)
        hx = np.empty(2, dtype=np.uint64)
        hy = np.empty(2, dtype=np.uint64)
        hz = np.empty(2, dtype=np.uint64)
        for i in range(k * chunk, min(npts, (k + 1) * chunk)):
            _forward_point(i, x, table, offsets, res, dense, masks, active, out,
                           wx, wy, wz, hx, hy, hz)
    return out


@numba.njit(cache=True, fastmath=True, inline="always")
def _forward_point(i, x, table, offsets, res, dense, masks, active, out, wx, wy, wz, hx, hy, hz):
    nf = table.shape[1]
    x0 = min(max(x[i, 0], 0.0), 1.0)
    x1 = min(max(x[i, 1], 0.0), 1.0)
    x2 = min(max(x[i, 2], 0.0), 1.0)
    for l in range(active):
        n = res[l]
        cx, fx = _cell(x0, n)
        cy, fy = _cell(x1, n)
        cz, fz = _cell(x2, n)
        wx[0] = 1 - fx
        wx[1] = fx
        wy[0] = 1 - fy
        wy[1] = fy
        wz[0] = 1 - fz
        wz[1] = fz
        dn = dense[l]
        _corner_terms(n, dn, hx, hy, hz, cx, cy, cz)
        base = offsets[l]
        mk = np.uint64(masks[l])
        o = l * nf
        for bz in range(2):
            for by in range(2):
                wyz = wy[by] * wz[bz]
                for bx in range(2):
                    w = wx[bx] * wyz
                    r = base + _corner_row(dn, hx[bx], hy[by], hz[bz], mk)
                    for f in range(nf):
                        out[i, o + f] += w * table[r, f]


@numba.njit(cache=True, fastmath=True)
def _encode_backward(x, g, table, offsets, res, dense, masks, active, want_table, want_x):
    # sequential scatter in point order: bit-identical across runs and thread counts
    npts = x.shape[0]
    nf = table.shape[1]
    gt = np.zeros(table.shape if want_table else (1, nf), dtype=table.dtype)
    gx = np.zeros((npts, 3) if want_x else (1, 3), dtype=table.dtype)
    wx = np.empty(2, dtype=table.dtype)
    wy = np.empty(2, dtype=table.dtype)
    wz = np.empty(2, dtype=table.dtype)
    hx = np.empty(2, dtype=np.uint64)
    hy = np.empty(2, dtype=np.uint64)
    hz = np.empty(2, dtype=np.uint64)
    for i in range(npts):
        x0 = x[i, 0]
        x1 = x[i, 1]
        x2 = x[i, 2]
        in0 = 0.0 <= x0 <= 1.0
        in1 = 0.0 <= x1 <= 1.0
        in2 = 0.0 <= x2 <= 1.0
        x0 = min(max(x0, 0.0), 1.0)
        x1 = min(max(x1, 0.0), 1.0)
        x2 = min(max(x2, 0.0), 1.0)
        d0 = 0.0
        d1 = 0.0
        d2 = 0.0
        for l in range(active):
            n = res[l]
            dn = dense[l]
            base = offsets[l]
            mk = np.uint64(masks[l])
            o = l * nf
            scale = n - 1
            cx, fx = _cell(x0, n)
            cy, fy = _cell(x1, n)
            cz, fz = _cell(x2, n)
            wx[0] = 1 - fx
            wx[1] = fx
            wy[0] = 1 - fy
            wy[1] = fy
            wz[0] = 1 - fz
            wz[1] = fz
            _corner_terms(n, dn, hx, hy, hz, cx, cy, cz)
            for bz in range(2):
                sz = 1.0 if bz else -1.0
                for by in range(2):
                    sy = 1.0 if by else -1.0
                    for bx in range(2):
                        sx = 1.0 if bx else -1.0
                        r = base + _corner_row(dn, hx[bx], hy[by], hz[bz], mk)
                        if want_table:
                            w = wx[bx] * wy[by] * wz[bz]
                            for f in range(nf):
                                gt[r, f] += w * g[i, o + f]
                        if want_x:
                            dot = 0.0
                            for f in range(nf):
                                dot += table[r, f] * g[i, o + f]
                            d0 += dot * sx * wy[by] * wz[bz] * scale
                            d1 += dot * wx[bx] * sy * wz[bz] * scale
                            d2 += dot * wx[bx] * wy[by] * sz * scale
        if want_x:
            gx[i, 0] = d0 if in0 else 0.0
            gx[i, 1] = d1 if in1 else 0.0
            gx[i, 2] = d2 if in2 else 0.0
    return gt, gx


def trilinear_weights(x: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Reference (cell, 8 corner weights) for one point; used by tests and tools."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    pos = x * (resolution - 1)
    cell = np.minimum(np.floor(pos).astype(np.int64), resolution - 2)
    f = pos - cell
    w = np.empty(8)
    for c in range(8):
        b = [(c >> k) & 1 for k in range(3)]
        w[c] = np.prod([f[k] if b[k] else 1.0 - f[k] for k in range(3)])
    return cell, w
