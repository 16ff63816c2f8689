"""Losses, AdamW, coarse-to-fine scheduling, template training and per-frame tracking."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .encoding import HashGridConfig
from .fields import DeformationField, RadianceField, SdfField
from .geometry import TriangleMesh, field_sdf_function, marching_cubes, sample_sdf_grid, write_obj
from .renderer import RenderSettings, SdfToAlpha, generate_rays, render_image, render_rays

TRACKING_STEP_RATIO = 0.1
TEMPLATE_CKPT = "template.ckpt"


def deform_ckpt_name(t: int) -> str:
    return f"deform_t{t}.ckpt"


def mesh_name(t: int) -> str:
    return f"mesh_{t}.obj"


class NumericalError(FloatingPointError):
    """Raised when the training loss stops being finite."""


# ---------------------------------------------------------------- configuration


@dataclass
class TrainConfig:
    lambda_mask_template: float = 0.1
    lambda_mask_tracking: float = 1.0
    lambda_eik: float = 0.1
    template_steps: int = 5000
    tracking_steps_per_frame: int = 1000
    rays_per_batch: int = 512
    samples_per_ray: int = 80
    c2f_initial_levels: int = 4
    c2f_step_interval: int = 100
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.99)
    adam_eps: float = 1e-15
    weight_decay: float = 1e-2
    warmup_steps: int = 100
    template_lr_scale: float = 1.0      # learning-rate multiplier for template params while tracking
    precision: str = "float32"
    seed: int = 0
    refine_template: bool = True
    warm_start_deform: bool = True
    coarse_to_fine_deform: bool = True
    coarse_to_fine_template: bool = True
    log_every: int = 100

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("template_steps", "tracking_steps_per_frame", "rays_per_batch",
                     "samples_per_ray", "c2f_initial_levels", "c2f_step_interval", "log_every"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lambda_mask_template", "lambda_mask_tracking", "lambda_eik", "warmup_steps",
                     "weight_decay", "template_lr_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = dict(template_steps=250_000, tracking_steps_per_frame=25_000, c2f_step_interval=1000,
                    warmup_steps=1000)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64

    def lambda_mask(self, stage: str) -> float:
        if stage == "template":
            return self.lambda_mask_template
        if stage == "tracking":
            return self.lambda_mask_tracking
        raise ValueError(f"unknown stage {stage!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Strict parse; when only one step budget is given the other follows the 10% ratio."""
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        has_t, has_k = "template_steps" in d, "tracking_steps_per_frame" in d
        if has_t and not has_k:
            d["tracking_steps_per_frame"] = max(1, round(d["template_steps"] * TRACKING_STEP_RATIO))
        elif has_k and not has_t:
            d["template_steps"] = max(1, round(d["tracking_steps_per_frame"] / TRACKING_STEP_RATIO))
        return cls(**d)


@dataclass
class ModelConfig:
    sdf_grid: HashGridConfig = field(default_factory=HashGridConfig.desk)
    deform_grid: HashGridConfig = field(default_factory=HashGridConfig.desk)
    hidden: int = 64
    feature_dim: int = 15
    init_radius: float = 0.5
    kappa_init_std: float = 0.3
    normal_rotation: str = "inverse"
    mesh_resolution: int = 64

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        base = dict(sdf_grid=HashGridConfig.full_scale(), deform_grid=HashGridConfig.full_scale(),
                    mesh_resolution=512)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sdf_grid"] = self.sdf_grid.to_dict()
        d["deform_grid"] = self.deform_grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("sdf_grid", "deform_grid"):
            if key in d and isinstance(d[key], dict):
                d[key] = HashGridConfig.from_dict(d[key])
        return cls(**d)


def c2f_active_levels(step: int, config: TrainConfig, total_levels: int, enabled: bool = True) -> int:
    if step < 0:
        raise ValueError("step must be non-negative")
    if not enabled:
        return total_levels
    return min(total_levels, config.c2f_initial_levels + step // config.c2f_step_interval)


def learning_rate(step: int, config: TrainConfig) -> float:
    """Linear warmup over ``warmup_steps``, then constant."""
    if config.warmup_steps <= 0:
        return config.learning_rate
    return config.learning_rate * min(1.0, (step + 1) / config.warmup_steps)


# ---------------------------------------------------------------- losses


def loss_render(color: ad.Tensor, target: np.ndarray) -> ad.Tensor:
    if color.shape[0] == 0:
        raise ValueError("render loss needs at least one ray")
    if color.shape != tuple(np.shape(target)):
        raise ad.ShapeError("loss_render", [color.shape, np.shape(target)])
    diff = ad.abs(ad.sub(color, ad.Tensor(np.asarray(target, dtype=color.dtype))))
    return ad.mean(ad.sum(diff, axis=1))


def loss_mask(weight_sum: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    m = np.asarray(mask, dtype=weight_sum.dtype)
    w = ad.clamp(weight_sum, 1e-6, 1.0 - 1e-6)
    inside = ad.mul(ad.log(w), m)
    outside = ad.mul(ad.log(ad.sub(1.0, w)), 1.0 - m)
    return ad.neg(ad.mean(ad.add(inside, outside)))


def loss_eikonal(normals: ad.Tensor) -> ad.Tensor:
    return ad.mean(ad.square(ad.sub(ad.norm(normals, axis=1), 1.0)))


def total_loss(render: ad.Tensor, mask: ad.Tensor, eik: ad.Tensor, config: TrainConfig,
               stage: str) -> ad.Tensor:
    return ad.add(ad.add(render, ad.mul(mask, config.lambda_mask(stage))),
                  ad.mul(eik, config.lambda_eik))


# ---------------------------------------------------------------- optimizer


def adamw_step(params: ad.ParameterSet, config: TrainConfig, lr: float | None = None) -> None:
    """One decoupled-weight-decay Adam update over every tensor holding a gradient.

    Tensors whose gradient contains a non-finite value are left untouched and
    counted in ``params.skipped_updates``.
    """
    lr = config.learning_rate if lr is None else lr
    b1, b2 = config.betas
    for name, t in params:
        g = t.grad
        if g is None or not t.requires_grad:
            continue
        if not np.all(np.isfinite(g)):
            params.skipped_updates += 1
            continue
        st = params.state.get(name)
        if st is None:
            st = params.state[name] = ad.ParamState(np.zeros_like(t.data), np.zeros_like(t.data), 0)
        st.step += 1
        if params.decays(name) and config.weight_decay:
            t.data *= t.data.dtype.type(1.0 - lr * config.weight_decay)
        st.m *= b1
        st.m += (1.0 - b1) * g
        st.v *= b2
        st.v += (1.0 - b2) * (g * g)
        m_hat = st.m / (1.0 - b1 ** st.step)
        v_hat = st.v / (1.0 - b2 ** st.step)
        t.data -= (lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)).astype(t.data.dtype)


# ---------------------------------------------------------------- models


@dataclass
class Template:
    params: ad.ParameterSet
    sdf: SdfField
    rgb: RadianceField
    to_alpha: SdfToAlpha


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def build_template(model: ModelConfig, seed: int, dtype=np.float32) -> Template:
    params = ad.ParameterSet()
    rng = _rng(seed, 0)
    sdf = SdfField(params, model.sdf_grid, rng, dtype, feature_dim=model.feature_dim,
                   hidden=model.hidden, init_radius=model.init_radius)
    rgb = RadianceField(params, model.feature_dim, rng, dtype, hidden=model.hidden)
    to_alpha = SdfToAlpha(params, model.kappa_init_std, dtype)
    return Template(params, sdf, rgb, to_alpha)


def build_deform(model: ModelConfig, seed: int, frame: int, dtype=np.float32):
    params = ad.ParameterSet()
    field_ = DeformationField(params, model.deform_grid, _rng(seed, 1, frame), dtype,
                              hidden=model.hidden)
    field_.frame = frame
    return params, field_


@contextmanager
def frozen(params: ad.ParameterSet):
    """Stop gradients into ``params`` for the duration of the block."""
    saved = [(t, t.requires_grad) for t in params.tensors()]
    for t, _ in saved:
        t.requires_grad = False
        t.grad = None
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


# ---------------------------------------------------------------- data


@dataclass
class FrameData:
    """Flattened supervision for one frame: colors (C, P, 3), masks (C, P)."""

    cameras: list
    colors: np.ndarray
    masks: np.ndarray

    @classmethod
    def from_dataset(cls, dataset, t: int) -> "FrameData":
        fr = dataset.frame(t)
        colors = np.stack([im.reshape(-1, 3) for im in fr.images])
        masks = np.stack([m.reshape(-1) for m in fr.masks])
        return cls(dataset.cameras, colors, masks)


# ---------------------------------------------------------------- optimization loop


@dataclass
class StepRecord:
    stage: str
    frame: int
    step: int
    loss: float
    render: float
    mask: float
    eikonal: float
    kappa: float
    sdf_levels: int
    deform_levels: int | None
    rays_per_sec: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


def compute_losses(template: Template, deform: DeformationField | None, data: FrameData,
                   config: TrainConfig, stage: str, settings: RenderSettings,
                   rng: np.random.Generator):
    """Sample one camera and N_r of its pixels, render, and assemble the loss.

    Returns (total, render, mask, eikonal) tensors.
    """
    cam_idx = int(rng.integers(len(data.cameras)))
    cam = data.cameras[cam_idx]
    n_rays = min(config.rays_per_batch, cam.num_pixels)
    pixels = np.sort(rng.choice(cam.num_pixels, size=n_rays, replace=False))
    rays = generate_rays(cam, pixels, rng)
    out = render_rays(template.sdf, template.rgb, template.to_alpha, deform, rays, settings, rng)
    target = data.colors[cam_idx, pixels]
    valid = np.flatnonzero(out.valid)
    dtype = template.sdf.grid.table.dtype
    if len(valid):
        render = loss_render(out.color[valid], target[valid])
        eik = loss_eikonal(out.normals)
    else:
        render = ad.Tensor(np.zeros((), dtype=dtype))
        eik = ad.Tensor(np.zeros((), dtype=dtype))
    mask = loss_mask(out.weight_sum, data.masks[cam_idx, pixels])
    return total_loss(render, mask, eik, config, stage), render, mask, eik


def _optimize(stage: str, frame: int, steps: int, template: Template, deform, deform_params,
              data: FrameData, config: TrainConfig, model: ModelConfig, rng, log) -> list:
    sdf_levels_total = model.sdf_grid.levels
    deform_levels_total = model.deform_grid.levels
    if stage == "template":
        groups = [(template.params, 1.0)]
    else:
        groups = [(deform_params, 1.0)]
        if config.refine_template:
            groups.append((template.params, config.template_lr_scale))
    history = []
    tic = time.perf_counter()
    for step in range(steps):
        if stage == "template":
            sdf_levels = c2f_active_levels(step, config, sdf_levels_total, config.coarse_to_fine_template)
            deform_levels = None
        else:
            sdf_levels = sdf_levels_total
            deform_levels = c2f_active_levels(step, config, deform_levels_total,
                                              config.coarse_to_fine_deform)
        settings = RenderSettings(config.samples_per_ray, sdf_levels, deform_levels, None,
                                  model.normal_rotation)
        for ps, _ in groups:
            ps.zero_grad()
        with ad.Graph() as graph:
            loss, render, mask, eik = compute_losses(template, deform, data, config, stage, settings, rng)
            values = (float(loss.data), float(render.data), float(mask.data), float(eik.data))
            if not all(math.isfinite(v) for v in values):
                raise NumericalError(
                    f"{stage} frame {frame} step {step}: non-finite loss "
                    f"(total={values[0]}, render={values[1]}, mask={values[2]}, eikonal={values[3]})")
            ad.backward(loss, graph)
            graph.clear()
        lr = learning_rate(step, config)
        for ps, scale in groups:
            adamw_step(ps, config, lr * scale)
        history.append(values)
        if log is not None and ((step + 1) % config.log_every == 0 or step == steps - 1):
            elapsed = time.perf_counter() - tic
            log(StepRecord(stage, frame, step + 1, *values, template.to_alpha.value, sdf_levels,
                           deform_levels, config.rays_per_batch * config.log_every / max(elapsed, 1e-9)))
            tic = time.perf_counter()
    return history


def extract_mesh(template: Template, deform: DeformationField | None, resolution: int) -> TriangleMesh:
    fn = field_sdf_function(template.sdf, deform)
    return marching_cubes(sample_sdf_grid(fn, resolution))


def _metadata(kind: str, frame: int, config: TrainConfig, model: ModelConfig) -> dict:
    return {"kind": kind, "frame": frame, "train": config.to_dict(), "model": model.to_dict()}


def train_template(dataset, config: TrainConfig, model: ModelConfig, out_dir,
                   log: Callable[[StepRecord], None] | None = None):
    """Static reconstruction of frame 0 with an identity deformation.

    Writes ``template.ckpt`` and ``mesh_0.obj`` to ``out_dir``; returns
    (template, per-step loss history).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = FrameData.from_dataset(dataset, 0)
    template = build_template(model, config.seed, config.dtype)
    rng = _rng(config.seed, 2, 0)
    history = _optimize("template", 0, config.template_steps, template, None, None, data, config,
                        model, rng, log)
    ad.save_checkpoint(out / TEMPLATE_CKPT, template.params, _metadata("template", 0, config, model))
    write_obj(out / mesh_name(0), extract_mesh(template, None, model.mesh_resolution))
    return template, history


def load_template(path, model: ModelConfig, config: TrainConfig) -> Template:
    template = build_template(model, config.seed, config.dtype)
    ad.load_checkpoint(path, template.params)
    return template


def track_frame(t: int, dataset, config: TrainConfig, model: ModelConfig, out_dir,
                template: Template | None = None, log: Callable[[StepRecord], None] | None = None):
    """Fit the frame-t deformation (warm-started from frame t-1) and refine the template.

    Reads ``template.ckpt`` (unless a live template is passed) and
    ``deform_t{t-1}.ckpt`` when warm starting; writes ``deform_t{t}.ckpt``,
    the refined ``template.ckpt`` and ``mesh_{t}.obj``.
    """
    if t < 1:
        raise ValueError("tracking starts at frame 1; frame 0 is the template")
    out = Path(out_dir)
    tpl_path = out / TEMPLATE_CKPT
    if template is None:
        if not tpl_path.exists():
            raise FileNotFoundError(f"tracking needs the template checkpoint {tpl_path}; "
                                    "run train-template first")
        template = load_template(tpl_path, model, config)
    data = FrameData.from_dataset(dataset, t)
    deform_params, deform = build_deform(model, config.seed, t, config.dtype)
    prev = out / deform_ckpt_name(t - 1)
    if config.warm_start_deform and t > 1:
        if not prev.exists():
            raise FileNotFoundError(f"warm start for frame {t} needs {prev}; track frame {t - 1} first")
        ad.load_checkpoint(prev, deform_params, load_state=False)
    rng = _rng(config.seed, 3, t)
    if config.refine_template:
        history = _optimize("tracking", t, config.tracking_steps_per_frame, template, deform,
                            deform_params, data, config, model, rng, log)
    else:
        with frozen(template.params):
            history = _optimize("tracking", t, config.tracking_steps_per_frame, template, deform,
                                deform_params, data, config, model, rng, log)
    ad.save_checkpoint(out / deform_ckpt_name(t), deform_params, _metadata("deform", t, config, model))
    if config.refine_template:
        ad.save_checkpoint(tpl_path, template.params, _metadata("template", t, config, model))
    write_obj(out / mesh_name(t), extract_mesh(template, deform, model.mesh_resolution))
    return template, deform, history


def load_deform(path, model: ModelConfig, config: TrainConfig, frame: int) -> DeformationField:
    params, deform = build_deform(model, config.seed, frame, config.dtype)
    ad.load_checkpoint(path, params, load_state=False)
    return deform


def image_l1(template: Template, deform, dataset, t: int, model: ModelConfig,
             samples_per_ray: int = 80) -> float:
    """Mean per-pixel, per-channel absolute error over all views of frame t."""
    fr = dataset.frame(t)
    settings = RenderSettings(samples_per_ray, None, None, None, model.normal_rotation)
    errs = []
    for cam, img in zip(dataset.cameras, fr.images):
        rgb, _ = render_image(template.sdf, template.rgb, template.to_alpha, deform, cam, settings)
        errs.append(np.mean(np.abs(rgb - img)))
    return float(np.mean(errs))
