"""Command-line entry point: ``sdftrack <command> ...``.

Exit codes: 0 ok, 2 usage or configuration error, 3 I/O error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

THREADS_ENV = "SDFTRACK_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- run configuration


@dataclasses.dataclass
class RunConfig:
    """Everything a training command reads; parsed strictly from JSON."""

    data: str = ""
    out: str = "run"
    seed: int = 0
    train: dict = dataclasses.field(default_factory=dict)
    model: dict = dataclasses.field(default_factory=dict)

    KEYS = ("data", "out", "seed", "train", "model")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.KEYS)
        if unknown:
            raise UsageError(f"unknown run config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.train_config()
        cfg.model_config()
        return cfg

    def train_config(self):
        from .training import TrainConfig

        try:
            return TrainConfig.from_dict({**self.train, "seed": self.seed})
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None

    def model_config(self):
        from .training import ModelConfig

        try:
            return ModelConfig.from_dict(self.model)
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None

    @staticmethod
    def defaults() -> dict:
        from .training import ModelConfig, TrainConfig

        train = TrainConfig().to_dict()
        train.pop("seed")
        return {"data": "", "out": "run", "seed": 0, "train": train,
                "model": ModelConfig().to_dict()}


def _load_run_config(args) -> RunConfig:
    raw = {}
    resume = Path(args.out) / "run.json" if getattr(args, "out", None) else None
    if not args.config and args.command == "track" and resume is not None and resume.exists():
        # tracking reuses the settings the template was trained with
        args.config = str(resume)
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{args.config}: top level must be an object")
    cfg = RunConfig.from_dict(raw)
    if getattr(args, "data", None):
        cfg.data = args.data
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    train = dict(cfg.train)
    if getattr(args, "steps", None) is not None:
        key = "template_steps" if args.command == "train-template" else "tracking_steps_per_frame"
        train[key] = args.steps
    if getattr(args, "no_refine_template", False):
        train["refine_template"] = False
    if getattr(args, "no_warm_start", False):
        train["warm_start_deform"] = False
    if getattr(args, "no_c2f", False):
        train["coarse_to_fine_deform"] = False
    cfg.train = train
    cfg.train_config()
    if not cfg.data:
        raise UsageError("no dataset given (--data or \"data\" in the config)")
    return cfg


def _configs_from_checkpoint(path: Path):
    from .autodiff import read_checkpoint
    from .training import ModelConfig, TrainConfig

    if not path.exists():
        raise FileNotFoundError(f"missing {path}; run train-template first")
    meta, _ = read_checkpoint(path)
    return TrainConfig.from_dict(meta["train"]), ModelConfig.from_dict(meta["model"])


# ---------------------------------------------------------------- commands


def _log_record(rec) -> None:
    print(rec.to_json(), flush=True)


def cmd_gen_data(args) -> int:
    from .synth import CameraRig, generate_dataset, make_scene

    if args.frames < 1 or args.cameras < 1 or args.size < 2:
        raise UsageError("frames and cameras must be >= 1 and size >= 2")
    try:
        scene = make_scene(args.scene, args.frames)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rig = CameraRig.ring(args.cameras, args.size)
    out = generate_dataset(scene, rig, args.frames, args.out, seed=args.seed,
                           gt_resolution=args.gt_resolution)
    print(json.dumps({"dataset": str(out), "scene": scene.name, "frames": args.frames,
                      "cameras": args.cameras, "size": args.size,
                      "images": args.frames * args.cameras}))
    return EXIT_OK


def cmd_train_template(args) -> int:
    from .synth import Dataset
    from .training import train_template

    cfg = _load_run_config(args)
    train, model = cfg.train_config(), cfg.model_config()
    dataset = Dataset(cfg.data)
    out = Path(cfg.out)
    train_template(dataset, train, model, out, log=_log_record)
    _write_run_config(out, cfg)
    print(json.dumps({"template": str(out / "template.ckpt"), "mesh": str(out / "mesh_0.obj")}))
    return EXIT_OK


def _parse_frames(spec: str, first: int = 1) -> list[int]:
    try:
        if "-" in spec or ".." in spec:
            a, b = spec.replace("..", "-").split("-", 1)
            frames = list(range(int(a), int(b) + 1))
        else:
            frames = [int(spec)]
    except ValueError:
        raise UsageError(f"bad frame range {spec!r}; use N or A-B") from None
    if not frames or frames[0] < first:
        raise UsageError(f"frames start at {first}")
    return frames


def cmd_track(args) -> int:
    from .synth import Dataset
    from .training import TEMPLATE_CKPT, deform_ckpt_name, mesh_name, track_frame

    cfg = _load_run_config(args)
    out = Path(cfg.out)
    _, model = _configs_from_checkpoint(out / TEMPLATE_CKPT)
    train = cfg.train_config()
    dataset = Dataset(cfg.data)
    frames = _parse_frames(args.frames)
    if frames[-1] >= dataset.num_frames:
        raise FileNotFoundError(f"dataset {cfg.data} has {dataset.num_frames} frames; "
                                f"frame {frames[-1]} requested")
    template = None
    for t in frames:
        template, _, _ = track_frame(t, dataset, train, model, out, template, log=_log_record)
        print(json.dumps({"frame": t, "deform": str(out / deform_ckpt_name(t)),
                          "mesh": str(out / mesh_name(t))}), flush=True)
    return EXIT_OK


def _load_fields(run: Path, t: int):
    from .training import TEMPLATE_CKPT, deform_ckpt_name, load_deform, load_template

    train, model = _configs_from_checkpoint(run / TEMPLATE_CKPT)
    template = load_template(run / TEMPLATE_CKPT, model, train)
    deform = None
    if t > 0:
        path = run / deform_ckpt_name(t)
        if not path.exists():
            raise FileNotFoundError(f"missing {path}; run track for frame {t} first")
        deform = load_deform(path, model, train, t)
    return train, model, template, deform


def cmd_extract(args) -> int:
    from .geometry import write_obj
    from .training import extract_mesh, mesh_name

    run = Path(args.run)
    _, model, template, deform = _load_fields(run, args.frame)
    res = args.resolution or model.mesh_resolution
    if res < 2:
        raise UsageError("resolution must be >= 2")
    mesh = extract_mesh(template, deform, res)
    path = Path(args.out) if args.out else run / mesh_name(args.frame)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_obj(path, mesh)
    print(json.dumps({"mesh": str(path), "vertices": len(mesh.vertices),
                      "triangles": len(mesh.triangles)}))
    return EXIT_OK


def evaluate_meshes(mesh_dir: Path, gt_dir: Path, frames: list[int], n_points: int, seed: int) -> dict:
    from .geometry import mesh_chamfer, read_mesh

    per_frame = {}
    for t in frames:
        pred = read_mesh(_mesh_path(mesh_dir, t))
        gt = read_mesh(_mesh_path(gt_dir, t))
        per_frame[str(t)] = mesh_chamfer(pred, gt, n_points, np.random.default_rng([seed, t]))
    avg = float(np.mean(list(per_frame.values()))) if per_frame else float("nan")
    return {"chamfer": per_frame, "average": avg, "points": n_points}


def _mesh_path(d: Path, t: int) -> Path:
    for cand in (d / f"mesh_{t}.obj", d / "gt" / f"mesh_{t}.obj", d / f"mesh_{t}.ply"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no mesh for frame {t} under {d}")


def cmd_eval(args) -> int:
    mesh_dir, gt_dir = Path(args.meshes), Path(args.gt)
    if args.frames:
        frames = _parse_frames(args.frames, first=0)
    else:
        frames = sorted(int(p.stem.split("_")[1]) for p in mesh_dir.glob("mesh_*.obj"))
        if not frames:
            raise FileNotFoundError(f"no mesh_<t>.obj files in {mesh_dir}")
    report = evaluate_meshes(mesh_dir, gt_dir, frames, args.points, args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.report:
        Path(args.report).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_render(args) -> int:
    from PIL import Image

    from .renderer import Camera, RenderSettings, render_image
    from .synth import to_uint8

    run = Path(args.run)
    train, model, template, deform = _load_fields(run, args.frame)
    cams_path = Path(args.cameras)
    if cams_path.is_dir():
        cams_path = cams_path / "cameras.json"
    cams = json.loads(cams_path.read_text())["cameras"]
    if not 0 <= args.camera < len(cams):
        raise UsageError(f"camera index {args.camera} outside [0, {len(cams)})")
    cam = Camera.from_dict(cams[args.camera])
    settings = RenderSettings(train.samples_per_ray, None, None, None, model.normal_rotation)
    rgb, wsum = render_image(template.sdf, template.rgb, template.to_alpha, deform, cam, settings)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(rgb), "RGB").save(out)
    result = {"image": str(out)}
    if args.weights:
        write_pgm(args.weights, wsum)
        result["weights"] = args.weights
    print(json.dumps(result))
    return EXIT_OK


def write_pgm(path, values: np.ndarray) -> None:
    """Binary 8-bit PGM of values in [0, 1]."""
    img = np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def cmd_config(args) -> int:
    if args.defaults:
        print(json.dumps(RunConfig.defaults(), indent=2, sort_keys=True))
        return EXIT_OK
    if args.check:
        raw = json.loads(Path(args.check).read_text())
        RunConfig.from_dict(raw)
        print(json.dumps({"ok": True, "config": args.check}))
        return EXIT_OK
    raise UsageError("config needs --defaults or --check FILE")


def _write_run_config(out: Path, cfg: RunConfig) -> None:
    (out / "run.json").write_text(json.dumps(dataclasses.asdict(cfg), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- parser


def _keys_epilog() -> str:
    d = RunConfig.defaults()
    lines = ["config keys read (JSON, unknown keys rejected):", "  data, out, seed"]
    lines.append("  train: " + ", ".join(sorted(d["train"])))
    lines.append("  model: " + ", ".join(sorted(d["model"])))
    grid = sorted(d["model"]["sdf_grid"])
    lines.append("  model.sdf_grid / model.deform_grid: " + ", ".join(grid))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="sdftrack", description="Template-based dynamic SDF reconstruction")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker thread cap (default ${THREADS_ENV} or all cores); 1 is bit-deterministic")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic multi-view dataset")
    g.add_argument("--scene", default="blob-walk")
    g.add_argument("--frames", type=int, default=5)
    g.add_argument("--cameras", type=int, default=8)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--gt-resolution", type=int, default=128)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def training_args(sp, steps_help):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--data", help="dataset directory")
        sp.add_argument("--out", help="run directory for checkpoints and meshes")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int, help=steps_help)
        sp.add_argument("--no-refine-template", action="store_true",
                        help="freeze the template while tracking")
        sp.add_argument("--no-warm-start", action="store_true",
                        help="start every deformation field from the identity")
        sp.add_argument("--no-c2f", action="store_true",
                        help="all deformation grid levels active from the first step")

    t = sub.add_parser("train-template", help="fit the frame-0 template", epilog=_keys_epilog(),
                       formatter_class=fmt)
    training_args(t, "template steps (tracking steps follow at 10%%)")
    t.set_defaults(func=cmd_train_template)

    k = sub.add_parser("track", help="fit deformation fields for frames A-B", epilog=_keys_epilog(),
                       formatter_class=fmt)
    training_args(k, "tracking steps per frame")
    k.add_argument("--frames", required=True, help="frame or inclusive range, e.g. 1-4")
    k.set_defaults(func=cmd_track)

    e = sub.add_parser("extract", help="marching-cubes mesh of frame t",
                       epilog="reads template.ckpt and deform_t<t>.ckpt from the run directory; "
                              "model.mesh_resolution is the default resolution")
    e.add_argument("--run", required=True)
    e.add_argument("--frame", type=int, default=0)
    e.add_argument("--resolution", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_extract)

    v = sub.add_parser("eval", help="L1-Chamfer report against ground-truth meshes")
    v.add_argument("--meshes", required=True, help="directory with mesh_<t>.obj")
    v.add_argument("--gt", required=True, help="dataset directory or directory with mesh_<t>.obj")
    v.add_argument("--frames", help="frame or range; default every mesh found")
    v.add_argument("--points", type=int, default=100_000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report", help="also write the JSON report here")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render one view of frame t",
                       epilog="reads train.samples_per_ray and model.normal_rotation from the checkpoint")
    r.add_argument("--run", required=True)
    r.add_argument("--cameras", required=True, help="dataset directory or cameras.json")
    r.add_argument("--camera", type=int, default=0)
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--out", required=True, help="PNG path")
    r.add_argument("--weights", help="optional PGM path for the accumulated weight W_r")
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("config", help="print or validate a RunConfig", epilog=_keys_epilog(),
                       formatter_class=fmt)
    c.add_argument("--defaults", action="store_true")
    c.add_argument("--check")
    c.set_defaults(func=cmd_config)
    return p


def set_threads(n: int | None) -> None:
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    import numba
    from threadpoolctl import threadpool_limits

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    threadpool_limits(n)


def main(argv=None) -> int:
    from .autodiff import CheckpointError
    from .fields import FieldError
    from .geometry import MeshFormatError
    from .training import NumericalError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        set_threads(args.threads)
        return args.func(args)
    except (MeshFormatError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FieldError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
