"""Command-line entry point.

Configuration precedence: built-in defaults, then ``--config FILE`` (JSON),
then command-line flags. ``--set section.key=value`` reaches any config
field; the common ones also have dedicated flags. Every run directory gets
the effective ``config.json`` so it can be reproduced.

Exit codes: 0 success, 1 input error, 2 numerical abort.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import click
import numpy as np
import torch

from .dataset import PosedDataset, load_dataset, save_dataset
from .errors import CorruptedStateError, InputError, VoldisError
from .geometry import SimilarityTransform, rotation_about_axis
from .images import from_uint8, load_png, save_pfm, save_png
from .render import RadianceModel, RenderResult, Variant, render_disentangled, render_view
from .train import (TrainConfig, config_dict, fit_field, load_model, make_model, prepare_dataset, psnr)

log = logging.getLogger("voldis")

EXIT_INPUT = 1
EXIT_NUMERIC = 2


# --- configuration --------------------------------------------------------------

@dataclass
class FieldSpec:
    kind: str = "voxel"              # voxel | mlp
    voxel_resolution: int = 64
    bbox_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bbox_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    view_dependent: bool = False
    mlp_width: int = 128
    mlp_depth: int = 4
    pos_features: int = 128
    pos_sigma: float = 10.0

    def build(self, fine: bool, seed: int) -> RadianceModel:
        if self.kind == "voxel":
            return make_model("voxel", fine, seed, resolution=(self.voxel_resolution,) * 3,
                              bbox_min=self.bbox_min, bbox_max=self.bbox_max,
                              view_dependent=self.view_dependent)
        if self.kind == "mlp":
            return make_model("mlp", fine, seed, width=self.mlp_width, depth=self.mlp_depth,
                              pos_features=self.pos_features, pos_sigma=self.pos_sigma)
        raise InputError(f"field.kind must be 'voxel' or 'mlp', got {self.kind!r}")


@dataclass
class GenerateSpec:
    scene: str = "default"           # default | occluder
    views: int = 20
    resolution: tuple[int, int] = (64, 64)
    supersample: int = 2
    n_steps: int = 512


def _manip_config_cls():
    from .manip import ManipConfig
    return ManipConfig


@dataclass
class RunConfig:
    field: FieldSpec = dataclasses.field(default_factory=FieldSpec)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    manip: object = dataclasses.field(default_factory=lambda: _manip_config_cls()())
    generate: GenerateSpec = dataclasses.field(default_factory=GenerateSpec)

    def to_dict(self) -> dict:
        return {"field": _plain(asdict(self.field)), "train": config_dict(self.train),
                "manip": _plain(asdict(self.manip)), "generate": _plain(asdict(self.generate))}


RUN_KEYS = ("data", "target", "full", "bg")  # provenance entries written next to the config
SECTIONS = {"field": FieldSpec, "train": TrainConfig, "generate": GenerateSpec}


def _section_cls(name: str):
    return _manip_config_cls() if name == "manip" else SECTIONS[name]


def _plain(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(cls, key: str, value):
    """Convert a JSON or flag value to the type of ``cls.key``'s default."""
    default = getattr(cls(), key)
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as exc:
            raise InputError(f"{key}: cannot parse {value!r}") from exc
    if isinstance(default, tuple) or (default is None and isinstance(value, list)):
        if not isinstance(value, (list, tuple)):
            raise InputError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InputError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise InputError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise InputError(f"{key}: expected a number, got {value!r}")
        return float(value)
    return value


def _check_key(section: str, key: str):
    if section not in ("field", "train", "manip", "generate"):
        raise InputError(f"unknown config section {section!r}")
    cls = _section_cls(section)
    if key not in {f.name for f in fields(cls)}:
        raise InputError(f"unknown config key {section}.{key}")
    return cls


def load_config(path: str | None, overrides: list[tuple[str, object]]) -> RunConfig:
    """Defaults, then the config file, then ``overrides``; each section is validated once at the end."""
    updates: dict[str, dict] = {s: {} for s in ("field", "train", "manip", "generate")}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InputError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{p}: malformed config ({exc})") from exc
        if not isinstance(raw, dict):
            raise InputError(f"{p}: config must be a JSON object")
        for section, values in raw.items():
            if section in RUN_KEYS:
                continue
            if not isinstance(values, dict):
                raise InputError(f"{p}: unknown config key {section!r}")
            for key, value in values.items():
                cls = _check_key(section, key)
                updates[section][key] = _coerce(cls, key, value)
    for dotted, value in overrides:
        if "." not in dotted:
            raise InputError(f"override {dotted!r} must look like section.key")
        section, key = dotted.split(".", 1)
        cls = _check_key(section, key)
        updates[section][key] = _coerce(cls, key, value)
    cfg = RunConfig()
    for section, values in updates.items():
        if values:
            setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **values))
    return cfg


def write_config(cfg: RunConfig, out: Path, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.to_dict()
    if extra:
        d.update(extra)
    (out / "config.json").write_text(json.dumps(d, indent=1, sort_keys=True), encoding="utf-8")


# --- shared options -----------------------------------------------------------

def common_options(f):
    f = click.option("--config", "config_path", type=str, default=None, help="JSON config file.")(f)
    f = click.option("--set", "sets", multiple=True, metavar="SECTION.KEY=VALUE",
                     help="Override any config field (repeatable).")(f)
    f = click.option("--seed", type=int, default=None, help="Random seed (default 0).")(f)
    f = click.option("--threads", type=int, default=None, help="Cap on worker threads.")(f)
    f = click.option("--deterministic/--no-deterministic", default=None,
                     help="Force deterministic kernels and ordered reductions.")(f)
    return f


def _setup(config_path, sets, seed, threads, deterministic, extra=()) -> RunConfig:
    overrides = []
    for s in sets:
        if "=" not in s:
            raise InputError(f"--set expects SECTION.KEY=VALUE, got {s!r}")
        k, v = s.split("=", 1)
        overrides.append((k.strip(), v.strip()))
    overrides.extend((k, v) for k, v in extra if v is not None)
    if seed is not None:
        overrides += [("train.seed", seed), ("manip.seed", seed)]
    if deterministic is not None:
        overrides.append(("train.deterministic", deterministic))
    cfg = load_config(config_path, overrides)
    if threads is not None:
        if threads < 1:
            raise InputError("--threads must be >= 1")
        torch.set_num_threads(threads)
    if cfg.train.deterministic:
        torch.use_deterministic_algorithms(True)
    click.echo(f"seed: {cfg.train.seed}")
    return cfg


def export_render(result: RenderResult, out: Path, stem: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / f"{stem}.png", result.color)
    save_pfm(out / f"{stem}_depth.pfm", result.depth.astype(np.float32))
    save_pfm(out / f"{stem}_disparity.pfm", result.disparity.astype(np.float32))


def _run_data(run: Path) -> str | None:
    cfg_path = run / "config.json"
    if cfg_path.is_file():
        try:
            return json.loads(cfg_path.read_text(encoding="utf-8")).get("data")
        except json.JSONDecodeError:
            return None
    return None


def _dataset_for(data: str | None, *runs: Path) -> tuple[PosedDataset, str]:
    if data is None:
        for r in runs:
            data = _run_data(r)
            if data:
                break
    if data is None:
        raise InputError("no dataset given; pass --data or fit with a recorded dataset path")
    return load_dataset(data), data


def _require_run(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _pose_indices(ds: PosedDataset, pose_index: int | None) -> list[int]:
    if pose_index is None:
        return list(range(len(ds)))
    if not 0 <= pose_index < len(ds):
        raise InputError(f"--pose-index {pose_index} outside 0..{len(ds) - 1}")
    return [pose_index]


# --- commands -----------------------------------------------------------------

@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress.")
def main(verbose):
    """Disentangle a radiance-field scene into foreground and background volumes and edit them."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command()
@click.option("--out", required=True, type=str, help="Dataset directory to create.")
@click.option("--scene", type=click.Choice(["default", "occluder"]), default=None)
@click.option("--views", type=int, default=None)
@click.option("--resolution", type=int, nargs=2, default=None, metavar="W H")
@click.option("--supersample", type=int, default=None)
@common_options
def generate(out, scene, views, resolution, supersample, config_path, sets, seed, threads, deterministic):
    """Render an analytic scene into a posed dataset with masks and oracle views."""
    from .scenes import default_scene, generate_dataset, occluder_scene
    cfg = _setup(config_path, sets, seed, threads, deterministic,
                 [("generate.scene", scene), ("generate.views", views),
                  ("generate.resolution", list(resolution) if resolution else None),
                  ("generate.supersample", supersample)])
    g = cfg.generate
    scenes = {"default": default_scene, "occluder": occluder_scene}
    if g.scene not in scenes:
        raise InputError(f"unknown scene {g.scene!r}")
    gen = generate_dataset(scenes[g.scene](), g.views, resolution=tuple(g.resolution), seed=cfg.train.seed,
                           supersample=g.supersample, n_steps=g.n_steps)
    root = Path(out)
    save_dataset(gen.dataset, root, depth=[r.depth for r in gen.oracle.full])
    for name, renders in (("full", gen.oracle.full), ("background", gen.oracle.background),
                          ("foreground", gen.oracle.foreground)):
        for i, r in enumerate(renders):
            export_render(r, root / "oracle" / name, f"{i:04d}")
    write_config(cfg, root)
    click.echo(f"wrote {len(gen.dataset)} views to {root}")


@main.command()
@click.option("--data", required=True, type=str, help="Dataset directory.")
@click.option("--target", type=click.Choice(["full", "background"]), required=True,
              help="Plain loss on every pixel, or masked loss for the background.")
@click.option("--out", required=True, type=str, help="Run directory.")
@click.option("--iterations", type=int, default=None)
@click.option("--lr-start", type=float, default=None)
@click.option("--lr-end", type=float, default=None)
@click.option("--rays-per-batch", type=int, default=None)
@click.option("--n-coarse", type=int, default=None)
@click.option("--n-fine", type=int, default=None)
@click.option("--fine/--no-fine", "fine_pass", default=None, help="Train a separate fine field.")
@click.option("--field", "field_kind", type=click.Choice(["voxel", "mlp"]), default=None)
@click.option("--voxel-resolution", type=int, default=None)
@click.option("--mask-dilation", type=int, default=None)
@common_options
def fit(data, target, out, iterations, lr_start, lr_end, rays_per_batch, n_coarse, n_fine, fine_pass,
        field_kind, voxel_resolution, mask_dilation, config_path, sets, seed, threads, deterministic):
    """Fit the full scene, or the background with the object masked out."""
    cfg = _setup(config_path, sets, seed, threads, deterministic, [
        ("train.iterations", iterations), ("train.lr_start", lr_start), ("train.lr_end", lr_end),
        ("train.rays_per_batch", rays_per_batch), ("train.n_coarse", n_coarse), ("train.n_fine", n_fine),
        ("train.fine_pass", fine_pass), ("field.kind", field_kind),
        ("field.voxel_resolution", voxel_resolution), ("train.mask_dilation", mask_dilation)])
    ds = load_dataset(data)
    run = Path(out)
    write_config(cfg, run, {"data": str(Path(data).resolve()), "target": target})
    model = cfg.field.build(cfg.train.fine_pass and cfg.train.n_fine > 0, cfg.train.seed)
    kind = "full" if target == "full" else "masked_bg"
    result = fit_field(ds, model, kind, cfg.train, run_dir=run,
                       progress=lambda row: click.echo(
                           f"iter {row['iter']} loss {row['loss']:.6g} lr {row['lr']:.3g} psnr {row['psnr']:.2f}"))
    # held-out renders with their fit-time PSNR, for checkpoint fidelity checks
    fitted = prepare_dataset(ds, cfg.train)
    scores = {}
    for i in result.holdout_views or result.train_views[:1]:
        r = render_view(model, fitted.intrinsics[i], fitted.poses[i], cfg.train.sampling(),
                        fitted.t_near, fitted.t_far)
        export_render(r, run / "renders", f"{i:04d}")
        mask = None if kind == "full" else fitted.masks[i] == 0
        scores[str(i)] = psnr(r.color, fitted.images[i], mask)
    (run / "renders" / "psnr.json").write_text(json.dumps(scores, indent=1), encoding="utf-8")
    click.echo(f"checkpoints in {run / 'checkpoints'}")


@main.command()
@click.option("--full", "full_dir", required=True, type=str, help="Run directory of the full-scene fit.")
@click.option("--bg", "bg_dir", required=True, type=str, help="Run directory of the background fit.")
@click.option("--out", required=True, type=str)
@click.option("--data", type=str, default=None, help="Dataset (defaults to the one the full fit used).")
@click.option("--pose-index", type=int, default=None)
@common_options
def extract(full_dir, bg_dir, out, data, pose_index, config_path, sets, seed, threads, deterministic):
    """Render the extracted foreground (plus background and recombination) for dataset cameras."""
    cfg = _setup(config_path, sets, seed, threads, deterministic)
    full_run, bg_run = _require_run(full_dir, "full run"), _require_run(bg_dir, "background run")
    full, bg = load_model(full_run), load_model(bg_run)
    ds, data = _dataset_for(data, full_run, bg_run)
    out_dir = Path(out)
    write_config(cfg, out_dir, {"data": data, "full": str(full_run), "bg": str(bg_run)})
    s = cfg.train.sampling()
    for i in _pose_indices(ds, pose_index):
        v = render_disentangled(full, bg, ds.intrinsics[i], ds.poses[i], s, ds.t_near, ds.t_far)
        export_render(v.foreground, out_dir / "renders", f"fg_{i:04d}")
        export_render(v.background, out_dir / "renders", f"bg_{i:04d}")
        export_render(v.composite, out_dir / "renders", f"composite_{i:04d}")
    click.echo(f"renders in {out_dir / 'renders'}")


@main.command()
@click.option("--checkpoint", required=True, type=str, help="Run directory or checkpoint directory.")
@click.option("--pose-index", type=int, default=0)
@click.option("--data", type=str, default=None)
@click.option("--out", type=str, default="renders", help="Output directory.")
@common_options
def render(checkpoint, pose_index, data, out, config_path, sets, seed, threads, deterministic):
    """Render one dataset camera from a fitted checkpoint and report PSNR."""
    run = _require_run(checkpoint, "checkpoint")
    run_cfg = run / "config.json"
    if config_path is None and run_cfg.is_file():
        config_path = str(run_cfg)
    cfg = _setup(config_path, sets, seed, threads, deterministic)
    model = load_model(run)
    ds, _ = _dataset_for(data, run)
    ds = prepare_dataset(ds, cfg.train)
    (i,) = _pose_indices(ds, pose_index)
    r = render_view(model, ds.intrinsics[i], ds.poses[i], cfg.train.sampling(), ds.t_near, ds.t_far)
    out_dir = Path(out)
    export_render(r, out_dir, f"{i:04d}")
    target = json.loads(run_cfg.read_text(encoding="utf-8")).get("target") if run_cfg.is_file() else "full"
    mask = ds.masks[i] == 0 if target == "background" else None
    click.echo(f"psnr: {psnr(r.color, ds.images[i], mask):.4f}")


@main.command()
@click.option("--bg", "bg_dir", required=True, type=str)
@click.option("--out", required=True, type=str)
@click.option("--data", type=str, default=None)
@click.option("--pose-index", type=int, default=None)
@common_options
def remove(bg_dir, out, data, pose_index, config_path, sets, seed, threads, deterministic):
    """Render the scene with the object removed (the background volume alone)."""
    from .manip import remove_object
    cfg = _setup(config_path, sets, seed, threads, deterministic)
    bg_run = _require_run(bg_dir, "background run")
    bg = load_model(bg_run)
    ds, data = _dataset_for(data, bg_run)
    out_dir = Path(out)
    write_config(cfg, out_dir, {"data": data, "bg": str(bg_run)})
    for i in _pose_indices(ds, pose_index):
        r = remove_object(bg, ds.intrinsics[i], ds.poses[i], cfg.train.sampling(), ds.t_near, ds.t_far)
        export_render(r, out_dir / "renders", f"removed_{i:04d}")


def _manip_setup(full_dir, bg_dir, data, out, cfg):
    full_run, bg_run = _require_run(full_dir, "full run"), _require_run(bg_dir, "background run")
    full, bg = load_model(full_run), load_model(bg_run)
    ds, data = _dataset_for(data, full_run, bg_run)
    out_dir = Path(out)
    write_config(cfg, out_dir, {"data": data, "full": str(full_run), "bg": str(bg_run)})
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    return full, bg, ds, out_dir


def _manip_options(f):
    f = click.option("--full", "full_dir", required=True, type=str)(f)
    f = click.option("--bg", "bg_dir", required=True, type=str)(f)
    f = click.option("--out", required=True, type=str)(f)
    f = click.option("--data", type=str, default=None)(f)
    f = click.option("--iterations", type=int, default=None)(f)
    return f


@main.command()
@_manip_options
@common_options
def camouflage(full_dir, bg_dir, out, data, iterations, config_path, sets, seed, threads, deterministic):
    """Recolor the object to match its background, keeping its depth."""
    from .manip import camouflage as run_camouflage, recolored_render, write_trace
    cfg = _setup(config_path, sets, seed, threads, deterministic, [("manip.iterations", iterations)])
    full, bg, ds, out_dir = _manip_setup(full_dir, bg_dir, data, out, cfg)
    res = run_camouflage(full, bg, ds, cfg.manip)
    write_trace(out_dir / "metrics.csv", res.trace)
    res.field.save(out_dir / "checkpoints" / "override.vdsf")
    for i, v in enumerate(res.extra["views"]):
        export_render(recolored_render(v, res.field), out_dir / "renders", f"camouflage_{i:04d}")
    click.echo(f"objective {res.initial:.6g} -> {res.final:.6g}")


@main.command()
@_manip_options
@common_options
def nonneg(full_dir, bg_dir, out, data, iterations, config_path, sets, seed, threads, deterministic):
    """Learn a light-adding residual volume that makes the full scene look like the background."""
    from .field import save_field
    from .manip import nonnegative_composite, nonnegative_inpaint, residual_render, write_trace
    from .render import assemble
    cfg = _setup(config_path, sets, seed, threads, deterministic, [("manip.iterations", iterations)])
    full, bg, ds, out_dir = _manip_setup(full_dir, bg_dir, data, out, cfg)
    res = nonnegative_inpaint(full, bg, ds, cfg.manip)
    write_trace(out_dir / "metrics.csv", res.trace)
    save_field(res.field.coarse, out_dir / "checkpoints" / "residual.vdsf")
    for i, v in enumerate(res.extra["views"]):
        r = residual_render(res.field, v.camera, cfg.manip, ds.t_near, ds.t_far)
        export_render(r, out_dir / "renders", f"residual_{i:04d}")
        full_r = assemble(v.full_color, v.weights, v.t, v.camera.intrinsics)
        save_png(out_dir / "renders" / f"nonneg_{i:04d}.png", nonnegative_composite(full_r, r))
    click.echo(f"objective {res.initial:.6g} -> {res.final:.6g}")


@main.command()
@_manip_options
@click.option("--target", "target_text", type=str, default=None, help="Color name, e.g. red.")
@click.option("--target-image", type=str, default=None, help="Reference image (PNG).")
@common_options
def semantic(full_dir, bg_dir, out, data, iterations, target_text, target_image, config_path, sets, seed,
             threads, deterministic):
    """Recolor the object toward a target with the built-in histogram scorer."""
    from .manip import HistogramScorer, recolored_render, semantic_manipulate, write_trace
    if (target_text is None) == (target_image is None):
        raise InputError("give exactly one of --target or --target-image")
    cfg = _setup(config_path, sets, seed, threads, deterministic, [("manip.iterations", iterations)])
    full, bg, ds, out_dir = _manip_setup(full_dir, bg_dir, data, out, cfg)
    target = target_text if target_text is not None else torch.from_numpy(from_uint8(load_png(target_image))[..., :3])
    res = semantic_manipulate(full, bg, ds, HistogramScorer(), target, cfg.manip)
    write_trace(out_dir / "metrics.csv", res.trace)
    res.field.save(out_dir / "checkpoints" / "override.vdsf")
    for i, v in enumerate(res.extra["views"]):
        export_render(recolored_render(v, res.field), out_dir / "renders", f"semantic_{i:04d}")
    click.echo(f"objective {res.initial:.6g} -> {res.final:.6g}; similarity "
               f"{res.extra['similarity_initial']:.4f} -> {res.extra['similarity_final']:.4f}")


@main.command()
@click.option("--full", "full_dir", required=True, type=str)
@click.option("--bg", "bg_dir", required=True, type=str)
@click.option("--out", required=True, type=str)
@click.option("--data", type=str, default=None)
@click.option("--pose-index", type=int, default=None)
@click.option("--translate", type=float, nargs=3, default=(0.0, 0.0, 0.0), metavar="X Y Z")
@click.option("--axis", type=float, nargs=3, default=(0.0, 1.0, 0.0), metavar="X Y Z")
@click.option("--angle", type=float, default=0.0, help="Rotation about --axis, degrees.")
@click.option("--scale", type=float, default=1.0)
@click.option("--focal-scale", type=float, default=1.0, help="Zoom the object by scaling its ray focal length.")
@click.option("--variant", type=click.Choice([v.value for v in Variant]), default="c1")
@common_options
def transform(full_dir, bg_dir, out, data, pose_index, translate, axis, angle, scale, focal_scale, variant,
              config_path, sets, seed, threads, deterministic):
    """Move, rotate, scale or zoom the object and recombine it with the background."""
    from .manip import transform_foreground
    cfg = _setup(config_path, sets, seed, threads, deterministic)
    full_run, bg_run = _require_run(full_dir, "full run"), _require_run(bg_dir, "background run")
    full, bg = load_model(full_run), load_model(bg_run)
    ds, data = _dataset_for(data, full_run, bg_run)
    if np.linalg.norm(axis) == 0:
        raise InputError("--axis must be nonzero")
    T = SimilarityTransform(scale, rotation_about_axis(axis, np.deg2rad(angle)), np.asarray(translate))
    out_dir = Path(out)
    write_config(cfg, out_dir, {"data": data, "full": str(full_run), "bg": str(bg_run)})
    for i in _pose_indices(ds, pose_index):
        r = transform_foreground(full, bg, ds.intrinsics[i], ds.poses[i], cfg.manip.sampling(), ds.t_near,
                                 ds.t_far, transform=T, focal_scale=focal_scale, variant=variant)
        export_render(r.composite, out_dir / "renders", f"transform_{i:04d}")
        export_render(r.foreground, out_dir / "renders", f"transform_fg_{i:04d}")


@main.command()
@click.argument("run_dir", type=str)
def report(run_dir):
    """Summarize a run directory's metrics.csv into report/summary.txt and curve plots."""
    from .report import write_report
    summary = write_report(Path(run_dir))
    click.echo(summary)


def run(argv=None) -> int:
    """Invoke the CLI and map failures to exit codes."""
    try:
        main.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_INPUT
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_INPUT
    except CorruptedStateError as exc:
        click.echo(f"numerical abort: {exc}", err=True)
        return EXIT_NUMERIC
    except InputError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INPUT
    except VoldisError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_INPUT
    return 0


def entry() -> None:
    sys.exit(run())


if __name__ == "__main__":
    entry()
