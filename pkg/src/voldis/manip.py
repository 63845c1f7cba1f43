"""Edits made possible by a disentangled scene.

Every manipulation here keeps the fitted full and background volumes frozen.
Recoloring edits (camouflage, semantic) optimize a signed color offset on
top of the extracted foreground colors and never touch a compositing weight.
Non-negative inpainting learns a separate residual volume whose renders are
added to the full scene.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rng
from .dataset import PosedDataset
from .errors import CorruptedStateError, InputError, ScorerError
from .field import TAG_OVERRIDE, VoxelGridField, read_container, trilinear_corners, write_container
from .geometry import CameraIntrinsics, Pose, Rays, SimilarityTransform, camera_rays, generate_rays, pixel_grid
from .render import (RadianceModel, RenderResult, SamplingConfig, Variant, assemble,
                     composite, extract_foreground, render_composite, render_rays, render_rays_aligned,
                     render_view, _chunks)
from .train import SEMANTIC_RESOLUTION, AdamState, adam_step, dilate_masks

MASK_TAU = 0.05
PRECEDENCE = 1e-3
CLIP_GRID = 128
CLIP_SIZE = 224


@dataclass
class ManipConfig:
    iterations: int = 500
    rays_per_batch: int = 1024
    lr_start: float = 0.05
    lr_end: float = 0.005
    seed: int = 0
    n_coarse: int = 64
    n_fine: int = 0
    grid_resolution: tuple[int, int, int] = (32, 32, 32)
    bbox_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bbox_max: tuple[float, float, float] = (1.0, 1.0, 1.0)
    residual_density: float = 1e-3   # initial residual density, near-empty
    residual_color: float = 0.5
    mask_tau: float = MASK_TAU
    mask_dilation: int = 0           # pixels; grows dataset masks to cover partially covered rims
    target_weight: float = 1.0       # text/target similarity term
    image_weight: float = 1.0        # similarity to the background view
    background_weight: float = 1.0   # pixel constraint outside the mask
    semantic_resolution: tuple[int, int] = SEMANTIC_RESOLUTION
    clip_grid: int = CLIP_GRID
    clip_size: int = CLIP_SIZE

    def __post_init__(self):
        if self.iterations < 0 or self.rays_per_batch < 1:
            raise InputError("iterations must be >= 0 and rays_per_batch >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise InputError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        self.grid_resolution = tuple(int(v) for v in self.grid_resolution)
        self.semantic_resolution = tuple(int(v) for v in self.semantic_resolution)

    def sampling(self, jitter: bool = False) -> SamplingConfig:
        return SamplingConfig(self.n_coarse, self.n_fine, jitter=jitter, seed=self.seed)

    def lr(self, k: int) -> float:
        if self.iterations == 0:
            return self.lr_start
        return self.lr_start * (self.lr_end / self.lr_start) ** (k / self.iterations)


# --- trainable fields -----------------------------------------------------------

class ColorOverrideField(nn.Module):
    """Replacement foreground colors ``c'_fg = c_fg + offset(p)``.

    The offset is a zero-initialized vertex grid, so an untrained override
    reproduces the extracted foreground exactly. Weights are not part of
    this module; callers pass the frozen source weights alongside.
    """

    tag = TAG_OVERRIDE

    def __init__(self, resolution=(32, 32, 32), bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0)):
        super().__init__()
        self.resolution = tuple(int(r) for r in resolution)
        if len(self.resolution) != 3 or min(self.resolution) < 2:
            raise InputError(f"override grid needs >= 2 vertices per axis, got {resolution}")
        self.bbox_min = np.asarray(bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(bbox_max, dtype=np.float64)
        if np.any(self.bbox_max <= self.bbox_min):
            raise InputError(f"invalid bounding box {bbox_min} .. {bbox_max}")
        self.offset = nn.Parameter(torch.zeros(*self.resolution, 3))

    def offsets(self, positions: torch.Tensor) -> torch.Tensor:
        flat_p = positions.reshape(-1, 3).to(self.offset.dtype)
        idx, wts, inside = trilinear_corners(flat_p, self.bbox_min, self.bbox_max, self.resolution)
        corners = self.offset.reshape(-1, 3).index_select(0, idx.reshape(-1)).reshape(-1, 8, 3)
        out = (corners * wts.unsqueeze(-1)).sum(dim=1) * inside.unsqueeze(-1).to(corners.dtype)
        return out.reshape(*positions.shape[:-1], 3)

    def forward(self, positions: torch.Tensor, fg_colors: torch.Tensor) -> torch.Tensor:
        return fg_colors + self.offsets(positions).to(fg_colors.dtype)

    def save(self, path) -> None:
        meta = struct.pack("<3I6d", *self.resolution, *self.bbox_min, *self.bbox_max)
        write_container(path, self.tag, meta, self.offset.detach().reshape(-1).numpy())

    @classmethod
    def load(cls, path) -> ColorOverrideField:
        tag, meta, values = read_container(path)
        if tag != cls.tag:
            raise InputError(f"{path}: not a color override container (tag {tag})")
        vals = struct.unpack("<3I6d", meta)
        field_ = cls(vals[:3], vals[3:6], vals[6:9])
        if values.size != field_.offset.numel():
            raise InputError(f"{path}: override grid size does not match its header")
        with torch.no_grad():
            field_.offset.copy_(torch.from_numpy(values.reshape(field_.offset.shape)))
        return field_


def make_residual_field(cfg: ManipConfig) -> RadianceModel:
    """Near-empty voxel volume; renders are nonnegative because w >= 0 and colors lie in [0, 1]."""
    return RadianceModel(VoxelGridField(cfg.grid_resolution, cfg.bbox_min, cfg.bbox_max,
                                        init_density=cfg.residual_density, init_color=cfg.residual_color,
                                        seed=cfg.seed))


# --- frozen per-view data -----------------------------------------------------

@dataclass
class Camera:
    intrinsics: CameraIntrinsics
    pose: Pose


def dataset_cameras(dataset: PosedDataset) -> list[Camera]:
    return [Camera(k, p) for k, p in zip(dataset.intrinsics, dataset.poses)]


@dataclass
class FrozenView:
    """Everything a recoloring edit needs for one camera, per ray and sample."""

    camera: Camera
    positions: torch.Tensor   # (R, N, 3) world points of the shared samples
    t: torch.Tensor           # (R, N)
    w_fg: torch.Tensor        # (R, N) signed
    c_fg: torch.Tensor        # (R, N, 3) signed
    weights: torch.Tensor     # (R, N) w_bg + w_fg
    bg_color: torch.Tensor    # (R, 3) background volume render
    full_color: torch.Tensor  # (R, 3) full volume render
    fg_color: torch.Tensor    # (R, 3) unedited foreground contribution

    @property
    def shape(self) -> tuple[int, int]:
        return self.camera.intrinsics.height, self.camera.intrinsics.width

    def fg_opacity(self) -> torch.Tensor:
        return self.w_fg.clamp_min(0).sum(-1)


def freeze_view(full: RadianceModel, bg: RadianceModel, camera: Camera, cfg: SamplingConfig,
                t_near: float, t_far: float) -> FrozenView:
    rays = generate_rays(camera.intrinsics, camera.pose, t_near=t_near, t_far=t_far)
    acc: dict[str, list] = {k: [] for k in ("pos", "t", "wfg", "cfg", "w", "bg", "full", "fg")}
    with torch.no_grad():
        for sl in _chunks(len(rays), cfg.chunk):
            sub = rays[sl]
            f, b = (p.final for p in render_rays_aligned([full, bg], sub, cfg))
            fg = extract_foreground(f, b)
            comp = render_composite(b, fg)
            o = torch.from_numpy(sub.origins)
            d = torch.from_numpy(sub.directions)
            acc["pos"].append((o[:, None] + f.t[..., None] * d[:, None]).float())
            acc["t"].append(f.t)
            acc["wfg"].append(fg.weights)
            acc["cfg"].append(fg.colors)
            acc["w"].append(comp.weights)
            acc["bg"].append(b.color())
            acc["full"].append(f.color())
            acc["fg"].append(fg.color())
    cat = {k: torch.cat(v) for k, v in acc.items()}
    return FrozenView(camera, cat["pos"], cat["t"], cat["wfg"], cat["cfg"], cat["w"], cat["bg"],
                      cat["full"], cat["fg"])


def recolored(view: FrozenView, override: ColorOverrideField, rows: torch.Tensor | None = None
              ) -> torch.Tensor:
    """Composite colors ``sum w_bg c_bg + sum w_fg c'_fg`` for all (or selected) rays."""
    if rows is None:
        pos, w, c, base = view.positions, view.w_fg, view.c_fg, view.bg_color
    else:
        pos, w, c, base = view.positions[rows], view.w_fg[rows], view.c_fg[rows], view.bg_color[rows]
    return base + composite(w, override(pos, c))


def recolored_render(view: FrozenView, override: ColorOverrideField) -> RenderResult:
    with torch.no_grad():
        color = recolored(view, override)
    return assemble(color, view.weights, view.t, view.camera.intrinsics)


# --- masks --------------------------------------------------------------------

@dataclass
class ViewMask:
    """Binary per-view mask, either from the dataset or thresholded foreground opacity."""

    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    source: str       # "dataset" | "opacity"

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2 or not np.isin(m, (0, 1)).all():
            raise InputError("view mask must be a binary (H, W) array")
        self.mask = m.astype(np.uint8)


def opacity_mask(view: FrozenView, tau: float = MASK_TAU) -> ViewMask:
    """Mask for a novel camera: positive foreground opacity above ``tau``.

    The signed opacity cancels where the object hides an opaque background,
    so only the positive part is accumulated.
    """
    m = (view.fg_opacity() > tau).numpy().reshape(view.shape)
    return ViewMask(m.astype(np.uint8), "opacity")


# --- removal and transforms -----------------------------------------------------

def remove_object(bg: RadianceModel, intrinsics: CameraIntrinsics, pose: Pose, cfg: SamplingConfig,
                  t_near: float, t_far: float) -> RenderResult:
    """The background volume on its own."""
    return render_view(bg, intrinsics, pose, cfg, t_near, t_far)


@dataclass
class TransformResult:
    composite: RenderResult
    foreground: RenderResult


def transform_foreground(full: RadianceModel, bg: RadianceModel, intrinsics: CameraIntrinsics, pose: Pose,
                         cfg: SamplingConfig, t_near: float, t_far: float,
                         transform: SimilarityTransform | None = None, focal_scale: float = 1.0,
                         variant: Variant | str = Variant.C1,
                         precedence: float | None = PRECEDENCE) -> TransformResult:
    """Render the scene with the foreground moved by ``transform`` and/or zoomed by ``focal_scale``.

    Foreground samples come from rays mapped through the inverse transform
    (or regenerated with the scaled focal length); background samples stay
    on the original rays. All three evaluations share one sample set.
    """
    transform = transform or SimilarityTransform.identity()
    if not isinstance(transform, SimilarityTransform):
        raise InputError("transform must be a SimilarityTransform")
    if not (math.isfinite(focal_scale) and focal_scale > 0):
        raise InputError(f"focal scale must be > 0, got {focal_scale}")
    to_field = transform.inverse()
    if to_field.is_identity():
        to_field = None
    rays = generate_rays(intrinsics, pose, t_near=t_near, t_far=t_far)
    if focal_scale != 1.0:
        fg_k = intrinsics.with_focal_scale(focal_scale)
        px = pixel_grid(intrinsics)
        fg_rays_all = camera_rays(fg_k, pose, px[:, 0], px[:, 1], t_near, t_far, rays.ray_ids)
    else:
        fg_rays_all = rays
    acc: dict[str, list] = {k: [] for k in ("comp", "wc", "fg", "wfg", "t")}
    with torch.no_grad():
        for sl in _chunks(len(rays), cfg.chunk):
            bg_rays, fg_rays = rays[sl], fg_rays_all[sl]
            key = torch.from_numpy(np.concatenate([bg_rays.origins, bg_rays.directions], axis=1))
            f, b_fg, b = (p.final for p in render_rays_aligned(
                [full, bg, bg], [fg_rays, fg_rays, bg_rays], cfg,
                to_field=[to_field, to_field, None], ray_keys=[key, key, key]))
            full_ref = f if Variant(variant) in (Variant.C2, Variant.C3) else None
            fg = extract_foreground(f, b_fg)
            comp = render_composite(b, fg, variant=variant, full=full_ref, precedence=precedence)
            acc["comp"].append(comp.color)
            acc["wc"].append(comp.weights)
            acc["fg"].append(fg.color())
            acc["wfg"].append(fg.weights.clamp_min(0))
            acc["t"].append(b.t)
    cat = {k: torch.cat(v) for k, v in acc.items()}
    return TransformResult(assemble(cat["comp"], cat["wc"], cat["t"], intrinsics),
                           assemble(cat["fg"], cat["wfg"], cat["t"], intrinsics))


# --- optimization helpers -------------------------------------------------------

@dataclass
class ManipResult:
    field: nn.Module
    trace: list[dict] = field(default_factory=list)
    initial: float = math.nan
    final: float = math.nan
    extra: dict = field(default_factory=dict)


def _check_loss(loss: torch.Tensor, it: int) -> None:
    if not torch.isfinite(loss):
        raise CorruptedStateError(f"non-finite objective at iteration {it}")


def _step(params: list[nn.Parameter], loss: torch.Tensor, state: AdamState, lr: float) -> None:
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [g if g is not None else torch.zeros_like(p) for p, g in zip(params, grads)]
    adam_step(params, grads, state, lr)


def _batch(cfg: ManipConfig, it: int, stream: int, total: int) -> np.ndarray:
    u = rng.uniforms(rng.key(cfg.seed, stream, it), np.zeros(1, np.uint64), cfg.rays_per_batch)[0]
    return np.minimum((u * total).astype(np.int64), total - 1)


def write_trace(path, trace: list[dict]) -> None:
    if not trace:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(trace[0]))
        writer.writeheader()
        writer.writerows(trace)


def _freeze_all(full, bg, cameras, cfg, t_near, t_far) -> list[FrozenView]:
    s = cfg.sampling()
    return [freeze_view(full, bg, cam, s, t_near, t_far) for cam in cameras]


# --- camouflage -----------------------------------------------------------------

def camouflage_objective(views: list[FrozenView], override: ColorOverrideField) -> float:
    """Sum over views and pixels of ``||x_c - x_bg||^2``."""
    with torch.no_grad():
        return float(sum(((recolored(v, override) - v.bg_color) ** 2).sum() for v in views))


def masked_mse(views: list[FrozenView], override: ColorOverrideField, masks: Sequence[np.ndarray]) -> float:
    errs = []
    with torch.no_grad():
        for v, m in zip(views, masks):
            sel = torch.from_numpy(np.asarray(m).reshape(-1).astype(bool))
            if sel.any():
                errs.append(((recolored(v, override)[sel] - v.bg_color[sel]) ** 2).mean(-1))
    return float(torch.cat(errs).mean()) if errs else 0.0


def camouflage(full: RadianceModel, bg: RadianceModel, dataset: PosedDataset, cfg: ManipConfig,
               views: list[FrozenView] | None = None) -> ManipResult:
    """Recolor the foreground so the composite matches the background views; depth is untouched."""
    views = views if views is not None else _freeze_all(full, bg, dataset_cameras(dataset), cfg,
                                                        dataset.t_near, dataset.t_far)
    override = ColorOverrideField(cfg.grid_resolution, cfg.bbox_min, cfg.bbox_max)
    params = [override.offset]
    state = AdamState.zeros_like(params)
    R = len(views[0].bg_color)
    total = R * len(views)
    pos = torch.cat([v.positions for v in views])
    wfg = torch.cat([v.w_fg for v in views])
    cfg_ = torch.cat([v.c_fg for v in views])
    initial = camouflage_objective(views, override)
    result = ManipResult(override, initial=initial)
    masks = [dataset.masks[i] for i in range(len(views))] if len(views) == len(dataset) else None
    for it in range(cfg.iterations):
        idx = torch.from_numpy(_batch(cfg, it, 21, total))
        pred = composite(wfg[idx], override(pos[idx], cfg_[idx]))
        # x_c - x_bg reduces to the edited foreground contribution
        loss = (pred ** 2).sum()
        _check_loss(loss, it)
        _step(params, loss, state, cfg.lr(it))
        result.trace.append({"iter": it + 1, "loss": loss.item() / cfg.rays_per_batch, "lr": cfg.lr(it)})
    result.final = camouflage_objective(views, override)
    if masks is not None:
        result.extra["masked_mse_initial"] = masked_mse(views, ColorOverrideField(
            cfg.grid_resolution, cfg.bbox_min, cfg.bbox_max), masks)
        result.extra["masked_mse_final"] = masked_mse(views, override, masks)
    result.extra["views"] = views
    return result


# --- non-negative inpainting ----------------------------------------------------

def residual_render(residual: RadianceModel, camera: Camera, cfg: ManipConfig, t_near: float,
                    t_far: float) -> RenderResult:
    return render_view(residual, camera.intrinsics, camera.pose, cfg.sampling(), t_near, t_far)


def nonnegative_objective(residual: RadianceModel, views: list[FrozenView], cfg: ManipConfig,
                          t_near: float, t_far: float) -> float:
    total = 0.0
    for v in views:
        res = residual_render(residual, v.camera, cfg, t_near, t_far).color.reshape(-1, 3)
        diff = v.full_color.numpy() + res - v.bg_color.numpy()
        total += float((diff ** 2).sum())
    return total


def nonnegative_inpaint(full: RadianceModel, bg: RadianceModel, dataset: PosedDataset, cfg: ManipConfig,
                        views: list[FrozenView] | None = None) -> ManipResult:
    """Learn a residual volume whose renders, added to the full scene, approach the background."""
    views = views if views is not None else _freeze_all(full, bg, dataset_cameras(dataset), cfg,
                                                        dataset.t_near, dataset.t_far)
    residual = make_residual_field(cfg)
    params = list(residual.parameters())
    state = AdamState.zeros_like(params)
    origins, dirs, gap = [], [], []
    for v in views:
        r = generate_rays(v.camera.intrinsics, v.camera.pose, t_near=dataset.t_near, t_far=dataset.t_far)
        origins.append(r.origins)
        dirs.append(r.directions)
        gap.append(v.bg_color - v.full_color)
    origins, dirs = np.concatenate(origins), np.concatenate(dirs)
    gap = torch.cat(gap).to(torch.float32)
    total = len(origins)
    sampling = cfg.sampling(jitter=True)
    initial = nonnegative_objective(residual, views, cfg, dataset.t_near, dataset.t_far)
    result = ManipResult(residual, initial=initial)
    for it in range(cfg.iterations):
        idx = _batch(cfg, it, 22, total)
        rays = Rays(origins[idx], dirs[idx], dataset.t_near, dataset.t_far, idx.astype(np.uint64))
        out = render_rays(residual, rays, sampling, seed=it).final.color()
        loss = ((out - gap[idx]) ** 2).sum()
        _check_loss(loss, it)
        _step(params, loss, state, cfg.lr(it))
        result.trace.append({"iter": it + 1, "loss": loss.item() / cfg.rays_per_batch, "lr": cfg.lr(it)})
    result.final = nonnegative_objective(residual, views, cfg, dataset.t_near, dataset.t_far)
    result.extra["views"] = views
    return result


def nonnegative_composite(full_view: RenderResult, residual: RenderResult) -> np.ndarray:
    """``x_full + x_residual`` clipped to [0, 1] for display."""
    return np.clip(full_view.color + residual.color, 0.0, 1.0)


# --- semantic manipulation ------------------------------------------------------

class SemanticScorer(Protocol):
    def __call__(self, image: torch.Tensor, target) -> torch.Tensor:
        """Differentiable similarity in [-1, 1] between an (H, W, 3) image and a target."""


COLOR_SWATCHES = {
    "red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0), "cyan": (0.0, 1.0, 1.0), "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0), "gray": (0.5, 0.5, 0.5),
    "orange": (1.0, 0.5, 0.0), "purple": (0.5, 0.0, 0.5), "brown": (0.55, 0.27, 0.07),
    "pink": (1.0, 0.75, 0.8),
}


class HistogramScorer:
    """Cosine similarity of soft color histograms (a dependency-free stand-in for an embedding model).

    Each pixel spreads Gaussian mass over ``bins**3`` RGB cells. The feature
    is the square root of the normalized histogram, so small colored regions
    still move the score noticeably.
    """

    def __init__(self, bins: int = 4, bandwidth: float | None = None):
        if bins < 1:
            raise InputError("histogram needs at least one bin per channel")
        self.bins = bins
        self.centers = (torch.arange(bins, dtype=torch.float64) + 0.5) / bins
        self.bandwidth = bandwidth if bandwidth is not None else 0.5 / bins

    def features(self, image: torch.Tensor) -> torch.Tensor:
        px = image.reshape(-1, 3).to(torch.float64)
        k = torch.exp(-0.5 * ((px[:, :, None] - self.centers) / self.bandwidth) ** 2)  # (P, 3, B)
        k = k / k.sum(-1, keepdim=True)
        joint = torch.einsum("pa,pb,pc->abc", k[:, 0], k[:, 1], k[:, 2]).reshape(-1)
        hist = joint / px.shape[0]
        return torch.sqrt(hist + 1e-12)

    def target_features(self, target) -> torch.Tensor:
        if isinstance(target, str):
            name = target.strip().lower()
            if name not in COLOR_SWATCHES:
                raise InputError(f"unknown color target {target!r}; known: {', '.join(sorted(COLOR_SWATCHES))}")
            swatch = torch.tensor(COLOR_SWATCHES[name], dtype=torch.float64).expand(8, 8, 3)
            return self.features(swatch)
        return self.features(torch.as_tensor(target))

    def __call__(self, image: torch.Tensor, target) -> torch.Tensor:
        a = self.features(image)
        b = self.target_features(target)
        return F.cosine_similarity(a, b, dim=0)


def scorer_input(image: torch.Tensor, grid: int = CLIP_GRID, size: int = CLIP_SIZE) -> torch.Tensor:
    """Sample a ``grid x grid`` lattice of points spanning the image, then upsample to ``size x size``.

    Colors are clamped to the displayable range first.
    """
    x = image.clamp(0.0, 1.0).permute(2, 0, 1).unsqueeze(0)
    lin = torch.linspace(-1.0, 1.0, grid, dtype=x.dtype)
    gy, gx = torch.meshgrid(lin, lin, indexing="ij")
    pts = torch.stack([gx, gy], dim=-1).unsqueeze(0)
    sampled = F.grid_sample(x, pts, mode="bilinear", align_corners=True)
    up = F.interpolate(sampled, size=(size, size), mode="bilinear", align_corners=True)
    return up[0].permute(1, 2, 0)


@dataclass
class SemanticTerms:
    target: torch.Tensor
    image: torch.Tensor
    background: torch.Tensor

    def total(self, cfg: ManipConfig) -> torch.Tensor:
        return (cfg.target_weight * self.target + cfg.image_weight * self.image
                + cfg.background_weight * self.background)


def semantic_terms(view: FrozenView, mask: ViewMask, override: ColorOverrideField, scorer: SemanticScorer,
                   target, cfg: ManipConfig, index: int = 0) -> SemanticTerms:
    H, W = view.shape
    x_c = recolored(view, override).reshape(H, W, 3)
    x_bg = view.bg_color.reshape(H, W, 3).to(x_c.dtype)
    m = torch.from_numpy(mask.mask).to(x_c.dtype).unsqueeze(-1)
    mixed = x_c * m + x_bg * (1 - m)
    bg_only = x_bg * (1 - m)
    try:
        s_target = scorer(scorer_input(mixed, cfg.clip_grid, cfg.clip_size), target)
        s_image = scorer(scorer_input(mixed, cfg.clip_grid, cfg.clip_size),
                         scorer_input(bg_only, cfg.clip_grid, cfg.clip_size))
    except (InputError, CorruptedStateError):
        raise
    except Exception as exc:
        raise ScorerError(f"scorer failed on view {index}: {exc}") from exc
    outside = ((x_c - x_bg) * (1 - m)) ** 2
    return SemanticTerms(1 - s_target, 1 - s_image, outside.sum())


def semantic_objective(views, masks, override, scorer, target, cfg) -> float:
    with torch.no_grad():
        return float(sum(semantic_terms(v, m, override, scorer, target, cfg, i).total(cfg)
                         for i, (v, m) in enumerate(zip(views, masks))))


def mean_similarity(views, masks, override, scorer, target, cfg) -> float:
    sims = []
    with torch.no_grad():
        for i, (v, m) in enumerate(zip(views, masks)):
            sims.append(1 - float(semantic_terms(v, m, override, scorer, target, cfg, i).target))
    return float(np.mean(sims))


def semantic_cameras(dataset: PosedDataset, cfg: ManipConfig) -> tuple[list[Camera], list[np.ndarray]]:
    """Dataset cameras and masks, downsampled if larger than the semantic resolution."""
    W, H = dataset.resolution
    mw, mh = cfg.semantic_resolution
    if W > mw or H > mh:
        s = min(mw / W, mh / H)
        dataset = dataset.resized(max(1, round(W * s)), max(1, round(H * s)))
    return dataset_cameras(dataset), list(dilate_masks(dataset.masks, cfg.mask_dilation))


def semantic_manipulate(full: RadianceModel, bg: RadianceModel, dataset: PosedDataset,
                        scorer: SemanticScorer, target, cfg: ManipConfig,
                        views: list[FrozenView] | None = None,
                        masks: list[ViewMask] | None = None) -> ManipResult:
    """Recolor the foreground toward ``target`` while holding everything outside the mask fixed.

    Each iteration scores one view (cycled in order): the masked mix of the
    recolored composite and the background view is compared to the target
    and to the background, plus a squared penalty on changes outside the mask.
    """
    if views is None:
        cameras, ds_masks = semantic_cameras(dataset, cfg)
        views = _freeze_all(full, bg, cameras, cfg, dataset.t_near, dataset.t_far)
        masks = masks or [ViewMask(m, "dataset") for m in ds_masks]
    elif masks is None:
        masks = [opacity_mask(v, cfg.mask_tau) for v in views]
    if len(masks) != len(views):
        raise InputError("need one mask per view")
    for v, m in zip(views, masks):
        if m.mask.shape != v.shape:
            raise InputError(f"mask {m.mask.shape} does not match render {v.shape}")
    override = ColorOverrideField(cfg.grid_resolution, cfg.bbox_min, cfg.bbox_max)
    params = [override.offset]
    state = AdamState.zeros_like(params)
    initial = semantic_objective(views, masks, override, scorer, target, cfg)
    sim0 = mean_similarity(views, masks, override, scorer, target, cfg)
    result = ManipResult(override, initial=initial)
    for it in range(cfg.iterations):
        i = it % len(views)
        terms = semantic_terms(views[i], masks[i], override, scorer, target, cfg, i)
        loss = terms.total(cfg)
        _check_loss(loss, it)
        _step(params, loss, state, cfg.lr(it))
        result.trace.append({"iter": it + 1, "loss": loss.item(), "lr": cfg.lr(it),
                             "similarity": 1 - terms.target.item()})
    result.final = semantic_objective(views, masks, override, scorer, target, cfg)
    result.extra.update(views=views, masks=masks, similarity_initial=sim0,
                        similarity_final=mean_similarity(views, masks, override, scorer, target, cfg))
    return result
