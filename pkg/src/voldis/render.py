"""Ray sampling, alpha compositing, foreground extraction and recombination.

All per-sample quantities are ``(R, N)`` or ``(R, N, 3)`` torch tensors.
Sample depths ``t`` are kept in float64 regardless of the field dtype so
that two volumes sampled on the same rays can be checked for alignment
exactly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import rng
from .errors import AlignmentError, InputError
from .geometry import CameraIntrinsics, Pose, Rays, SimilarityTransform, generate_rays

DEPTH_EPS = 1e-10
PDF_FLOOR = 1e-5
ALIGN_TOL = 1e-12

_STREAM_STRATIFIED = 0
_STREAM_IMPORTANCE = 1
_STREAM_FALLBACK = 2


@dataclass
class SamplingConfig:
    n_coarse: int = 64
    n_fine: int = 64
    jitter: bool = False
    seed: int = 0
    last_delta: float | None = None  # None: mean of the preceding deltas
    chunk: int = 4096                # rays per evaluation chunk in render_view

    def __post_init__(self):
        if self.n_coarse < 1:
            raise InputError("n_coarse must be >= 1")
        if self.n_fine < 0:
            raise InputError("n_fine must be >= 0")


class RadianceModel(nn.Module):
    """A coarse field plus an optional fine field used after importance sampling."""

    def __init__(self, coarse: nn.Module, fine: nn.Module | None = None):
        super().__init__()
        self.coarse = coarse
        self.fine = fine

    @property
    def fine_or_coarse(self) -> nn.Module:
        return self.fine if self.fine is not None else self.coarse


@dataclass
class RaySamples:
    t: torch.Tensor       # (R, N) float64, strictly ascending per row
    deltas: torch.Tensor  # (R, N) float64, > 0

    @property
    def n(self) -> int:
        return self.t.shape[1]


@dataclass
class CompositeWeights:
    alphas: torch.Tensor
    transmittance: torch.Tensor
    weights: torch.Tensor

    @property
    def opacity(self) -> torch.Tensor:
        return self.weights.sum(dim=-1)


@dataclass
class RayRender:
    """One field evaluated on one sample set.

    ``ray_key`` identifies the canonical (world-space) rays the samples
    belong to; two renders may only be mixed per sample when both their
    ``t`` and ``ray_key`` agree.
    """

    t: torch.Tensor
    deltas: torch.Tensor
    densities: torch.Tensor
    colors: torch.Tensor
    composite: CompositeWeights
    ray_key: torch.Tensor

    @property
    def weights(self) -> torch.Tensor:
        return self.composite.weights

    def color(self) -> torch.Tensor:
        return composite(self.weights, self.colors)


@dataclass
class ForegroundSamples:
    weights: torch.Tensor  # signed, w_full - w_bg
    colors: torch.Tensor   # signed, c_full - c_bg
    t: torch.Tensor
    ray_key: torch.Tensor

    def color(self) -> torch.Tensor:
        return composite(self.weights, self.colors)


@dataclass
class RenderResult:
    color: np.ndarray      # (H, W, 3), unclipped
    depth: np.ndarray      # (H, W)
    disparity: np.ndarray  # (H, W)
    opacity: np.ndarray    # (H, W)


def _deltas(t: torch.Tensor, last_delta: float | None) -> torch.Tensor:
    gaps = t[:, 1:] - t[:, :-1]
    if last_delta is not None:
        last = torch.full_like(t[:, :1], float(last_delta))
    elif gaps.shape[1] > 0:
        last = gaps.mean(dim=1, keepdim=True)
    else:
        raise InputError("a single sample per ray needs an explicit last_delta")
    return torch.cat([gaps, last], dim=1)


def sample_stratified(rays: Rays, n: int, jitter: bool = False, seed: int = 0,
                      last_delta: float | None = None) -> RaySamples:
    """One sample per equal-width bin of ``[t_near, t_far]``."""
    if n < 1:
        raise InputError(f"need at least one sample per ray, got {n}")
    width = (rays.t_far - rays.t_near) / n
    k = torch.arange(n, dtype=torch.float64)
    if jitter:
        u = torch.from_numpy(rng.uniforms(rng.key(seed, _STREAM_STRATIFIED), rays.ray_ids, n))
    else:
        u = torch.full((len(rays), n), 0.5, dtype=torch.float64)
    t = rays.t_near + (k + u) * width
    if last_delta is None and n == 1:
        last_delta = width
    return RaySamples(t, _deltas(t, last_delta))


def sample_importance(rays: Rays, coarse_weights: torch.Tensor, coarse: RaySamples, n_fine: int,
                      seed: int = 0, last_delta: float | None = None) -> RaySamples:
    """Inverse-CDF draws from the piecewise-constant pdf of the coarse weights, merged with the coarse samples.

    Bins are bounded by midpoints between coarse samples (and the ray's
    near/far bounds). Each bin's mass is floored at ``PDF_FLOOR``. Rays whose
    coarse weights are all zero get stratified jittered samples instead.
    """
    if n_fine < 0:
        raise InputError("n_fine must be >= 0")
    w = coarse_weights.detach().to(torch.float64)
    if (w < 0).any():
        raise InputError("importance sampling needs nonnegative coarse weights")
    if n_fine == 0:
        return coarse
    t = coarse.t
    R = t.shape[0]
    near = torch.full((R, 1), rays.t_near, dtype=torch.float64)
    far = torch.full((R, 1), rays.t_far, dtype=torch.float64)
    edges = torch.cat([near, 0.5 * (t[:, 1:] + t[:, :-1]), far], dim=1)
    pdf = w.clamp_min(PDF_FLOOR)
    pdf = pdf / pdf.sum(dim=1, keepdim=True)
    cdf = torch.cat([torch.zeros(R, 1, dtype=torch.float64), torch.cumsum(pdf, dim=1)], dim=1)
    cdf[:, -1] = 1.0
    u = torch.from_numpy(rng.uniforms(rng.key(seed, _STREAM_IMPORTANCE), rays.ray_ids, n_fine))
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, cdf.shape[1] - 1)
    lo = idx - 1
    c0 = torch.gather(cdf, 1, lo)
    c1 = torch.gather(cdf, 1, idx)
    e0 = torch.gather(edges, 1, lo)
    e1 = torch.gather(edges, 1, idx)
    frac = ((u - c0) / (c1 - c0)).clamp(0.0, 1.0)
    fine_t = e0 + frac * (e1 - e0)

    empty = w.sum(dim=1) <= 0
    if empty.any():
        fallback = sample_stratified(rays[empty.numpy()], n_fine, jitter=True,
                                     seed=int(rng.key(seed, _STREAM_FALLBACK)))
        fine_t[empty] = fallback.t
    merged, _ = torch.sort(torch.cat([t, fine_t], dim=1), dim=1)
    return RaySamples(merged, _deltas(merged, last_delta))


def compositing_weights(densities: torch.Tensor, deltas: torch.Tensor) -> CompositeWeights:
    """Front-to-back alpha compositing.

    ``alpha_i = 1 - exp(-sigma_i delta_i)`` and
    ``w_i = alpha_i * exp(-sum_{j<i} sigma_j delta_j)``.
    """
    densities = torch.as_tensor(densities)
    deltas = torch.as_tensor(deltas, dtype=densities.dtype)
    if densities.shape != deltas.shape:
        raise InputError(f"densities {tuple(densities.shape)} and deltas {tuple(deltas.shape)} differ")
    if (densities < 0).any():
        raise InputError("negative density passed to compositing")
    tau = densities * deltas
    alphas = -torch.expm1(-tau)
    optical_depth = torch.cumsum(tau, dim=-1)
    before = torch.cat([torch.zeros_like(tau[..., :1]), optical_depth[..., :-1]], dim=-1)
    transmittance = torch.exp(-before)
    return CompositeWeights(alphas, transmittance, alphas * transmittance)


def composite(weights: torch.Tensor, colors: torch.Tensor) -> torch.Tensor:
    """Per-channel ``sum_i w_i c_i``; signed inputs allowed."""
    return (weights.unsqueeze(-1) * colors).sum(dim=-2)


def expected_depth(weights: torch.Tensor, t: torch.Tensor):
    """``(depth, disparity)`` with the epsilon convention for empty rays."""
    t = t.to(weights.dtype)
    acc = weights.sum(dim=-1)
    wt = (weights * t).sum(dim=-1)
    depth = wt / (acc + DEPTH_EPS)
    disparity = (acc + DEPTH_EPS) / (wt + DEPTH_EPS)
    return depth, disparity


def _ray_key(rays: Rays) -> torch.Tensor:
    return torch.from_numpy(np.concatenate([rays.origins, rays.directions], axis=1))


def evaluate_samples(field: nn.Module, rays: Rays, samples: RaySamples,
                     to_field: SimilarityTransform | None = None,
                     ray_key: torch.Tensor | None = None) -> RayRender:
    """Query ``field`` at the sample points of ``rays`` and composite.

    ``to_field`` maps world points into the field's own frame (the inverse of
    the transform applied to the object). Distances shrink by its scale, so
    the deltas are rescaled to keep density in field units.
    """
    dtype = next(iter(field.state_dict().values())).dtype
    o = torch.from_numpy(rays.origins)
    d = torch.from_numpy(rays.directions)
    pts = o[:, None, :] + samples.t[..., None] * d[:, None, :]
    length = torch.linalg.norm(d, dim=-1, keepdim=True)
    deltas = samples.deltas * length
    if to_field is not None:
        rot = torch.from_numpy(to_field.rotation)
        pts = to_field.scale * (pts @ rot.T) + torch.from_numpy(to_field.translation)
        d = d @ rot.T
        deltas = deltas * to_field.scale
    view = (d / torch.linalg.norm(d, dim=-1, keepdim=True))
    R, N = samples.t.shape
    view = view[:, None, :].expand(R, N, 3)
    colors, densities = field(pts.reshape(-1, 3).to(dtype), view.reshape(-1, 3).to(dtype))
    colors = colors.reshape(R, N, 3)
    densities = densities.reshape(R, N)
    weights = compositing_weights(densities, deltas.to(dtype))
    return RayRender(samples.t, samples.deltas, densities, colors, weights,
                     _ray_key(rays) if ray_key is None else ray_key)


@dataclass
class PassRenders:
    coarse: RayRender
    fine: RayRender | None = None

    @property
    def final(self) -> RayRender:
        return self.fine if self.fine is not None else self.coarse


def render_rays_aligned(models: Sequence[RadianceModel], rays: Sequence[Rays] | Rays,
                        cfg: SamplingConfig, *, to_field: Sequence[SimilarityTransform | None] | None = None,
                        ray_keys: Sequence[torch.Tensor | None] | None = None,
                        seed: int | None = None, jitter: bool | None = None) -> list[PassRenders]:
    """Render several models on one shared sample set.

    Every model sees identical ``t`` values. The fine samples are drawn from
    the mean of all models' coarse weights, which keeps the volumes aligned
    sample-for-sample after hierarchical sampling.
    """
    if isinstance(rays, Rays):
        rays = [rays] * len(models)
    to_field = list(to_field) if to_field is not None else [None] * len(models)
    ray_keys = list(ray_keys) if ray_keys is not None else [None] * len(models)
    seed = cfg.seed if seed is None else seed
    jitter = cfg.jitter if jitter is None else jitter
    base = rays[0]
    coarse_s = sample_stratified(base, cfg.n_coarse, jitter, seed, cfg.last_delta)
    coarse = [evaluate_samples(m.coarse, r, coarse_s, tf, k)
              for m, r, tf, k in zip(models, rays, to_field, ray_keys)]
    if cfg.n_fine == 0:
        return [PassRenders(c) for c in coarse]
    pdf = torch.stack([c.weights.detach() for c in coarse]).mean(dim=0)
    fine_s = sample_importance(base, pdf, coarse_s, cfg.n_fine, seed, cfg.last_delta)
    fine = [evaluate_samples(m.fine_or_coarse, r, fine_s, tf, k)
            for m, r, tf, k in zip(models, rays, to_field, ray_keys)]
    return [PassRenders(c, f) for c, f in zip(coarse, fine)]


def render_rays(model: RadianceModel, rays: Rays, cfg: SamplingConfig, **kw) -> PassRenders:
    return render_rays_aligned([model], rays, cfg, **kw)[0]


def _check_aligned(a_t, a_key, b_t, b_key, what: str):
    if a_t.shape != b_t.shape:
        raise AlignmentError(f"{what}: sample counts differ ({tuple(a_t.shape)} vs {tuple(b_t.shape)})")
    if (a_t - b_t).abs().max() > ALIGN_TOL or (a_key - b_key).abs().max() > ALIGN_TOL:
        raise AlignmentError(f"{what}: volumes were not sampled at identical positions")


def extract_foreground(full: RayRender, bg: RayRender) -> ForegroundSamples:
    """Per-sample difference of the full and background volumes."""
    _check_aligned(full.t, full.ray_key, bg.t, bg.ray_key, "extract_foreground")
    return ForegroundSamples(full.weights - bg.weights, full.colors - bg.colors, full.t, full.ray_key)


class Variant(str, enum.Enum):
    """Recombination rules: ``C1`` is the disentangled mix, the rest are ablations."""

    C1 = "c1"  # sum w_bg c_bg + w_fg c_fg
    C2 = "c2"  # c_full in place of c_fg
    C3 = "c3"  # w_full in place of w_fg
    C4 = "c4"  # sum (w_bg + w_fg)(c_bg + c_fg)


Modifier = Callable[[torch.Tensor, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


@dataclass
class CompositeRays:
    color: torch.Tensor    # (R, 3)
    weights: torch.Tensor  # (R, N) total per-sample weight, for depth/opacity
    t: torch.Tensor


def render_composite(bg: RayRender, fg: ForegroundSamples, fg_modifier: Modifier | None = None,
                     bg_modifier: Modifier | None = None, variant: Variant | str = Variant.C1,
                     full: RayRender | None = None, precedence: float | None = None) -> CompositeRays:
    """Recombine (possibly modified) background and foreground samples.

    Modifiers map ``(weights, colors) -> (weights, colors)`` per sample.
    With ``precedence`` set, background samples are dropped wherever the
    foreground weight exceeds it, so each point is colored by one volume.
    """
    variant = Variant(variant)
    _check_aligned(bg.t, bg.ray_key, fg.t, fg.ray_key, "render_composite")
    w_fg, c_fg = fg.weights, fg.colors
    if variant in (Variant.C2, Variant.C3):
        if full is None:
            raise InputError(f"variant {variant.value} needs the full-volume samples")
        if full.t.shape != fg.t.shape or (full.t - fg.t).abs().max() > ALIGN_TOL:
            raise AlignmentError("render_composite: full volume misaligned with foreground")
        if variant is Variant.C2:
            c_fg = full.colors
        else:
            w_fg = full.weights
    w_bg, c_bg = bg.weights, bg.colors
    if fg_modifier is not None:
        w_fg, c_fg = fg_modifier(w_fg, c_fg)
    if bg_modifier is not None:
        w_bg, c_bg = bg_modifier(w_bg, c_bg)
    if precedence is not None:
        w_bg = torch.where(w_fg > precedence, torch.zeros_like(w_bg), w_bg)
    if variant is Variant.C4:
        color = composite(w_bg + w_fg, c_bg + c_fg)
    else:
        color = composite(w_bg, c_bg) + composite(w_fg, c_fg)
    return CompositeRays(color, w_bg + w_fg, fg.t)


# --- whole-image helpers -----------------------------------------------------

def assemble(color: torch.Tensor, weights: torch.Tensor, t: torch.Tensor,
             intrinsics: CameraIntrinsics) -> RenderResult:
    depth, disparity = expected_depth(weights, t)
    H, W = intrinsics.height, intrinsics.width
    as_np = lambda x: x.detach().to(torch.float64).numpy()
    return RenderResult(as_np(color).reshape(H, W, 3), as_np(depth).reshape(H, W),
                        as_np(disparity).reshape(H, W), as_np(weights.sum(-1)).reshape(H, W))


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def render_view(model: RadianceModel, intrinsics: CameraIntrinsics, pose: Pose, cfg: SamplingConfig,
                t_near: float, t_far: float) -> RenderResult:
    """Render every pixel of one camera."""
    rays = generate_rays(intrinsics, pose, t_near=t_near, t_far=t_far)
    colors, weights, ts = [], [], []
    with torch.no_grad():
        for sl in _chunks(len(rays), cfg.chunk):
            out = render_rays(model, rays[sl], cfg).final
            colors.append(out.color())
            weights.append(out.weights)
            ts.append(out.t)
    return assemble(torch.cat(colors), torch.cat(weights), torch.cat(ts), intrinsics)


@dataclass
class DisentangledView:
    full: RenderResult
    background: RenderResult
    foreground: RenderResult
    composite: RenderResult


def render_disentangled(full_model: RadianceModel, bg_model: RadianceModel, intrinsics: CameraIntrinsics,
                        pose: Pose, cfg: SamplingConfig, t_near: float, t_far: float) -> DisentangledView:
    """Full, background, extracted foreground and identity recombination for one camera.

    The foreground's depth and opacity maps use the positive part of its
    signed weights.
    """
    rays = generate_rays(intrinsics, pose, t_near=t_near, t_far=t_far)
    acc = {k: [] for k in ("full", "bg", "fg", "comp", "wf", "wb", "wfg", "wc", "t")}
    with torch.no_grad():
        for sl in _chunks(len(rays), cfg.chunk):
            full, bg = (p.final for p in render_rays_aligned([full_model, bg_model], rays[sl], cfg))
            fg = extract_foreground(full, bg)
            comp = render_composite(bg, fg)
            acc["full"].append(full.color())
            acc["bg"].append(bg.color())
            acc["fg"].append(fg.color())
            acc["comp"].append(comp.color)
            acc["wf"].append(full.weights)
            acc["wb"].append(bg.weights)
            acc["wfg"].append(fg.weights.clamp_min(0))
            acc["wc"].append(comp.weights)
            acc["t"].append(full.t)
    cat = {k: torch.cat(v) for k, v in acc.items()}
    return DisentangledView(
        assemble(cat["full"], cat["wf"], cat["t"], intrinsics),
        assemble(cat["bg"], cat["wb"], cat["t"], intrinsics),
        assemble(cat["fg"], cat["wfg"], cat["t"], intrinsics),
        assemble(cat["comp"], cat["wc"], cat["t"], intrinsics),
    )
