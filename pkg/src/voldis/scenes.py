"""Analytic ground-truth scenes and synthetic dataset generation.

A scene is a list of constant-density primitives tagged foreground or
background. Because every quantity is known in closed form, the oracle
can render the full scene, the background alone and the foreground alone,
which is what makes disentanglement measurable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal

import numpy as np
import torch
import torch.nn as nn

from . import rng
from .dataset import PosedDataset
from .errors import InputError
from .geometry import CameraIntrinsics, Pose, camera_rays
from .images import quantize
from .render import RenderResult, compositing_weights, composite, expected_depth, sample_stratified

Subset = Literal["all", "foreground", "background"]
TAGS = ("foreground", "background")


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def contains(self, p: torch.Tensor) -> torch.Tensor:
        c = torch.as_tensor(self.center, dtype=p.dtype)
        return ((p - c) ** 2).sum(-1) <= self.radius ** 2

    @property
    def centroid(self) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64)

    def moved(self, offset) -> Sphere:
        return Sphere(tuple(np.add(self.center, offset)), self.radius)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = self.centroid
        return c - self.radius, c + self.radius


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def contains(self, p: torch.Tensor) -> torch.Tensor:
        lo = torch.as_tensor(self.lo, dtype=p.dtype)
        hi = torch.as_tensor(self.hi, dtype=p.dtype)
        return ((p >= lo) & (p <= hi)).all(-1)

    @property
    def centroid(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo, dtype=np.float64) + np.asarray(self.hi, dtype=np.float64))

    def moved(self, offset) -> Box:
        return Box(tuple(np.add(self.lo, offset)), tuple(np.add(self.hi, offset)))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.lo, dtype=np.float64), np.asarray(self.hi, dtype=np.float64)


@dataclass(frozen=True)
class Primitive:
    shape: Sphere | Box
    density: float
    albedo: tuple[float, float, float]
    tag: str = "background"
    view_tint: float = 0.0  # color shift per unit of the view direction's x component

    def __post_init__(self):
        if not self.density > 0:
            raise InputError(f"primitive density must be > 0, got {self.density}")
        if self.tag not in TAGS:
            raise InputError(f"primitive tag must be one of {TAGS}, got {self.tag!r}")
        if any(not 0.0 <= a <= 1.0 for a in self.albedo):
            raise InputError(f"albedo must lie in [0, 1], got {self.albedo}")


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple[Primitive, ...]
    ambient_density: float = 0.0  # black absorbing medium, counted as background

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            raise InputError("an analytic scene needs at least one primitive")
        if self.ambient_density < 0:
            raise InputError("ambient density must be >= 0")

    @property
    def centroid(self) -> np.ndarray:
        return np.mean([p.shape.centroid for p in self.primitives], axis=0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        los, his = zip(*(p.shape.bounds() for p in self.primitives))
        return np.min(los, axis=0), np.max(his, axis=0)

    def with_foreground_moved(self, offset) -> AnalyticScene:
        prims = tuple(replace(p, shape=p.shape.moved(offset)) if p.tag == "foreground" else p
                      for p in self.primitives)
        return replace(self, primitives=prims)


def _members(scene: AnalyticScene, subset: str) -> list[Primitive]:
    if subset == "all":
        return list(scene.primitives)
    if subset in TAGS:
        return [p for p in scene.primitives if p.tag == subset]
    raise InputError(f"subset must be 'all', 'foreground' or 'background', got {subset!r}")


def _eval_members(scene, prims, ambient: bool, p: torch.Tensor, d: torch.Tensor | None):
    density = torch.zeros(p.shape[:-1], dtype=p.dtype)
    weighted = torch.zeros(p.shape, dtype=p.dtype)
    for prim in prims:
        sigma = prim.shape.contains(p).to(p.dtype) * prim.density
        albedo = torch.as_tensor(prim.albedo, dtype=p.dtype).expand(p.shape)
        if prim.view_tint and d is not None:
            albedo = (albedo + prim.view_tint * d[..., :1]).clamp(0.0, 1.0)
        density = density + sigma
        weighted = weighted + sigma.unsqueeze(-1) * albedo
    if ambient and scene.ambient_density > 0:
        density = density + scene.ambient_density
    color = torch.where(density.unsqueeze(-1) > 0, weighted / density.clamp_min(1e-300).unsqueeze(-1),
                        torch.zeros_like(weighted))
    return density, color


def analytic_eval(scene: AnalyticScene, p, subset: Subset = "all", directions=None):
    """``(density, color)`` at points ``p``.

    Density sums the contained primitives of the subset; color is their
    density-weighted mean albedo, zero where the density is zero.
    """
    single = np.ndim(p) == 1
    pt = torch.as_tensor(np.atleast_2d(np.asarray(p, dtype=np.float64)))
    dt = None if directions is None else torch.as_tensor(np.atleast_2d(np.asarray(directions, np.float64)))
    density, color = _eval_members(scene, _members(scene, subset), subset != "foreground", pt, dt)
    density, color = density.numpy(), color.numpy()
    return (density[0], color[0]) if single else (density, color)


class AnalyticField(nn.Module):
    """Read-only radiance field backed by an analytic scene subset."""

    def __init__(self, scene: AnalyticScene, subset: Subset = "all"):
        super().__init__()
        self.scene = scene
        self.subset = subset
        self.prims = _members(scene, subset)
        self.register_buffer("_dtype_probe", torch.zeros(1, dtype=torch.float64))

    def forward(self, positions, directions):
        p = positions.to(torch.float64)
        d = directions.to(torch.float64)
        density, color = _eval_members(self.scene, self.prims, self.subset != "foreground", p, d)
        return color, density


def analytic_model(scene: AnalyticScene, subset: Subset = "all"):
    from .render import RadianceModel
    return RadianceModel(AnalyticField(scene, subset))


# --- oracle rendering ----------------------------------------------------------

@dataclass
class OracleViews:
    full: list[RenderResult] = field(default_factory=list)
    background: list[RenderResult] = field(default_factory=list)
    foreground: list[RenderResult] = field(default_factory=list)


def render_oracle(scene: AnalyticScene, intrinsics: CameraIntrinsics, pose: Pose, t_near: float,
                  t_far: float, n_steps: int = 512, supersample: int = 1, chunk: int = 2048
                  ) -> dict[str, RenderResult]:
    """Dense fixed-step ray march of all three subsets in one pass.

    ``supersample = k`` averages a ``k x k`` grid of sub-pixel rays.
    """
    if supersample < 1:
        raise InputError("supersample must be >= 1")
    H, W = intrinsics.height, intrinsics.width
    offs = (np.arange(supersample) + 0.5) / supersample - 0.5
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    rows, cols = rows.ravel(), cols.ravel()
    subsets = ("all", "foreground", "background")
    bounds = scene.bounds()
    sums = {s: [torch.zeros(H * W, 3, dtype=torch.float64), torch.zeros(H * W, dtype=torch.float64),
                torch.zeros(H * W, dtype=torch.float64)] for s in subsets}
    for dr in offs:
        for dc in offs:
            for start in range(0, H * W, chunk):
                sl = slice(start, min(start + chunk, H * W))
                rays = camera_rays(intrinsics, pose, rows[sl] + dr, cols[sl] + dc, t_near, t_far)
                hit = _hits_box(rays, *bounds)
                if scene.ambient_density == 0:
                    # rays missing every primitive contribute nothing
                    rays = rays[hit]
                    sl = np.arange(sl.start, sl.stop)[hit]
                    if len(sl) == 0:
                        continue
                samples = sample_stratified(rays, n_steps, jitter=False)
                for subset, (dens, col) in _march_subsets(scene, rays, samples).items():
                    cw = compositing_weights(dens, samples.deltas)
                    depth, _ = expected_depth(cw.weights, samples.t)
                    acc = sums[subset]
                    acc[0][sl] += composite(cw.weights, col)
                    acc[1][sl] += cw.opacity
                    acc[2][sl] += depth
    n = supersample * supersample
    out = {}
    for subset, (c, acc, depth) in sums.items():
        c, acc, depth = (x.numpy() / n for x in (c, acc, depth))
        disparity = 1.0 / np.maximum(depth, 1e-10)
        out[subset] = RenderResult(c.reshape(H, W, 3), depth.reshape(H, W), disparity.reshape(H, W),
                                   acc.reshape(H, W))
    return out


def _hits_box(rays, lo, hi) -> np.ndarray:
    """Slab test: does the ray's ``[t_near, t_far]`` segment touch the box?"""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays.directions
        t0 = (lo - rays.origins) * inv
        t1 = (hi - rays.origins) * inv
    t_enter = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf).max(axis=1)
    t_exit = np.nan_to_num(np.maximum(t0, t1), nan=np.inf).min(axis=1)
    return (t_enter <= t_exit) & (t_exit >= rays.t_near) & (t_enter <= rays.t_far)


def _march_subsets(scene: AnalyticScene, rays, samples):
    """Per-subset ``(density, color)`` on the sample grid, testing containment once per primitive."""
    o = torch.from_numpy(rays.origins)
    d = torch.from_numpy(rays.directions)
    pts = o[:, None, :] + samples.t[..., None] * d[:, None, :]
    parts = {tag: [torch.zeros(pts.shape[:-1], dtype=torch.float64),
                   torch.zeros(pts.shape, dtype=torch.float64)] for tag in TAGS}
    for prim in scene.primitives:
        sigma = prim.shape.contains(pts).to(torch.float64) * prim.density
        albedo = torch.as_tensor(prim.albedo, dtype=torch.float64)
        if prim.view_tint:
            albedo = (albedo + prim.view_tint * d[:, None, :1]).clamp(0.0, 1.0)
        parts[prim.tag][0] += sigma
        parts[prim.tag][1] += sigma.unsqueeze(-1) * albedo
    ambient = scene.ambient_density
    out = {}
    for subset in ("all", "foreground", "background"):
        tags = TAGS if subset == "all" else (subset,)
        dens = sum(parts[t][0] for t in tags)
        weighted = sum(parts[t][1] for t in tags)
        if subset != "foreground" and ambient > 0:
            dens = dens + ambient
        color = torch.where(dens.unsqueeze(-1) > 0, weighted / dens.clamp_min(1e-300).unsqueeze(-1),
                            torch.zeros_like(weighted))
        out[subset] = (dens, color)
    return out


# --- dataset generation --------------------------------------------------------

@dataclass(frozen=True)
class ArcSpec:
    """Forward-facing camera arc around a target point.

    Yaw sweeps ``yaw_span_deg`` evenly; pitch follows one sine period of
    amplitude ``pitch_span_deg / 2``; ``jitter_deg`` adds seeded hand-held
    wobble to both.
    """

    radius: float = 4.0
    yaw_span_deg: float = 40.0
    pitch_span_deg: float = 16.0
    jitter_deg: float = 1.0
    target: tuple[float, float, float] | None = None
    fov_deg: float = 30.0


@dataclass
class GeneratedDataset:
    dataset: PosedDataset
    oracle: OracleViews


def arc_poses(n_views: int, arc: ArcSpec, target, seed: int = 0) -> list[Pose]:
    if n_views < 2:
        raise InputError(f"need at least 2 views, got {n_views}")
    if not arc.radius > 0 or not math.isfinite(arc.radius):
        raise InputError(f"arc radius must be > 0, got {arc.radius}")
    if abs(arc.pitch_span_deg) >= 180:
        raise InputError("arc pitch span must stay below 180 degrees")
    target = np.asarray(target, dtype=np.float64)
    wobble = (rng.uniforms(rng.key(seed, 7), np.arange(n_views), 2) - 0.5) * 2 * arc.jitter_deg
    poses = []
    for i in range(n_views):
        s = i / (n_views - 1)
        yaw = math.radians(-0.5 * arc.yaw_span_deg + arc.yaw_span_deg * s + wobble[i, 0])
        pitch = math.radians(0.5 * arc.pitch_span_deg * math.sin(2 * math.pi * s) + wobble[i, 1])
        eye = target + arc.radius * np.array([math.sin(yaw) * math.cos(pitch), math.sin(pitch),
                                              math.cos(yaw) * math.cos(pitch)])
        poses.append(Pose.look_at(eye, target))
    return poses


def generate_dataset(scene: AnalyticScene, n_views: int = 20, arc: ArcSpec | None = None,
                     resolution: tuple[int, int] = (64, 64), seed: int = 0, supersample: int = 2,
                     n_steps: int = 512, t_near: float | None = None, t_far: float | None = None
                     ) -> GeneratedDataset:
    """Render a posed dataset plus full / background / foreground oracle views.

    Images are quantized to 8-bit levels so they survive a PNG round trip
    unchanged. Masks mark pixels whose foreground-only opacity exceeds 0.5.
    """
    arc = arc or ArcSpec()
    W, H = resolution
    target = scene.centroid if arc.target is None else np.asarray(arc.target, dtype=np.float64)
    poses = arc_poses(n_views, arc, target, seed)
    t_near = arc.radius - 1.5 if t_near is None else t_near
    t_far = arc.radius + 1.5 if t_far is None else t_far
    focal = 0.5 * W / math.tan(math.radians(arc.fov_deg) / 2)
    intr = CameraIntrinsics(W, H, focal)
    oracle = OracleViews()
    images, masks = [], []
    for pose in poses:
        views = render_oracle(scene, intr, pose, t_near, t_far, n_steps, supersample)
        oracle.full.append(views["all"])
        oracle.background.append(views["background"])
        oracle.foreground.append(views["foreground"])
        images.append(quantize(views["all"].color))
        masks.append((views["foreground"].opacity > 0.5).astype(np.uint8))
    ds = PosedDataset(np.stack(images), np.stack(masks), poses, [intr] * n_views, t_near, t_far)
    return GeneratedDataset(ds, oracle)


def default_scene() -> AnalyticScene:
    """Desk-scale disjoint scene: a foreground sphere in front of a background box."""
    return AnalyticScene((
        Primitive(Sphere((-0.55, -0.05, 0.35), 0.3), 40.0, (0.9, 0.3, 0.15), "foreground"),
        Primitive(Box((-0.25, -0.5, -0.55), (0.75, 0.45, -0.15)), 40.0, (0.2, 0.45, 0.8), "background"),
    ))


def occluder_scene() -> AnalyticScene:
    """A dark sphere fully in front of a bright wall: the background is brighter than the full scene inside the mask."""
    return AnalyticScene((
        Primitive(Sphere((0.0, 0.0, 0.35), 0.3), 40.0, (0.1, 0.1, 0.1), "foreground"),
        Primitive(Box((-0.9, -0.8, -0.55), (0.9, 0.8, -0.15)), 40.0, (0.8, 0.75, 0.6), "background"),
    ))
