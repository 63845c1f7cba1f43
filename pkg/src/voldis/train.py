"""Reconstruction losses, Adam, and fitting a radiance model to a posed dataset.

Two fits are run per scene: one with the plain photometric loss (the full
scene) and one that ignores pixels inside the object mask (the background).
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Literal

import numpy as np
import torch
from scipy import ndimage

from . import rng
from .dataset import PosedDataset
from .errors import CorruptedStateError, InputError
from .field import TAG_ADAM, RadianceField, load_field, read_container, save_field, write_container
from .geometry import Rays, generate_rays
from .render import RadianceModel, SamplingConfig, render_rays, render_view

log = logging.getLogger(__name__)

LossKind = Literal["full", "masked_bg"]

# Optimizer and resolution defaults used for the published real-scene results.
ADAM_BETAS = (0.9, 0.999)
LR_START = 5e-4
LR_END = 5e-5
TRAIN_RESOLUTION = (504, 378)
SEMANTIC_RESOLUTION = (252, 189)

METRICS_HEADER = ["iter", "loss", "lr", "psnr"]


@dataclass
class TrainConfig:
    iterations: int = 5000
    rays_per_batch: int = 1024
    n_coarse: int = 64
    n_fine: int = 64
    fine_pass: bool = True
    lr_start: float = LR_START
    lr_end: float = LR_END
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 500
    eval_every: int = 500
    holdout_stride: int = 8       # views with index % stride == 0 are held out; 0 keeps all
    max_resolution: tuple[int, int] | None = TRAIN_RESOLUTION  # larger datasets are downsampled
    mask_dilation: int = 0        # pixels; grows masks before the masked loss
    last_delta: float | None = None

    def __post_init__(self):
        if self.iterations < 0:
            raise InputError("iterations must be >= 0")
        if min(self.rays_per_batch, self.n_coarse) < 1:
            raise InputError("rays_per_batch and n_coarse must be >= 1")
        if self.n_fine < 0 or self.checkpoint_every < 1 or self.eval_every < 1:
            raise InputError("n_fine must be >= 0, checkpoint/eval intervals >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise InputError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.max_resolution is not None:
            self.max_resolution = tuple(int(v) for v in self.max_resolution)

    def sampling(self, jitter: bool = False) -> SamplingConfig:
        return SamplingConfig(self.n_coarse, self.n_fine if self.fine_pass else 0, jitter=jitter,
                              seed=self.seed, last_delta=self.last_delta)


def lr_at(k: int, cfg: TrainConfig) -> float:
    """Exponential decay from ``lr_start`` at step 0 to ``lr_end`` at ``iterations``."""
    if cfg.iterations == 0:
        return cfg.lr_start
    frac = k / cfg.iterations
    if frac == 1:
        return cfg.lr_end
    return cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac


# --- losses ---------------------------------------------------------------------

@dataclass
class LossValue:
    value: torch.Tensor    # scalar, differentiable
    adjoint: torch.Tensor  # d value / d predicted


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise InputError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def loss_full(predicted: torch.Tensor, target: torch.Tensor) -> LossValue:
    """Sum of squared errors over the batch."""
    target = torch.as_tensor(target, dtype=predicted.dtype)
    _same_shape(predicted, target, "loss_full")
    diff = predicted - target
    return LossValue((diff ** 2).sum(), 2 * diff.detach())


def loss_masked_bg(predicted: torch.Tensor, target: torch.Tensor, mask) -> LossValue:
    """Squared error restricted to pixels outside the object mask (mask = 1 on the object)."""
    target = torch.as_tensor(target, dtype=predicted.dtype)
    _same_shape(predicted, target, "loss_masked_bg")
    mask = torch.as_tensor(mask)
    if not ((mask == 0) | (mask == 1)).all():
        raise InputError("loss_masked_bg: mask must be binary")
    keep = (1 - mask.to(predicted.dtype))
    if keep.dim() == predicted.dim() - 1:
        keep = keep.unsqueeze(-1)
    diff = keep * (predicted - target)
    return LossValue((diff ** 2).sum(), 2 * keep * diff.detach())


def psnr(a, b, mask=None) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; ``inf`` when they are identical.

    With ``mask`` (H, W), only pixels where it is nonzero count.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"psnr: shapes {a.shape} and {b.shape} differ")
    err = (a - b) ** 2
    if mask is not None:
        sel = np.asarray(mask).astype(bool)
        err = err[sel]
    mse = float(err.mean()) if err.size else 0.0
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


# --- Adam -----------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> AdamState:
        params = list(params)
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = ADAM_BETAS[0],
              beta2: float = ADAM_BETAS[1], eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    params, grads = list(params), list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InputError("adam_step: params, grads and state are not aligned")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise InputError(f"adam_step: gradient {i} has shape {tuple(g.shape)}, "
                             f"parameter has {tuple(params[i].shape)}")
        if not torch.isfinite(g).all():
            raise CorruptedStateError(f"non-finite gradient for parameter {i} at step {state.step + 1}")
    state.step += 1
    bc1 = 1 - beta1 ** state.step
    bc2 = 1 - beta2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m / bc1, denom, value=-lr)


# --- checkpoints ----------------------------------------------------------------

def save_adam(state: AdamState, path) -> None:
    values = [t.detach().reshape(-1).to(torch.float32).numpy() for t in (*state.m, *state.v)]
    flat = np.concatenate(values) if values else np.zeros(0, np.float32)
    write_container(path, TAG_ADAM, struct.pack("<Q", state.step), flat)


def load_adam(path, like_params) -> AdamState:
    tag, meta, values = read_container(path)
    if tag != TAG_ADAM:
        raise InputError(f"{path}: not an optimizer state container")
    (step,) = struct.unpack("<Q", meta)
    state = AdamState.zeros_like(like_params)
    off = 0
    for t in (*state.m, *state.v):
        n = t.numel()
        if off + n > values.size:
            raise InputError(f"{path}: optimizer state does not match the parameters")
        t.copy_(torch.from_numpy(values[off:off + n].reshape(t.shape)))
        off += n
    if off != values.size:
        raise InputError(f"{path}: optimizer state does not match the parameters")
    state.step = step
    return state


def save_model(model: RadianceModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_field(model.coarse, directory / "coarse.vdsf")
    fine_path = directory / "fine.vdsf"
    if model.fine is not None:
        save_field(model.fine, fine_path)
    elif fine_path.exists():
        fine_path.unlink()


def load_model(directory) -> RadianceModel:
    directory = Path(directory)
    if (directory / "checkpoints").is_dir():
        directory = directory / "checkpoints"
    coarse_path = directory / "coarse.vdsf"
    if not coarse_path.is_file():
        raise InputError(f"no field checkpoint at {coarse_path}")
    fine_path = directory / "fine.vdsf"
    fine = load_field(fine_path) if fine_path.is_file() else None
    return RadianceModel(load_field(coarse_path), fine)


def make_model(kind: str = "voxel", fine: bool = True, seed: int = 0, **kwargs) -> RadianceModel:
    """Fresh coarse (+ fine) fields of one representation."""
    from .field import MLPField, VoxelGridField
    if kind == "voxel":
        build = lambda s: VoxelGridField(seed=s, **kwargs)
    elif kind == "mlp":
        build = lambda s: MLPField(seed=s, **kwargs)
    else:
        raise InputError(f"unknown field kind {kind!r} (expected 'voxel' or 'mlp')")
    return RadianceModel(build(seed), build(seed + 100) if fine else None)


# --- fitting --------------------------------------------------------------------

@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled or prev)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def split_views(n: int, stride: int) -> tuple[list[int], list[int]]:
    if stride <= 0 or n < 2:
        return list(range(n)), []
    held = [i for i in range(n) if i % stride == 0]
    return [i for i in range(n) if i % stride != 0], held


def prepare_dataset(dataset: PosedDataset, cfg: TrainConfig) -> PosedDataset:
    if cfg.max_resolution is not None:
        W, H = dataset.resolution
        mw, mh = cfg.max_resolution
        if W > mw or H > mh:
            scale = min(mw / W, mh / H)
            dataset = dataset.resized(max(1, round(W * scale)), max(1, round(H * scale)))
    return dataset


def dilate_masks(masks: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return masks
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    disk = (yy ** 2 + xx ** 2) <= radius ** 2
    return np.stack([ndimage.binary_dilation(m.astype(bool), structure=disk) for m in masks]).astype(np.uint8)


@dataclass
class FitResult:
    model: RadianceModel
    trace: list[dict] = field(default_factory=list)
    states: list[AdamState] = field(default_factory=list)
    train_views: list[int] = field(default_factory=list)
    holdout_views: list[int] = field(default_factory=list)


def evaluate_psnr(model: RadianceModel, dataset: PosedDataset, views: list[int], cfg: TrainConfig,
                  loss_kind: LossKind = "full") -> float:
    """Mean PSNR over ``views``; the masked fit is scored outside the masks only."""
    scores = []
    for i in views:
        out = render_view(model, dataset.intrinsics[i], dataset.poses[i], cfg.sampling(),
                          dataset.t_near, dataset.t_far)
        mask = None if loss_kind == "full" else dataset.masks[i] == 0
        scores.append(psnr(out.color, dataset.images[i], mask))
    return float(np.mean(scores)) if scores else math.nan


def fit_field(dataset: PosedDataset, model: RadianceModel, loss_kind: LossKind, cfg: TrainConfig,
              run_dir=None, progress: Callable[[dict], None] | None = None) -> FitResult:
    """Optimize ``model`` in place against ``dataset``.

    Each iteration draws a ray batch uniformly over (view, pixel) of the
    training views, renders the coarse and fine passes, sums the selected
    loss over both and takes one Adam step on all parameters.
    """
    if loss_kind not in ("full", "masked_bg"):
        raise InputError(f"loss kind must be 'full' or 'masked_bg', got {loss_kind!r}")
    dataset = prepare_dataset(dataset, cfg)
    train_idx, held_idx = split_views(len(dataset), cfg.holdout_stride)
    eval_idx = held_idx or train_idx[:1]

    origins, dirs, targets, masks = [], [], [], []
    train_masks = dilate_masks(dataset.masks[train_idx], cfg.mask_dilation)
    for j, i in enumerate(train_idx):
        rays = generate_rays(dataset.intrinsics[i], dataset.poses[i], t_near=dataset.t_near,
                             t_far=dataset.t_far)
        origins.append(rays.origins)
        dirs.append(rays.directions)
        targets.append(dataset.images[i].reshape(-1, 3))
        masks.append(train_masks[j].reshape(-1))
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    dtype = model.coarse.dtype if hasattr(model.coarse, "dtype") else torch.float32
    targets = torch.from_numpy(np.concatenate(targets)).to(dtype)
    masks = torch.from_numpy(np.concatenate(masks))
    total = len(origins)

    use_fine = cfg.fine_pass and cfg.n_fine > 0
    fields: list[RadianceField] = [model.coarse]
    if use_fine and model.fine is not None:
        fields.append(model.fine)
    groups = [list(f.parameters()) for f in fields]
    states = [AdamState.zeros_like(g) for g in groups]
    params = [p for g in groups for p in g]
    sampling = cfg.sampling(jitter=True)

    run_dir = Path(run_dir) if run_dir is not None else None
    writer = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(run_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(metrics_fh)
        writer.writerow(METRICS_HEADER)

    result = FitResult(model, [], states, train_idx, held_idx)
    running = 0.0
    try:
        with deterministic_mode(cfg.deterministic):
            for it in range(cfg.iterations):
                lr = lr_at(it, cfg)
                u = rng.uniforms(rng.key(cfg.seed, 11, it), np.zeros(1, np.uint64), cfg.rays_per_batch)[0]
                idx = np.minimum((u * total).astype(np.int64), total - 1)
                rays = Rays(origins[idx], dirs[idx], dataset.t_near, dataset.t_far, idx.astype(np.uint64))
                passes = render_rays(model, rays, sampling, seed=int(rng.key(cfg.seed, 12, it) >> np.uint64(1)))
                outs = [passes.coarse] + ([passes.fine] if passes.fine is not None else [])
                target = targets[idx]
                loss = 0.0
                for out in outs:
                    pred = out.color()
                    term = (loss_full(pred, target) if loss_kind == "full"
                            else loss_masked_bg(pred, target, masks[idx]))
                    loss = loss + term.value
                if not torch.isfinite(loss):
                    raise CorruptedStateError(f"non-finite loss at iteration {it}")
                grads = torch.autograd.grad(loss, params, allow_unused=True)
                grads = [g if g is not None else torch.zeros_like(p) for p, g in zip(params, grads)]
                off = 0
                for g_params, state in zip(groups, states):
                    n = len(g_params)
                    adam_step(g_params, grads[off:off + n], state, lr, cfg.beta1, cfg.beta2, cfg.eps)
                    off += n
                running = float(loss.detach()) / (cfg.rays_per_batch * len(outs))
                step = it + 1
                if step % cfg.eval_every == 0 or step == cfg.iterations:
                    row = {"iter": step, "loss": running, "lr": lr_at(step, cfg),
                           "psnr": evaluate_psnr(model, dataset, eval_idx, cfg, loss_kind)}
                    result.trace.append(row)
                    log.info("iter %d loss %.6f lr %.3g psnr %.2f", step, row["loss"], row["lr"], row["psnr"])
                    if writer is not None:
                        writer.writerow([row[k] for k in METRICS_HEADER])
                        metrics_fh.flush()
                    if progress is not None:
                        progress(row)
                if run_dir is not None and (step % cfg.checkpoint_every == 0 or step == cfg.iterations):
                    save_checkpoint(run_dir / "checkpoints", model, states)
    finally:
        if writer is not None:
            metrics_fh.close()
    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoints", model, states)
    return result


def save_checkpoint(directory, model: RadianceModel, states: list[AdamState]) -> None:
    directory = Path(directory)
    save_model(model, directory)
    for name, state in zip(("coarse", "fine"), states):
        save_adam(state, directory / f"adam_{name}.vdsf")


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"metrics file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise InputError(f"{path}: expected header {','.join(METRICS_HEADER)}")
        return [{"iter": int(r["iter"]), "loss": float(r["loss"]), "lr": float(r["lr"]),
                 "psnr": float(r["psnr"])} for r in reader]


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    if d["max_resolution"] is not None:
        d["max_resolution"] = list(d["max_resolution"])
    return d
