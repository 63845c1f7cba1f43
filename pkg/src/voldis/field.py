"""Trainable radiance fields: position + direction -> (color, density).

Two representations share one contract. Raw network / grid outputs are
squashed the same way for both: color through the logistic map into
``[0, 1]^3`` and density through softplus into ``[0, inf)``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import CorruptedStateError, InputError

MAGIC = b"VDSF"
FORMAT_VERSION = 1
TAG_VOXEL = 1
TAG_MLP = 2
TAG_OVERRIDE = 3
TAG_ADAM = 100


def softplus_inverse(y: float) -> float:
    """Raw value whose softplus is ``y`` (``-inf`` for ``y == 0``)."""
    if y <= 0:
        return -math.inf if y == 0 else math.nan
    return y + math.log(-math.expm1(-y))


def logit(y: float) -> float:
    return math.log(y) - math.log1p(-y)


@dataclass
class FieldOutput:
    colors: torch.Tensor     # (P, 3) in [0, 1]
    densities: torch.Tensor  # (P,) >= 0


class FourierEncoding(nn.Module):
    """Random Fourier features ``[cos(2 pi B p), sin(2 pi B p)]``.

    ``B`` has ``n`` rows drawn from ``N(0, sigma^2)`` and is frozen.
    """

    def __init__(self, n_features: int, sigma: float, in_dim: int = 3, seed: int = 0,
                 matrix: torch.Tensor | None = None):
        super().__init__()
        if matrix is None:
            gen = torch.Generator().manual_seed(int(seed))
            matrix = torch.randn(n_features, in_dim, generator=gen) * sigma
        self.sigma = float(sigma)
        self.register_buffer("B", torch.as_tensor(matrix, dtype=torch.float32).clone())

    @property
    def n_features(self) -> int:
        return self.B.shape[0]

    @property
    def out_dim(self) -> int:
        return 2 * self.B.shape[0]

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        proj = 2 * math.pi * (p @ self.B.to(p.dtype).T)
        return torch.cat([torch.cos(proj), torch.sin(proj)], dim=-1)


def encode(enc: FourierEncoding, p) -> torch.Tensor:
    p = torch.as_tensor(p, dtype=enc.B.dtype)
    return enc(p)


class RadianceField(nn.Module):
    """Common base: subclasses implement ``forward`` and the checkpoint meta block."""

    tag: int = 0

    def forward(self, positions: torch.Tensor, directions: torch.Tensor):
        raise NotImplementedError

    def meta_bytes(self) -> bytes:
        raise NotImplementedError

    @classmethod
    def from_meta(cls, meta: bytes) -> RadianceField:
        raise NotImplementedError

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.state_dict().values())).dtype


class MLPField(RadianceField):
    """Fourier-feature MLP with ReLU hidden layers.

    Density is read off the shared trunk; color additionally sees the
    encoded view direction through one narrower hidden layer.
    """

    tag = TAG_MLP

    def __init__(self, pos_features: int = 128, pos_sigma: float = 10.0,
                 dir_features: int = 16, dir_sigma: float = 4.0,
                 depth: int = 4, width: int = 128, seed: int = 0):
        super().__init__()
        if depth < 1 or width < 1:
            raise InputError("MLP depth and width must be >= 1")
        self.config = dict(pos_features=pos_features, pos_sigma=pos_sigma, dir_features=dir_features,
                           dir_sigma=dir_sigma, depth=depth, width=width, seed=seed)
        self.pos_enc = FourierEncoding(pos_features, pos_sigma, seed=seed)
        self.dir_enc = FourierEncoding(dir_features, dir_sigma, seed=seed + 1)
        dims = [self.pos_enc.out_dim] + [width] * depth
        self.trunk = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.density_head = nn.Linear(width, 1)
        self.color_hidden = nn.Linear(width + self.dir_enc.out_dim, max(width // 2, 1))
        self.color_head = nn.Linear(max(width // 2, 1), 3)
        gen = torch.Generator().manual_seed(int(seed) + 2)
        with torch.no_grad():
            for layer in [*self.trunk, self.density_head, self.color_hidden, self.color_head]:
                bound = math.sqrt(6.0 / layer.in_features)
                if layer in (self.density_head, self.color_head):
                    bound = math.sqrt(1.0 / layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.zero_()

    def forward(self, positions, directions):
        h = self.pos_enc(positions)
        for layer in self.trunk:
            h = F.relu(layer(h))
        density = F.softplus(self.density_head(h)).squeeze(-1)
        c = F.relu(self.color_hidden(torch.cat([h, self.dir_enc(directions)], dim=-1)))
        color = torch.sigmoid(self.color_head(c))
        return color, density

    def meta_bytes(self) -> bytes:
        c = self.config
        return struct.pack("<5I2d", c["pos_features"], c["dir_features"], c["depth"], c["width"],
                           c["seed"], c["pos_sigma"], c["dir_sigma"])

    @classmethod
    def from_meta(cls, meta: bytes) -> MLPField:
        pf, df, depth, width, seed, ps, ds = struct.unpack("<5I2d", meta)
        return cls(pf, ps, df, ds, depth, width, seed)


def trilinear_corners(positions: torch.Tensor, bbox_min, bbox_max, resolution):
    """Flat corner indices ``(P, 8)``, weights ``(P, 8)`` and an inside mask ``(P,)``
    for a row-major vertex grid spanning ``[bbox_min, bbox_max]``."""
    lo = torch.as_tensor(bbox_min, dtype=positions.dtype)
    hi = torch.as_tensor(bbox_max, dtype=positions.dtype)
    n = torch.as_tensor(resolution, dtype=positions.dtype)
    u = (positions - lo) / (hi - lo) * (n - 1)
    inside = ((u >= 0) & (u <= n - 1)).all(dim=-1)
    u = torch.minimum(u.clamp(min=0), n - 1)
    i0 = torch.minimum(u.floor(), n - 2)
    frac = u - i0
    i0 = i0.long()
    sx, sy, sz = resolution[1] * resolution[2], resolution[2], 1
    base = i0[:, 0] * sx + i0[:, 1] * sy + i0[:, 2] * sz
    idx, wts = [], []
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1 - frac[:, 2]
                idx.append(base + dx * sx + dy * sy + dz * sz)
                wts.append(wx * wy * wz)
    return torch.stack(idx, dim=1), torch.stack(wts, dim=1), inside


class VoxelGridField(RadianceField):
    """Dense vertex grid over an axis-aligned box, trilinearly interpolated.

    Raw values (1 density + 3 color channels per vertex) are interpolated
    first and squashed afterwards. Outside the box the field is empty:
    density and color are both zero.
    """

    tag = TAG_VOXEL

    def __init__(self, resolution=(64, 64, 64), bbox_min=(-1.0, -1.0, -1.0), bbox_max=(1.0, 1.0, 1.0),
                 init_density: float = 0.1, init_color: float = 0.01,
                 view_dependent: bool = False, dir_features: int = 16, dir_sigma: float = 4.0,
                 seed: int = 0):
        super().__init__()
        res = tuple(int(r) for r in resolution)
        if len(res) != 3 or min(res) < 2:
            raise InputError(f"voxel resolution needs >= 2 vertices per axis, got {resolution}")
        lo = np.asarray(bbox_min, dtype=np.float64)
        hi = np.asarray(bbox_max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise InputError(f"invalid bounding box {bbox_min} .. {bbox_max}")
        self.resolution = res
        self.bbox_min = lo
        self.bbox_max = hi
        self.view_dependent = bool(view_dependent)
        self.dir_config = (int(dir_features), float(dir_sigma), int(seed))
        raw = torch.empty(*res, 4)
        raw[..., 0] = softplus_inverse(init_density)
        raw[..., 1:] = logit(init_color)
        self.grid = nn.Parameter(raw)
        if self.view_dependent:
            self.dir_enc = FourierEncoding(dir_features, dir_sigma, seed=seed + 1)
            self.dir_head = nn.Linear(self.dir_enc.out_dim, 3)
            nn.init.zeros_(self.dir_head.weight)
            nn.init.zeros_(self.dir_head.bias)

    def trilinear(self, positions: torch.Tensor):
        """Corner indices ``(P, 8)``, weights ``(P, 8)`` and an inside mask ``(P,)``."""
        return trilinear_corners(positions, self.bbox_min, self.bbox_max, self.resolution)

    def interpolate_raw(self, positions: torch.Tensor):
        idx, wts, inside = self.trilinear(positions)
        flat = self.grid.reshape(-1, 4)
        corners = flat.index_select(0, idx.reshape(-1)).reshape(idx.shape[0], 8, 4)
        raw = (corners * wts.unsqueeze(-1).to(flat.dtype)).sum(dim=1)
        return raw, inside

    def forward(self, positions, directions):
        raw, inside = self.interpolate_raw(positions)
        raw_color = raw[:, 1:]
        if self.view_dependent:
            raw_color = raw_color + self.dir_head(self.dir_enc(directions))
        mask = inside.to(raw.dtype)
        density = F.softplus(raw[:, 0]) * mask
        color = torch.sigmoid(raw_color) * mask.unsqueeze(-1)
        return color, density

    def meta_bytes(self) -> bytes:
        df, ds, seed = self.dir_config
        return struct.pack("<3I6d3Id", *self.resolution, *self.bbox_min, *self.bbox_max,
                           int(self.view_dependent), df, seed, ds)

    @classmethod
    def from_meta(cls, meta: bytes) -> VoxelGridField:
        vals = struct.unpack("<3I6d3Id", meta)
        nx, ny, nz = vals[:3]
        lo, hi = vals[3:6], vals[6:9]
        vd, df, seed, ds = vals[9:]
        return cls((nx, ny, nz), lo, hi, view_dependent=bool(vd), dir_features=df, dir_sigma=ds,
                   seed=seed)


FIELD_CLASSES = {TAG_VOXEL: VoxelGridField, TAG_MLP: MLPField}


def check_finite(field: nn.Module) -> None:
    for name, tensor in field.state_dict().items():
        if not torch.isfinite(tensor).all():
            raise CorruptedStateError(f"non-finite values in field parameter {name!r}")


def eval_field(field: RadianceField, positions, directions) -> FieldOutput:
    """Evaluate a batch of (position, direction) queries."""
    check_finite(field)
    positions = torch.as_tensor(positions, dtype=field.dtype)
    directions = torch.as_tensor(directions, dtype=field.dtype)
    if positions.shape != directions.shape or positions.shape[-1] != 3:
        raise InputError(f"positions {tuple(positions.shape)} and directions "
                         f"{tuple(directions.shape)} must both be (P, 3)")
    colors, densities = field(positions.reshape(-1, 3), directions.reshape(-1, 3))
    return FieldOutput(colors, densities)


def parameter_layout(field: nn.Module) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(p.shape)) for name, p in field.named_parameters()]


def backward(field: RadianceField, positions, directions, color_adjoint, density_adjoint
             ) -> dict[str, torch.Tensor]:
    """Gradient of ``<color_adjoint, colors> + <density_adjoint, densities>`` for every parameter."""
    positions = torch.as_tensor(positions, dtype=field.dtype)
    directions = torch.as_tensor(directions, dtype=field.dtype)
    color_adjoint = torch.as_tensor(color_adjoint, dtype=field.dtype)
    density_adjoint = torch.as_tensor(density_adjoint, dtype=field.dtype)
    n = positions.reshape(-1, 3).shape[0]
    if color_adjoint.shape != (n, 3) or density_adjoint.shape != (n,):
        raise InputError(f"adjoint shapes {tuple(color_adjoint.shape)}, {tuple(density_adjoint.shape)} "
                         f"do not match a batch of {n} queries")
    names, params = zip(*field.named_parameters())
    with torch.enable_grad():
        colors, densities = field(positions.reshape(-1, 3), directions.reshape(-1, 3))
        total = (colors * color_adjoint).sum() + (densities * density_adjoint).sum()
        grads = torch.autograd.grad(total, params, allow_unused=True)
    return {name: (g if g is not None else torch.zeros_like(p))
            for name, p, g in zip(names, params, grads)}


# --- binary container -------------------------------------------------------

def write_container(path, tag: int, meta: bytes, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4").reshape(-1)
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, tag, len(meta)) + meta
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())


def read_container(path) -> tuple[int, bytes, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != MAGIC:
        raise InputError(f"{path}: not a field container (bad magic)")
    version, tag, meta_len = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported container version {version}")
    off = 16
    meta = data[off:off + meta_len]
    off += meta_len
    if len(data) < off + 8:
        raise InputError(f"{path}: truncated container")
    (count,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) != off + 4 * count:
        raise InputError(f"{path}: expected {count} float32 values, file size disagrees")
    values = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32)
    return tag, meta, values


def flatten_state(module: nn.Module) -> np.ndarray:
    parts = [t.detach().to(torch.float32).reshape(-1).numpy() for t in module.state_dict().values()]
    return np.concatenate(parts) if parts else np.zeros(0, np.float32)


def load_flat_state(module: nn.Module, values: np.ndarray) -> None:
    state = module.state_dict()
    total = sum(t.numel() for t in state.values())
    if total != values.size:
        raise InputError(f"checkpoint holds {values.size} values, field expects {total}")
    new, off = {}, 0
    for name, t in state.items():
        chunk = values[off:off + t.numel()].reshape(t.shape)
        new[name] = torch.from_numpy(chunk.copy()).to(t.dtype)
        off += t.numel()
    module.load_state_dict(new)


def save_field(field: RadianceField, path) -> None:
    write_container(path, field.tag, field.meta_bytes(), flatten_state(field))


def load_field(path) -> RadianceField:
    tag, meta, values = read_container(path)
    if tag not in FIELD_CLASSES:
        raise InputError(f"{path}: container tag {tag} is not a radiance field")
    field = FIELD_CLASSES[tag].from_meta(meta)
    load_flat_state(field, values)
    return field
