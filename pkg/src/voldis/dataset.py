"""Posed image datasets with foreground masks, and their on-disk layout.

Directory layout::

    manifest.json
    images/NNNN.png      8-bit RGB
    masks/NNNN.png       8-bit, 0 = background, 255 = foreground object
    depth/NNNN.pfm       optional

``manifest.json``::

    {"resolution": [W, H], "t_near": f, "t_far": f,
     "views": [{"image": path, "mask": path, "pose": [12 floats, row-major 3x4],
                "focal": f, "principal": [cx, cy]}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .geometry import CameraIntrinsics, Pose
from .images import from_uint8, load_pfm, load_png, save_pfm, save_png, to_uint8


@dataclass
class PosedDataset:
    images: np.ndarray          # (V, H, W, 3) float32 in [0, 1]
    masks: np.ndarray           # (V, H, W) uint8 in {0, 1}
    poses: list[Pose]
    intrinsics: list[CameraIntrinsics]
    t_near: float
    t_far: float

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        masks = np.asarray(self.masks)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise InputError(f"images must be (V, H, W, 3), got {self.images.shape}")
        if masks.shape != self.images.shape[:3]:
            raise InputError(f"masks {masks.shape} do not match images {self.images.shape[:3]}")
        if not np.isin(masks, (0, 1)).all():
            raise InputError("masks must contain only 0 and 1")
        self.masks = masks.astype(np.uint8)
        if len(self.poses) != len(self.images) or len(self.intrinsics) != len(self.images):
            raise InputError("need one pose and one intrinsics record per image")
        if len(self.images) == 0:
            raise InputError("dataset has no views")
        h, w = self.images.shape[1:3]
        for i, k in enumerate(self.intrinsics):
            if (k.width, k.height) != (w, h):
                raise InputError(f"view {i}: intrinsics {k.width}x{k.height} differ from images {w}x{h}")
        if not 0 < self.t_near < self.t_far:
            raise InputError(f"invalid depth range [{self.t_near}, {self.t_far}]")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.images.shape[2], self.images.shape[1]

    def subset(self, indices) -> PosedDataset:
        idx = list(indices)
        return PosedDataset(self.images[idx], self.masks[idx], [self.poses[i] for i in idx],
                            [self.intrinsics[i] for i in idx], self.t_near, self.t_far)

    def resized(self, width: int, height: int) -> PosedDataset:
        """Box-filtered images; masks resampled and re-binarized at 0.5."""
        if (width, height) == self.resolution:
            return self
        images = np.stack([
            from_uint8(np.asarray(Image.fromarray(to_uint8(im)).resize((width, height), Image.BOX)))
            for im in self.images])
        masks = np.stack([
            (np.asarray(Image.fromarray(m * 255).resize((width, height), Image.BOX)) >= 128).astype(np.uint8)
            for m in self.masks])
        intr = [k.resized(width, height) for k in self.intrinsics]
        return PosedDataset(images, masks, list(self.poses), intr, self.t_near, self.t_far)


def save_dataset(dataset: PosedDataset, path, depth: list[np.ndarray] | None = None) -> None:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    if depth is not None:
        (root / "depth").mkdir(exist_ok=True)
    views = []
    for i in range(len(dataset)):
        name = f"{i:04d}.png"
        save_png(root / "images" / name, dataset.images[i])
        save_png(root / "masks" / name, dataset.masks[i] * np.uint8(255))
        k = dataset.intrinsics[i]
        views.append({
            "image": f"images/{name}",
            "mask": f"masks/{name}",
            "pose": [float(x) for x in dataset.poses[i].matrix().reshape(-1)],
            "focal": k.focal,
            "principal": [k.cx, k.cy],
        })
        if depth is not None:
            save_pfm(root / "depth" / f"{i:04d}.pfm", depth[i])
    manifest = {"resolution": list(dataset.resolution), "t_near": dataset.t_near,
                "t_far": dataset.t_far, "views": views}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise InputError(f"{where}: missing key {key!r}")
    return obj[key]


def load_dataset(path) -> PosedDataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise InputError(f"dataset manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise InputError(f"{manifest_path}: malformed manifest ({exc})") from exc
    where = str(manifest_path)
    w, h = (int(v) for v in _require(manifest, "resolution", where))
    t_near = float(_require(manifest, "t_near", where))
    t_far = float(_require(manifest, "t_far", where))
    images, masks, poses, intr = [], [], [], []
    for i, view in enumerate(_require(manifest, "views", where)):
        vw = f"{where} view {i}"
        img_path = root / _require(view, "image", vw)
        mask_path = root / _require(view, "mask", vw)
        if not img_path.is_file():
            raise InputError(f"{vw}: image file missing: {img_path}")
        if not mask_path.is_file():
            raise InputError(f"{vw}: mask file missing: {mask_path}")
        img = load_png(img_path)
        if img.ndim == 3 and img.shape[2] == 4:
            img = img[..., :3]
        if img.shape != (h, w, 3):
            raise InputError(f"{img_path}: expected {w}x{h} RGB, got shape {img.shape}")
        mask = load_png(mask_path)
        if mask.ndim == 3:
            mask = mask[..., 0]
        if mask.shape != (h, w):
            raise InputError(f"{mask_path}: expected {w}x{h} mask, got shape {mask.shape}")
        if not np.isin(mask, (0, 255)).all():
            raise InputError(f"{mask_path}: mask is not binary (values other than 0/255)")
        pose = _require(view, "pose", vw)
        if len(pose) != 12:
            raise InputError(f"{vw}: pose must have 12 entries, got {len(pose)}")
        images.append(from_uint8(img))
        masks.append((mask == 255).astype(np.uint8))
        poses.append(Pose.from_matrix(pose))
        intr.append(CameraIntrinsics(w, h, float(_require(view, "focal", vw)),
                                     tuple(_require(view, "principal", vw))))
    if not images:
        raise InputError(f"{where}: no views")
    return PosedDataset(np.stack(images), np.stack(masks), poses, intr, t_near, t_far)


def load_depth(path, index: int) -> np.ndarray:
    return load_pfm(Path(path) / "depth" / f"{index:04d}.pfm")
