"""Desk-scale datasets, IDX import/export, disjoint split plans, augmentation."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, H, W, C) in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, name: Optional[str] = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name)


# -- synthetic generator -----------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    per_class: int = 300
    size: int = 12
    channels: int = 1
    strokes_per_class: int = 3
    stroke_pool: int = 12
    jitter_shift: float = 1.5
    jitter_rotate: float = 10.0
    elastic_alpha: float = 1.0
    pixel_noise: float = 0.1
    distractors: int = 1

    def __post_init__(self):
        if not 4 <= self.num_classes <= 10:
            raise ValueError("num_classes must be in [4, 10]")
        if self.per_class < 1 or self.size < 4 or self.size % 4:
            raise ValueError("per_class >= 1 and size a positive multiple of 4 required")


def _stroke(size: int, rng: np.random.Generator) -> np.ndarray:
    canvas = np.zeros((size, size))
    p0 = rng.uniform(2, size - 3, 2)
    p1 = rng.uniform(2, size - 3, 2)
    for t in np.linspace(0.0, 1.0, 4 * size):
        r, c = np.rint(p0 + t * (p1 - p0)).astype(int)
        canvas[r, c] = 1.0
    return ndimage.gaussian_filter(canvas, 0.7) * 2.5


def synth_dataset(spec: SynthSpec = SynthSpec(), seed: int = 0, name: str = "synth") -> LabeledDataset:
    """Class-conditional stroke images with per-sample warps and noise.

    Each class is a fixed combination of strokes drawn from a shared pool, so
    classes overlap partially; samples get random rotation, shift, elastic
    displacement, distractor strokes and pixel noise.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    S = spec.size
    pool = [_stroke(S, rng) for _ in range(spec.stroke_pool)]
    templates = []
    for _ in range(spec.num_classes):
        pick = rng.choice(spec.stroke_pool, spec.strokes_per_class, replace=False)
        templates.append(np.clip(sum(pool[i] for i in pick), 0.0, 1.0))

    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    ctr = (S - 1) / 2.0
    n = spec.num_classes * spec.per_class
    images = np.empty((n, S, S, spec.channels))
    labels = np.repeat(np.arange(spec.num_classes), spec.per_class)
    for k in range(n):
        img = templates[labels[k]]
        for _ in range(rng.integers(0, spec.distractors + 1)):
            img = img + 0.7 * pool[rng.integers(spec.stroke_pool)]
        th = np.deg2rad(rng.uniform(-spec.jitter_rotate, spec.jitter_rotate))
        sh = rng.uniform(-spec.jitter_shift, spec.jitter_shift, 2)
        dy = ndimage.gaussian_filter(rng.normal(size=(S, S)), 2.0) * spec.elastic_alpha * 4
        dx = ndimage.gaussian_filter(rng.normal(size=(S, S)), 2.0) * spec.elastic_alpha * 4
        cy, cx = yy - ctr - sh[0], xx - ctr - sh[1]
        src_y = np.cos(th) * cy - np.sin(th) * cx + ctr + dy
        src_x = np.sin(th) * cy + np.cos(th) * cx + ctr + dx
        warped = ndimage.map_coordinates(img, [src_y, src_x], order=1, mode="constant")
        warped = warped * rng.uniform(0.6, 1.0) + rng.normal(0.0, spec.pixel_noise, (S, S))
        for ch in range(spec.channels):
            images[k, :, :, ch] = warped
    images = np.clip(images, 0.0, 1.0)
    order = rng.permutation(n)
    return LabeledDataset(images[order], labels[order], spec.num_classes, name)


# -- IDX ---------------------------------------------------------------------

_IDX_UBYTE = 0x08


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: file too short for IDX header")
    zero, dtype, ndim = struct.unpack_from(">HBB", raw, 0)
    if zero != 0 or dtype != _IDX_UBYTE or ndim < 1:
        raise IdxFormatError(f"{path}: bad IDX magic 0x{struct.unpack_from('>I', raw, 0)[0]:08x}")
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    body = raw[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)):
        raise IdxFormatError(f"{path}: expected {int(np.prod(dims))} data bytes for dims {dims}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def _write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=np.uint8)
    header = struct.pack(">HBB", 0, _IDX_UBYTE, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def load_idx_dataset(images_path, labels_path, num_classes: Optional[int] = None,
                     name: str = "idx") -> LabeledDataset:
    """Read IDX image (magic 0x803 or 0x804) and label (0x801) files."""
    imgs = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if imgs.ndim not in (3, 4):
        raise IdxFormatError(f"{images_path}: image file must have 3 or 4 dims, got {imgs.ndim}")
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: label file must have 1 dim, got {labels.ndim}")
    if len(labels) != len(imgs):
        raise IdxFormatError(f"label count {len(labels)} != image count {len(imgs)}")
    if imgs.ndim == 3:
        imgs = imgs[..., None]
    k = num_classes if num_classes is not None else int(labels.max()) + 1 if len(labels) else 1
    return LabeledDataset(imgs.astype(np.float64) / 255.0, labels.astype(np.int64), k, name)


def export_idx_dataset(data: LabeledDataset, images_path, labels_path) -> None:
    imgs = np.rint(data.images * 255.0).astype(np.uint8)
    if imgs.shape[-1] == 1:
        imgs = imgs[..., 0]
    _write_idx(images_path, imgs)
    _write_idx(labels_path, data.labels.astype(np.uint8))


# -- splits ------------------------------------------------------------------

@dataclass
class SplitPlan:
    target_train: np.ndarray
    surrogate_train: np.ndarray
    eval_members: np.ndarray
    eval_nonmembers: np.ndarray
    calibration: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    holdout: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def check(self) -> None:
        tt, st = set(self.target_train.tolist()), set(self.surrogate_train.tolist())
        em, en = set(self.eval_members.tolist()), set(self.eval_nonmembers.tolist())
        cal = set(self.calibration.tolist())
        if tt & st:
            raise AssertionError("target-train and surrogate-train overlap")
        if not em <= tt:
            raise AssertionError("eval members not contained in target-train")
        if en & tt:
            raise AssertionError("eval non-members intersect target-train")
        if len(em) != len(en):
            raise AssertionError("eval panel unbalanced")
        if cal & (tt | en | em):
            raise AssertionError("calibration set overlaps target-train or eval panel")

    def to_json(self) -> str:
        return json.dumps({k: v.tolist() for k, v in asdict(self).items()}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        raw = json.loads(text)
        return cls(**{k: np.asarray(v, dtype=np.int64) for k, v in raw.items()})


DEFAULT_SPLIT = {"target_train": 1000, "surrogate_train": 1000, "eval_members": 200,
                 "eval_nonmembers": 200, "calibration": 200}


def make_split(n_samples: int, sizes: Optional[Dict[str, int]] = None, seed: int = 0) -> SplitPlan:
    """Disjoint target/surrogate training sets plus a balanced eval panel.

    Members come from the target training set; non-members and the
    calibration set come from samples used by neither training set.
    Whatever unused samples remain form the holdout.
    """
    sz = dict(DEFAULT_SPLIT)
    sz.update(sizes or {})
    if sz["eval_members"] != sz["eval_nonmembers"]:
        raise ValueError("eval_members and eval_nonmembers must be equal")
    if any(v < 0 for v in sz.values()):
        raise ValueError("split sizes must be non-negative")
    if sz["eval_members"] > sz["target_train"]:
        raise ValueError("eval_members cannot exceed target_train")
    needed = sz["target_train"] + sz["surrogate_train"] + sz["eval_nonmembers"] + sz["calibration"]
    if needed > n_samples:
        raise ValueError(f"split sizes need {needed} samples but dataset has {n_samples}")
    rng = np.random.default_rng([seed, 0x5B117])
    perm = rng.permutation(n_samples)
    a = sz["target_train"]
    b = a + sz["surrogate_train"]
    target, surrogate, unused = perm[:a], perm[a:b], perm[b:]
    members = rng.choice(target, sz["eval_members"], replace=False)
    nonm = unused[:sz["eval_nonmembers"]]
    cal = unused[sz["eval_nonmembers"]:sz["eval_nonmembers"] + sz["calibration"]]
    rest = unused[sz["eval_nonmembers"] + sz["calibration"]:]
    plan = SplitPlan(np.sort(target), np.sort(surrogate), np.sort(members), np.sort(nonm),
                     np.sort(cal), np.sort(rest))
    plan.check()
    return plan


# -- augmentation ------------------------------------------------------------

def rotate(x: np.ndarray, degrees: float) -> np.ndarray:
    """Nearest-neighbour rotation about the image centre, zero fill."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[:2]
    th = np.deg2rad(degrees)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    c, s = np.cos(th), np.sin(th)
    sy = np.rint(c * (yy - cy) - s * (xx - cx) + cy).astype(int)
    sx = np.rint(s * (yy - cy) + c * (xx - cx) + cx).astype(int)
    ok = (sy >= 0) & (sy < H) & (sx >= 0) & (sx < W)
    out = np.zeros_like(x)
    out[ok] = x[sy[ok], sx[ok]]
    return np.clip(out, 0.0, 1.0)


def translate(x: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Shift right by ``dx`` columns and down by ``dy`` rows, zero fill."""
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[:2]
    if abs(dx) >= W or abs(dy) >= H:
        raise ValueError("translation must be smaller than the image size")
    out = np.zeros_like(x)
    out[max(dy, 0):H + min(dy, 0), max(dx, 0):W + min(dx, 0)] = \
        x[max(-dy, 0):H - max(dy, 0), max(-dx, 0):W - max(dx, 0)]
    return np.clip(out, 0.0, 1.0)


def augment(x: np.ndarray, kind: str, value) -> np.ndarray:
    if kind == "rotate":
        return rotate(x, float(value))
    if kind == "translate":
        dx, dy = value
        return translate(x, int(dx), int(dy))
    raise ValueError(f"unknown augmentation {kind!r}")
