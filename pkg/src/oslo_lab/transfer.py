"""Gradient update rules for transfer attacks: I-FGSM with MI, DI, TI and Admix.

All functions accept either one NHWC image ``(H, W, C)`` or a batch
``(B, H, W, C)``; norms and random transforms are always per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import tensor as T
from .models import ModelHandle, forward

METHODS = frozenset({"MI", "DI", "TI", "Admix"})


@dataclass(frozen=True)
class TransferMethodParams:
    methods: FrozenSet[str] = frozenset()
    momentum_decay: float = 1.0
    di_prob: float = 0.5
    di_min_scale: float = 0.9
    ti_radius: int = 3
    admix_strength: float = 0.2
    admix_count: int = 3

    def __post_init__(self):
        object.__setattr__(self, "methods", frozenset(self.methods))
        unknown = self.methods - METHODS
        if unknown:
            raise ValueError(f"unknown transfer methods {sorted(unknown)}; choose from {sorted(METHODS)}")
        if self.momentum_decay < 0:
            raise ValueError("momentum_decay must be >= 0")
        if not 0.0 <= self.di_prob <= 1.0:
            raise ValueError("di_prob must be in [0, 1]")
        if not 0.0 < self.di_min_scale <= 1.0:
            raise ValueError("di_min_scale must be in (0, 1]")
        if self.ti_radius < 0:
            raise ValueError("ti_radius must be >= 0")
        if self.admix_strength < 0 or self.admix_count < 1:
            raise ValueError("admix_strength must be >= 0 and admix_count >= 1")

    @classmethod
    def from_name(cls, name: str, **kwargs) -> "TransferMethodParams":
        """Parse short names: 'ifgsm', 'MI', 'TDMI', 'TMDAI', 'DI+TI', ..."""
        key = name.strip()
        if key.lower() in ("", "ifgsm", "i-fgsm", "none"):
            return cls(methods=frozenset(), **kwargs)
        combos = {"TDMI": {"TI", "DI", "MI"}, "TMDAI": {"TI", "MI", "DI", "Admix"}}
        if key.upper() in combos:
            return cls(methods=frozenset(combos[key.upper()]), **kwargs)
        canon = {m.upper(): m for m in METHODS}
        parts = [p.strip().upper() for p in key.replace(",", "+").split("+") if p.strip()]
        unknown = [p for p in parts if p not in canon]
        if unknown:
            raise ValueError(f"unknown transfer method(s) {unknown} in {name!r}")
        return cls(methods=frozenset(canon[p] for p in parts), **kwargs)


@dataclass
class SourceEnsemble:
    models: List[ModelHandle]

    def __post_init__(self):
        if not self.models:
            raise ValueError("source ensemble must contain at least one model")
        shapes = {tuple(m.input_shape) for m in self.models}
        classes = {m.num_classes for m in self.models}
        if len(shapes) != 1 or len(classes) != 1:
            raise ValueError("all ensemble models must share input shape and class count")

    @property
    def num_classes(self) -> int:
        return self.models[0].num_classes


@dataclass
class AttackState:
    x_current: np.ndarray
    momentum: np.ndarray
    origin: np.ndarray
    label: np.ndarray

    @classmethod
    def start(cls, x, y) -> "AttackState":
        x = np.asarray(x, dtype=np.float64)
        return cls(x.copy(), np.zeros_like(x), x.copy(), np.asarray(y))


def _batched(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 3 else (x, False)


def mi_accumulate(momentum: np.ndarray, g: np.ndarray, decay: float) -> np.ndarray:
    """``decay * momentum + g / max(||g||_1, 1e-12)`` per sample."""
    mb, single = _batched(momentum)
    gb, _ = _batched(g)
    if mb.shape != gb.shape:
        raise T.ShapeError(f"momentum {mb.shape} and gradient {gb.shape} differ")
    norms = np.abs(gb).reshape(len(gb), -1).sum(axis=1)
    out = decay * mb + gb / np.maximum(norms, 1e-12)[:, None, None, None]
    return out[0] if single else out


def di_index(shape, p: float, rng: np.random.Generator, min_scale: float = 0.9) -> Optional[np.ndarray]:
    """Gather map for one random resize-and-pad, or None for identity.

    Always consumes the same number of draws from ``rng`` so per-sample
    streams stay aligned whether or not the transform fires.
    """
    H, W, C = shape
    u = rng.random()
    lo = int(np.ceil(min_scale * W))
    s = int(rng.integers(lo, W + 1))
    top = int(rng.integers(0, W - s + 1))
    left = int(rng.integers(0, W - s + 1))
    if u >= p:
        return None
    sh = max(1, int(round(s * H / W)))
    top = min(top, H - sh)
    rows = np.arange(H) - top
    cols = np.arange(W) - left
    src_r = np.floor(rows * H / sh).astype(int)
    src_c = np.floor(cols * W / s).astype(int)
    inside = ((rows >= 0) & (rows < sh))[:, None] & ((cols >= 0) & (cols < s))[None, :]
    base = (np.clip(src_r, 0, H - 1)[:, None] * W + np.clip(src_c, 0, W - 1)[None, :]) * C
    idx = base[:, :, None] + np.arange(C)[None, None, :]
    return np.where(inside[:, :, None], idx, -1)


def di_transform(x: np.ndarray, p: float, seed, min_scale: float = 0.9) -> np.ndarray:
    """Random shrink to s in [min_scale*W, W] then zero-pad back at a random offset."""
    xb, single = _batched(x)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.empty_like(xb)
    for b in range(len(xb)):
        idx = di_index(xb.shape[1:], p, rng, min_scale)
        if idx is None:
            out[b] = xb[b]
        else:
            flat = xb[b].reshape(-1)
            out[b] = np.where(idx >= 0, flat[np.maximum(idx, 0)], 0.0)
    return out[0] if single else out


def _batch_di_index(shape, rngs: Sequence[np.random.Generator], p: float, min_scale: float) -> np.ndarray:
    B, H, W, C = shape
    per = H * W * C
    index = np.empty((B, H, W, C), dtype=np.int64)
    for b, rng in enumerate(rngs):
        idx = di_index((H, W, C), p, rng, min_scale)
        if idx is None:
            idx = np.arange(per).reshape(H, W, C)
        index[b] = np.where(idx >= 0, idx + b * per, -1)
    return index


def _gaussian_kernel1d(radius: int) -> np.ndarray:
    sigma = radius / np.sqrt(3.0)
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def ti_smooth(g: np.ndarray, radius: int) -> np.ndarray:
    """Convolve each channel with a normalised Gaussian (sigma = radius/sqrt(3)), zero padding."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    gb, single = _batched(g)
    if radius == 0:
        out = gb.copy()
    else:
        k = _gaussian_kernel1d(radius)
        out = ndimage.correlate1d(gb, k, axis=1, mode="constant", cval=0.0)
        out = ndimage.correlate1d(out, k, axis=2, mode="constant", cval=0.0)
    return out[0] if single else out


def admix_mix(x: np.ndarray, others: Sequence[np.ndarray], strength: float) -> List[np.ndarray]:
    """``clip(x + strength * other, 0, 1)`` for each image drawn from another class."""
    if strength < 0:
        raise ValueError("admix strength must be >= 0")
    if len(others) == 0:
        raise ValueError("admix needs at least one image from another class")
    x = np.asarray(x, dtype=np.float64)
    return [np.clip(x + strength * np.asarray(o, dtype=np.float64), 0.0, 1.0) for o in others]


class AdmixPool:
    """Attacker-side image pool used to draw other-class mixing partners."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.images) == 0:
            raise ValueError("admix pool is empty")

    def draw(self, y: int, count: int, rng: np.random.Generator) -> np.ndarray:
        cand = np.flatnonzero(self.labels != y)
        if len(cand) == 0:
            raise ValueError(f"admix pool has no images outside class {y}")
        return self.images[cand[rng.integers(0, len(cand), size=count)]]


def ensemble_loss_grad(
    ens: SourceEnsemble,
    x: np.ndarray,
    y,
    params: TransferMethodParams = TransferMethodParams(),
    rngs: Optional[Sequence[np.random.Generator]] = None,
    admix_pool: Optional[AdmixPool] = None,
) -> np.ndarray:
    """Gradient of the mean cross-entropy over source models w.r.t. the input.

    DI and Admix transform the forward pass; with Admix the loss is also
    averaged over the mixed copies. ``rngs`` holds one generator per sample.
    """
    if not isinstance(ens, SourceEnsemble):
        ens = SourceEnsemble(list(ens))
    xb, single = _batched(x)
    yb = np.atleast_1d(np.asarray(y, dtype=np.int64))
    B = len(xb)
    use_di = "DI" in params.methods
    use_admix = "Admix" in params.methods
    if (use_di or use_admix) and rngs is None:
        rngs = [np.random.default_rng([0, b]) for b in range(B)]
    if use_admix:
        if admix_pool is None:
            raise ValueError("Admix enabled but no admix pool given")
        partners = np.stack([admix_pool.draw(int(yb[b]), params.admix_count, rngs[b]) for b in range(B)], axis=1)
        copies = params.admix_count
    else:
        copies = 1

    xt = T.Tensor(xb, requires_grad=True)
    total = None
    for c in range(copies):
        xin = T.clamp(xt + params.admix_strength * partners[c], 0.0, 1.0) if use_admix else xt
        if use_di:
            xin = T.gather(xin, _batch_di_index(xb.shape, rngs, params.di_prob, params.di_min_scale), xb.shape)
        for m in ens.models:
            pt = {k: T.Tensor(v) for k, v in m.params.items()}
            loss = T.tsum(T.cross_entropy(forward(m.arch, pt, xin), yb, reduction="none"))
            total = loss if total is None else total + loss
    total = total * (1.0 / (copies * len(ens.models)))
    (g,) = T.grad(total, [xt])
    return g[0] if single else g


def fgsm_step(state: AttackState, g_effective: np.ndarray, alpha: float) -> np.ndarray:
    """One signed ascent step from ``state.x_current``, clamped to [0, 1]."""
    if alpha <= 0:
        raise ValueError("step size must be > 0")
    return np.clip(state.x_current + alpha * np.sign(g_effective), 0.0, 1.0)


def effective_gradient(
    ens: SourceEnsemble,
    state: AttackState,
    params: TransferMethodParams,
    rngs=None,
    admix_pool: Optional[AdmixPool] = None,
) -> np.ndarray:
    """Ensemble gradient with TI smoothing, then MI accumulation (updates state.momentum)."""
    g = ensemble_loss_grad(ens, state.x_current, state.label, params, rngs, admix_pool)
    if "TI" in params.methods:
        g = ti_smooth(g, params.ti_radius)
    if "MI" in params.methods:
        state.momentum = mi_accumulate(state.momentum, g, params.momentum_decay)
        return state.momentum
    return g
