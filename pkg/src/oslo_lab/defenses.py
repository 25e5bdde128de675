"""Defended target training: L1/L2 decay, dropout, DP-SGD and PGD adversarial training."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import models as M
from . import tensor as T
from .data import LabeledDataset

DEFENSE_GRIDS: Dict[str, Tuple[float, ...]] = {
    "l2": (0.01, 0.005, 0.001),
    "l1": (5e-6, 1e-5, 5e-5),
    "dropout": (0.3, 0.5, 0.7),
    "dpsgd": (0.005, 0.01, 0.05),
    "adv-train": (4 / 255,),
}
DPSGD_CLIP = 1.2


@dataclass(frozen=True)
class PgdConfig:
    eps: float = 4 / 255
    steps: int = 7
    alpha: Optional[float] = None  # defaults to eps / 4

    def __post_init__(self):
        if not 0 <= self.eps <= 1:
            raise ValueError("pgd eps must be in [0, 1]")
        if self.steps < 1:
            raise ValueError("pgd steps must be >= 1")

    @property
    def step_size(self) -> float:
        return self.eps / 4 if self.alpha is None else self.alpha


@dataclass(frozen=True)
class DefenseConfig:
    """One defended configuration; ``param`` is the strength for the given kind.

    l2/l1: decay coefficient; dropout: rate; dpsgd: noise multiplier (clip
    bound ``clip``); adv-train: PGD epsilon.
    """
    kind: str
    param: float
    clip: float = DPSGD_CLIP
    pgd_steps: int = 7

    def __post_init__(self):
        if self.kind not in DEFENSE_GRIDS and self.kind != "none":
            raise ValueError(f"unknown defense {self.kind!r}; choose from {sorted(DEFENSE_GRIDS)}")
        if self.param < 0:
            raise ValueError("defense strength must be >= 0")
        if self.kind == "dropout" and not self.param < 1:
            raise ValueError("dropout rate must be in [0, 1)")
        if self.kind == "dpsgd" and self.clip <= 0:
            raise ValueError("clip bound must be > 0")

    @classmethod
    def grid(cls, kind: str) -> List["DefenseConfig"]:
        return [cls(kind, v) for v in DEFENSE_GRIDS[kind]]


@dataclass
class DefendedModel:
    model: M.ModelHandle
    config: DefenseConfig
    test_acc: float
    train_acc: float
    clip_norms: Optional[np.ndarray] = None


def per_example_grads(arch: M.ArchSpec, params: Dict[str, np.ndarray], xb, yb,
                      rng=None) -> Tuple[float, Dict[str, np.ndarray]]:
    """Summed loss and ``{name: (B, *shape)}`` per-example parameter gradients."""
    names = list(params)
    pt = {k: T.Tensor(params[k], requires_grad=True) for k in names}
    with T.per_example_grads():
        loss = T.tsum(T.cross_entropy(M.forward(arch, pt, T.Tensor(xb), rng), yb, reduction="none"))
        gs = T.grad(loss, [pt[k] for k in names])
    B = len(xb)
    out = {}
    for k, g in zip(names, gs):
        out[k] = g if g.shape == (B,) + params[k].shape else np.broadcast_to(g, (B,) + params[k].shape).copy()
    return float(loss.data), out


def clip_per_example(grads: Dict[str, np.ndarray], clip: float) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Scale each example's full gradient by ``min(1, clip / ||g||_2)``.

    Returns the clipped gradients and their post-clip norms, which never
    exceed ``clip`` (a factor that rounds above it is nudged down one ulp at a
    time).
    """
    if clip <= 0:
        raise ValueError("clip bound must be > 0")
    names = list(grads)
    B = grads[names[0]].shape[0]
    flat = np.concatenate([grads[k].reshape(B, -1) for k in names], axis=1)
    norms = np.sqrt(np.einsum("bi,bi->b", flat, flat))
    factor = np.minimum(1.0, clip / np.maximum(norms, 1e-300))
    clipped = flat * factor[:, None]
    post = np.sqrt(np.einsum("bi,bi->b", clipped, clipped))
    while np.any(post > clip):
        bad = post > clip
        factor[bad] = np.nextafter(factor[bad], 0.0)
        clipped[bad] = flat[bad] * factor[bad, None]
        post[bad] = np.sqrt(np.einsum("bi,bi->b", clipped[bad], clipped[bad]))
    out, pos = {}, 0
    for k in names:
        size = int(np.prod(grads[k].shape[1:]))
        out[k] = clipped[:, pos:pos + size].reshape(grads[k].shape)
        pos += size
    return out, post


def dpsgd_step(per_example: Dict[str, np.ndarray], clip: float, noise_multiplier: float,
               seed) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Clip, sum, add N(0, (noise_multiplier * clip)^2) noise, divide by batch size.

    Returns the averaged noisy update and the post-clip per-example norms.
    """
    if noise_multiplier < 0:
        raise ValueError("noise multiplier must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    clipped, norms = clip_per_example(per_example, clip)
    B = len(norms)
    update = {}
    for k, g in clipped.items():
        total = g.sum(axis=0)
        if noise_multiplier > 0:
            total = total + rng.normal(0.0, noise_multiplier * clip, size=total.shape)
        update[k] = total / B
    return update, norms


def pgd_examples(arch: M.ArchSpec, params: Dict[str, np.ndarray], xb: np.ndarray, yb: np.ndarray,
                 cfg: PgdConfig) -> np.ndarray:
    """Untargeted L-inf PGD from the clean batch: sign steps, projection onto the eps-ball and [0, 1]."""
    xb = np.asarray(xb, dtype=np.float64)
    if cfg.eps == 0:
        return xb.copy()
    pt = {k: T.Tensor(v) for k, v in params.items()}
    x = xb.copy()
    for _ in range(cfg.steps):
        xt = T.Tensor(x, requires_grad=True)
        loss = T.tsum(T.cross_entropy(M.forward(arch, pt, xt), yb, reduction="none"))
        (g,) = T.grad(loss, [xt])
        x = x + cfg.step_size * np.sign(g)
        x = np.clip(np.clip(x, xb - cfg.eps, xb + cfg.eps), 0.0, 1.0)
    return x


def adv_train_batch(arch: M.ArchSpec, params: Dict[str, np.ndarray], xb, yb, rng,
                    cfg: PgdConfig = PgdConfig()) -> Tuple[float, Dict[str, np.ndarray]]:
    """Inner PGD maximisation, then the usual loss/gradient on the adversarial batch."""
    x_adv = pgd_examples(arch, params, xb, yb, cfg)
    return M.standard_batch_grad(arch, params, x_adv, yb, rng)


def batch_loss(arch: M.ArchSpec, params: Dict[str, np.ndarray], xb, yb) -> float:
    with T.no_grad():
        pt = {k: T.Tensor(v) for k, v in params.items()}
        return float(T.cross_entropy(M.forward(arch, pt, T.Tensor(xb)), yb).data)


def train_defended(
    arch: M.ArchSpec,
    data: LabeledDataset,
    train_cfg: M.TrainConfig,
    def_cfg: DefenseConfig,
    test_data: Optional[LabeledDataset] = None,
) -> DefendedModel:
    """Train a target with one defence applied; records accuracies and DP-SGD clip norms."""
    norms: List[np.ndarray] = []
    batch_grad = M.standard_batch_grad
    cfg = train_cfg
    kind = def_cfg.kind
    if kind == "l2":
        cfg = replace(cfg, weight_decay_l2=def_cfg.param)
    elif kind == "l1":
        cfg = replace(cfg, weight_decay_l1=def_cfg.param)
    elif kind == "dropout":
        arch = replace(arch, dropout=def_cfg.param)
    elif kind == "dpsgd":
        noise_rng = np.random.default_rng([cfg.seed, 0xD9])

        def batch_grad(a, params, xb, yb, rng):
            loss, pe = per_example_grads(a, params, xb, yb, rng)
            update, post = dpsgd_step(pe, def_cfg.clip, def_cfg.param, noise_rng)
            norms.append(post)
            return loss / len(xb), update
    elif kind == "adv-train":
        pgd = PgdConfig(eps=def_cfg.param, steps=def_cfg.pgd_steps)

        def batch_grad(a, params, xb, yb, rng):
            return adv_train_batch(a, params, xb, yb, rng, pgd)

    meta = {"defense": kind, "defense_param": def_cfg.param}
    model = M.train(arch, data, cfg, batch_grad=batch_grad, extra_meta=meta)
    test_acc = M.accuracy(model, test_data) if test_data is not None else float("nan")
    return DefendedModel(model, def_cfg, test_acc, M.accuracy(model, data),
                         np.concatenate(norms) if norms else None)


def robust_accuracy(model: M.ModelHandle, data: LabeledDataset, cfg: PgdConfig = PgdConfig()) -> float:
    x_adv = pgd_examples(model.arch, model.params, data.images, data.labels, cfg)
    return float(np.mean(M.predict_label(model, x_adv) == data.labels))


@dataclass
class DefenseRow:
    defense: str
    param: float
    test_acc: float
    tpr_at_1pct_fpr: float


def defense_csv(rows: List[DefenseRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["defense", "param", "test_acc", "tpr_at_1pct_fpr"])
    for r in rows:
        w.writerow([r.defense, repr(float(r.param)), repr(float(r.test_acc)), repr(float(r.tpr_at_1pct_fpr))])
    return buf.getvalue()
