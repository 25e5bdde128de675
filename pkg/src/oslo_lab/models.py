"""Desk-scale classifier zoo: architectures, training, inference, persistence."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from . import tensor as T
from .data import LabeledDataset

FAMILIES = ("mlp", "cnn-a", "cnn-b", "cnn-c", "cnn-d")

MODEL_MAGIC = b"OSLOMDL\x00"
MODEL_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    family: str
    width: int = 1
    depth: int = 0
    dropout: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown architecture family {self.family!r}; choose from {FAMILIES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.width < 1 or self.depth < 0:
            raise ValueError("width must be >= 1 and depth >= 0")

    def effective_dropout(self) -> float:
        # cnn-c always carries a dropout head
        if self.family == "cnn-c" and self.dropout == 0.0:
            return 0.5
        return self.dropout


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    weight_decay_l2: float = 1e-6
    weight_decay_l1: float = 0.0
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd-momentum', got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.weight_decay_l2 < 0 or self.weight_decay_l1 < 0:
            raise ValueError("weight decay coefficients must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class ModelHandle:
    arch: ArchSpec
    params: Dict[str, np.ndarray]
    num_classes: int
    input_shape: Tuple[int, int, int]
    train_meta: dict = field(default_factory=dict)

    def weight_norm(self) -> float:
        return float(np.sqrt(sum(float((w * w).sum()) for k, w in self.params.items() if k.endswith(".w"))))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return h.hexdigest()


# -- architectures -----------------------------------------------------------

def _layer_plan(arch: ArchSpec, input_shape, num_classes) -> List[Tuple[str, tuple]]:
    """Parameter shapes in a fixed order; forward() walks the same names."""
    H, W, C = input_shape
    w = arch.width
    fam = arch.family
    plan: List[Tuple[str, tuple]] = []

    def conv(name, cin, cout):
        plan.append((f"{name}.w", (3, 3, cin, cout)))
        plan.append((f"{name}.b", (cout,)))

    def fc(name, nin, nout):
        plan.append((f"{name}.w", (nin, nout)))
        plan.append((f"{name}.b", (nout,)))

    if fam == "mlp":
        hidden = [128 * w, 64 * w] + [64 * w] * arch.depth
        nin = H * W * C
        for i, h in enumerate(hidden):
            fc(f"fc{i}", nin, h)
            nin = h
        fc("out", nin, num_classes)
    elif fam == "cnn-a":
        conv("conv0", C, 8 * w)
        conv("conv1", 8 * w, 16 * w)
        fc("fc0", (H // 4) * (W // 4) * 16 * w, 128 * w)
        fc("out", 128 * w, num_classes)
    elif fam == "cnn-b":
        conv("conv0", C, 8 * w)
        conv("conv1", 8 * w, 16 * w)
        conv("conv2", 16 * w, 24 * w)
        fc("out", (H // 4) * (W // 4) * 24 * w, num_classes)
    elif fam == "cnn-c":
        conv("conv0", C, 8 * w)
        conv("conv1", 8 * w, 12 * w)
        conv("conv2", 12 * w, 12 * w)
        fc("fc0", (H // 4) * (W // 4) * 12 * w, 128 * w)
        fc("out", 128 * w, num_classes)
    elif fam == "cnn-d":
        conv("conv0", C, 8 * w)
        conv("conv1", 8 * w, 24 * w)
        fc("fc0", 24 * w, 64 * w)
        fc("out", 64 * w, num_classes)
    return plan


def init_params(arch: ArchSpec, input_shape, num_classes, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    params = {}
    for name, shape in _layer_plan(arch, input_shape, num_classes):
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


def forward(
    arch: ArchSpec,
    params: Dict[str, T.Tensor],
    x: T.Tensor,
    rng: Optional[np.random.Generator] = None,
) -> T.Tensor:
    """Logits for a NHWC batch. ``rng`` enables dropout (training only)."""
    p = params
    fam = arch.family
    rate = arch.effective_dropout()

    def conv(h, name):
        return T.relu(T.conv2d(h, p[f"{name}.w"], padding=1) + p[f"{name}.b"])

    def fc(h, name):
        return T.matmul(h, p[f"{name}.w"]) + p[f"{name}.b"]

    def flat(h):
        return T.reshape(h, (h.shape[0], -1))

    if fam == "mlp":
        h = flat(x)
        i = 0
        while f"fc{i}.w" in p:
            h = T.dropout(T.relu(fc(h, f"fc{i}")), rate, rng)
            i += 1
        return fc(h, "out")
    if fam == "cnn-a":
        h = T.maxpool2(conv(x, "conv0"))
        h = T.maxpool2(conv(h, "conv1"))
        h = T.dropout(T.relu(fc(flat(h), "fc0")), rate, rng)
        return fc(h, "out")
    if fam == "cnn-b":
        h = T.maxpool2(conv(x, "conv0"))
        h = T.maxpool2(conv(h, "conv1"))
        h = T.dropout(conv(h, "conv2"), rate, rng)
        return fc(flat(h), "out")
    if fam == "cnn-c":
        h = T.maxpool2(conv(x, "conv0"))
        h = conv(h, "conv1")
        h = T.maxpool2(conv(h, "conv2"))
        h = T.dropout(T.relu(fc(flat(h), "fc0")), rate, rng)
        return fc(h, "out")
    if fam == "cnn-d":
        h = T.maxpool2(conv(x, "conv0"))
        h = T.mean(T.maxpool2(conv(h, "conv1")), axis=(1, 2))
        h = T.dropout(T.relu(fc(h, "fc0")), rate, rng)
        return fc(h, "out")
    raise ValueError(fam)


def _const_params(m: ModelHandle) -> Dict[str, T.Tensor]:
    return {k: T.Tensor(v) for k, v in m.params.items()}


def _as_batch(m: ModelHandle, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != tuple(m.input_shape):
        raise T.ShapeError(f"input shape {x.shape[1:] if x.ndim == 4 else x.shape} != model input {tuple(m.input_shape)}")
    return x, single


def logits(m: ModelHandle, x) -> np.ndarray:
    """Inference logits; (C,) for one image, (B, C) for a batch."""
    xb, single = _as_batch(m, x)
    with T.no_grad():
        out = forward(m.arch, _const_params(m), T.Tensor(xb)).data
    return out[0] if single else out


def probabilities(m: ModelHandle, x) -> np.ndarray:
    """Softmax of the logits, same shape conventions as ``logits``."""
    return special.softmax(logits(m, x), axis=-1)


def predict_label(m: ModelHandle, x):
    z = logits(m, x)
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(z)) if z.ndim == 1 else np.argmax(z, axis=1)


def accuracy(m: ModelHandle, data: LabeledDataset, batch: int = 500) -> float:
    if len(data) == 0:
        return float("nan")
    correct = 0
    for s in range(0, len(data), batch):
        correct += int((predict_label(m, data.images[s:s + batch]) == data.labels[s:s + batch]).sum())
    return correct / len(data)


def input_grad(models: Sequence[ModelHandle], x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of the per-model-mean summed cross-entropy w.r.t. a NHWC batch.

    Returns (gradient, per-sample loss). Each sample's gradient is its own
    loss gradient because samples do not interact.
    """
    if not models:
        raise ValueError("empty model ensemble")
    xt = T.Tensor(x, requires_grad=True)
    total = None
    per_sample = np.zeros(x.shape[0])
    for m in models:
        z = forward(m.arch, _const_params(m), xt)
        l = T.cross_entropy(z, y, reduction="none")
        per_sample += l.data
        s = T.tsum(l)
        total = s if total is None else total + s
    total = total * (1.0 / len(models))
    (g,) = T.grad(total, [xt])
    return g, per_sample / len(models)


# -- training ----------------------------------------------------------------

BatchGradFn = Callable[[ArchSpec, Dict[str, np.ndarray], np.ndarray, np.ndarray, np.random.Generator],
                       Tuple[float, Dict[str, np.ndarray]]]


def standard_batch_grad(arch, params, xb, yb, rng):
    """Mean cross-entropy loss and parameter gradients on one minibatch."""
    pt = {k: T.Tensor(v, requires_grad=True) for k, v in params.items()}
    loss = T.cross_entropy(forward(arch, pt, T.Tensor(xb), rng=rng), yb)
    grads = T.grad(loss, [pt[k] for k in params])
    return loss.item(), dict(zip(params, grads))


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: Dict[str, np.ndarray]):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        cfg = self.cfg
        self.t += 1
        for k in params:
            g = grads[k]
            if k.endswith(".w"):
                if cfg.weight_decay_l2:
                    g = g + cfg.weight_decay_l2 * params[k]
                if cfg.weight_decay_l1:
                    g = g + cfg.weight_decay_l1 * np.sign(params[k])
            if cfg.optimizer == "adam":
                b1, b2 = 0.9, 0.999
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                mh = self.m[k] / (1 - b1 ** self.t)
                vh = self.v[k] / (1 - b2 ** self.t)
                params[k] = params[k] - cfg.learning_rate * mh / (np.sqrt(vh) + 1e-8)
            else:
                self.m[k] = cfg.momentum * self.m[k] + g
                params[k] = params[k] - cfg.learning_rate * self.m[k]


def train(
    arch: ArchSpec,
    data: LabeledDataset,
    cfg: TrainConfig,
    batch_grad: BatchGradFn = standard_batch_grad,
    extra_meta: Optional[dict] = None,
) -> ModelHandle:
    """Minibatch training; bit-reproducible for fixed (arch, data, cfg)."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if data.labels.min() < 0 or data.labels.max() >= data.num_classes:
        raise ValueError("labels out of range for dataset num_classes")
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    input_shape = tuple(data.images.shape[1:])
    params = init_params(arch, input_shape, data.num_classes, rng)
    opt = _Optimizer(cfg, params)
    losses: List[float] = []
    n = len(data)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = batch_grad(arch, params, data.images[idx], data.labels[idx], rng)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss/gradient at epoch {epoch}, batch offset {s} (loss={loss})")
            opt.step(params, grads)
            total += loss * len(idx)
        losses.append(total / n)
    meta = {
        "optimizer": cfg.optimizer,
        "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "weight_decay_l2": cfg.weight_decay_l2,
        "weight_decay_l1": cfg.weight_decay_l1,
        "losses": losses,
    }
    meta.update(extra_meta or {})
    return ModelHandle(arch=arch, params=params, num_classes=data.num_classes,
                       input_shape=input_shape, train_meta=meta)


# -- persistence -------------------------------------------------------------

def _pack_model(m: ModelHandle, version: int = MODEL_VERSION) -> bytes:
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", version))
    desc = json.dumps({"arch": asdict(m.arch), "input_shape": list(m.input_shape),
                       "train_meta": m.train_meta}, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(desc)))
    buf.write(desc)
    buf.write(struct.pack("<II", m.num_classes, len(m.params)))
    for name in sorted(m.params):
        arr = np.ascontiguousarray(m.params[name], dtype="<f8")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save(m: ModelHandle, path) -> None:
    Path(path).write_bytes(_pack_model(m))


def load(path) -> ModelHandle:
    raw = Path(path).read_bytes()
    if len(raw) < len(MODEL_MAGIC) + 4 + 32 or raw[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic or truncated)")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError(f"{path}: checksum mismatch (corrupt or truncated file)")
    pos = len(MODEL_MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: model file version {version}, expected version {MODEL_VERSION}")
    (dlen,) = take("<I")
    desc = json.loads(body[pos:pos + dlen])
    pos += dlen
    num_classes, count = take("<II")
    params = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) * 8
        params[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=pos).reshape(shape).astype(np.float64)
        pos += size
    return ModelHandle(arch=ArchSpec(**desc["arch"]), params=params, num_classes=num_classes,
                       input_shape=tuple(desc["input_shape"]), train_meta=desc["train_meta"])
