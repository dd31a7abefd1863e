"""Training regimen: cross-entropy, Adam with L2 decay, plateau schedule,
early stopping, affine augmentation and the epoch loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .core import RngStream
from .data import Dataset, DatasetSplit
from .errors import DataError, NumericOverflowError, ParameterError
from .model import Model

log = logging.getLogger(__name__)


def cross_entropy(probs: np.ndarray, labels: np.ndarray, floor: float = 1e-12):
    """Mean negative log-likelihood and its gradient w.r.t. the pre-softmax logits."""
    labels = np.asarray(labels, dtype=np.int64)
    B, C = probs.shape
    bad = np.flatnonzero((labels < 0) | (labels >= C))
    if bad.size:
        raise DataError(f"row {bad[0]}: label {labels[bad[0]]} outside [0, {C})")
    picked = probs[np.arange(B), labels].astype(np.float64)
    loss = float(-np.mean(np.log(np.maximum(picked, floor)))) if B else 0.0
    d = probs.copy()
    d[np.arange(B), labels] -= 1
    return loss, d / max(B, 1)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(opt: Adam, params: dict, grads: dict, decay=(), nonneg=()):
    """One in-place Adam update with bias correction.

    L2 decay ``weight_decay * w`` is added to the gradient of names in
    ``decay`` only; names in ``nonneg`` are clamped to >= 0 afterwards.
    """
    opt.t += 1
    c1 = 1 - opt.beta1**opt.t
    c2 = 1 - opt.beta2**opt.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ParameterError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NumericOverflowError(f"non-finite gradient for parameter {name}")
        if opt.weight_decay and name in decay:
            g = g + opt.weight_decay * p
        if name not in opt.m:
            opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        m, v = opt.m[name], opt.v[name]
        m[...] = opt.beta1 * m + (1 - opt.beta1) * g
        v[...] = opt.beta2 * v + (1 - opt.beta2) * g * g
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        if name in nonneg:
            np.maximum(p, 0, out=p)


def model_step(opt: Adam, model: Model, grads: dict):
    params, decay, nonneg = {}, set(), set()
    for name, layer, key in model.named_params():
        params[name] = layer.params[key]
        if key in layer.decayed:
            decay.add(name)
        if key in layer.nonneg:
            nonneg.add(name)
    adam_step(opt, params, grads, decay, nonneg)


@dataclass
class ScheduleState:
    """Plateau decay and early stopping on validation accuracy.

    The learning rate decays after ``lr_patience`` epochs without any
    increase; training stops after ``stop_patience`` epochs without an
    increase larger than ``min_delta``. Both compare against the best value
    seen so far, which is updated on every increase.
    """

    lr_patience: int = 10
    stop_patience: int = 20
    decay_factor: float = 0.63
    min_delta: float = 0.01
    lr_floor: float = 5e-5
    best_val_acc: float = -math.inf
    epochs_since_improve_lr: int = 0
    epochs_since_improve_stop: int = 0


def schedule_update(sched: ScheduleState, lr: float, val_acc: float):
    """Advance the counters by one epoch; returns ``(new_lr, stop)``."""
    if val_acc > sched.best_val_acc:
        sched.epochs_since_improve_lr = 0
    else:
        sched.epochs_since_improve_lr += 1
    if val_acc > sched.best_val_acc + sched.min_delta:
        sched.epochs_since_improve_stop = 0
    else:
        sched.epochs_since_improve_stop += 1
    sched.best_val_acc = max(sched.best_val_acc, val_acc)
    if sched.epochs_since_improve_lr >= sched.lr_patience:
        lr = max(lr * sched.decay_factor, sched.lr_floor)
        sched.epochs_since_improve_lr = 0
    return lr, sched.epochs_since_improve_stop >= sched.stop_patience


@dataclass
class AugmentConfig:
    rotation_range_deg: float = 20.0
    shear_intensity: float = 0.2
    zoom_range: float = 0.2
    horizontal_flip: bool = True

    def __post_init__(self):
        if min(self.rotation_range_deg, self.shear_intensity, self.zoom_range) < 0:
            raise ParameterError("augmentation ranges must be non-negative")


def sample_affine(cfg: AugmentConfig, rng: RngStream):
    """Draw (theta_deg, shear, zoom, flip) in that order."""
    theta = rng.uniform(-cfg.rotation_range_deg, cfg.rotation_range_deg)
    shear = rng.uniform(-cfg.shear_intensity, cfg.shear_intensity)
    zoom = rng.uniform(1 - cfg.zoom_range, 1 + cfg.zoom_range)
    flip = bool(cfg.horizontal_flip and rng.random() < 0.5)
    return theta, shear, zoom, flip


def inverse_affine(theta_deg, shear, zoom, flip) -> np.ndarray:
    """Output->source map on centred (x, y) pixel coordinates, y pointing down.

    The forward transform is flip . zoom . shear . rotation; positive angles
    turn the picture counter-clockwise as displayed.
    """
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    rot_inv = np.array([[c, -s], [s, c]])
    shear_inv = np.array([[1.0, -shear], [0.0, 1.0]])
    flip_inv = np.diag([-1.0 if flip else 1.0, 1.0])
    return rot_inv @ shear_inv @ flip_inv / zoom


def warp(images: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Bilinear resampling with zero fill. images (N, C, H, W), inv (N, 2, 2)."""
    N, C, H, W = images.shape
    cy, cx = (H - 1) / 2, (W - 1) / 2
    yy, xx = np.meshgrid(np.arange(H) - cy, np.arange(W) - cx, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()])  # (2, HW)
    src = inv @ pts  # (N, 2, HW)
    sx, sy = src[:, 0] + cx, src[:, 1] + cy
    x0, y0 = np.floor(sx), np.floor(sy)
    fx, fy = sx - x0, sy - y0
    x0, y0 = x0.astype(np.int64), y0.astype(np.int64)
    n_idx = np.arange(N)[:, None]
    out = np.zeros((N, H * W, C), dtype=np.float64)
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                        (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + dy, x0 + dx
        ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        vals = images[n_idx, :, np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)]  # (N, HW, C)
        out += np.where(ok, wgt, 0.0)[..., None] * vals
    return out.transpose(0, 2, 1).reshape(N, C, H, W).astype(images.dtype)


def augment(image: np.ndarray, cfg: AugmentConfig, rng: RngStream) -> np.ndarray:
    return augment_batch(image[None], cfg, [rng])[0]


def augment_batch(images: np.ndarray, cfg: AugmentConfig, rngs) -> np.ndarray:
    inv = np.stack([inverse_affine(*sample_affine(cfg, r)) for r in rngs])
    if images.shape[2] == 1 and images.shape[3] == 1:
        return images.copy()  # every centred affine map fixes a single pixel
    return warp(images, inv)


@dataclass
class TrainParams:
    lr_init: float = 1e-3
    lr_floor: float = 5e-5
    decay_factor: float = 0.63
    lr_patience: int = 10
    stop_patience: int = 20
    min_delta: float = 0.01
    batch_size: int = 64
    max_epochs: int = 300
    weight_decay: float = 1e-4
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)

    def to_json(self) -> dict:
        d = asdict(self)
        d["augment"] = asdict(self.augment) if self.augment else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainParams":
        if not isinstance(d, dict):
            raise ParameterError("train params must be a JSON object")
        known = set(cls.__dataclass_fields__)
        if set(d) - known:
            raise ParameterError(f"unknown train param keys {sorted(set(d) - known)}")
        d = dict(d)
        aug = d.pop("augment", {})
        try:
            out = cls(**d, augment=AugmentConfig(**aug) if aug is not None else None)
        except TypeError as e:
            raise ParameterError(str(e)) from e
        if out.batch_size < 1 or out.max_epochs < 0:
            raise ParameterError("batch_size must be >= 1 and max_epochs >= 0")
        if not 0 < out.decay_factor < 1:
            raise ParameterError("decay_factor must lie in (0, 1)")
        return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    stop_reason: str = "max_epochs"
    wall_time: float = 0.0
    best_epoch: Optional[int] = None

    @property
    def best_val_acc(self) -> Optional[float]:
        return self.records[self.best_epoch].val_acc if self.best_epoch is not None else None

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc,lr"]
        for r in self.records:
            lines.append(",".join(repr(v) for v in (r.epoch, r.train_loss, r.train_acc,
                                                    r.val_loss, r.val_acc, r.lr)))
        return "\n".join(lines) + "\n"


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    confusion: np.ndarray


def evaluate(model: Model, data: Dataset, batch_size: int = 256) -> EvalResult:
    """Clean inference pass: no dropout, running batchnorm statistics."""
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    k = model.config.head.num_classes
    conf = np.zeros((k, k), dtype=np.int64)
    total = 0.0
    dtype = model.layers[-2].params["W"].dtype
    for start in range(0, len(data), batch_size):
        x = data.images[start:start + batch_size].astype(dtype, copy=False)
        y = data.labels[start:start + batch_size]
        probs = model.forward(x, training=False)
        loss, _ = cross_entropy(probs, y)
        total += loss * len(y)
        np.add.at(conf, (y, probs.argmax(axis=1)), 1)
    return EvalResult(total / len(data), float(np.trace(conf) / len(data)), conf)


def train(model: Model, data: DatasetSplit, params: TrainParams, on_epoch=None) -> TrainHistory:
    """Run the epoch loop; the best-validation-accuracy weights are restored at the end."""
    if len(data.train) == 0 or len(data.val) == 0:
        raise DataError("training needs non-empty train and validation splits")
    root = RngStream(model.config.seed).derive(7)
    opt = Adam(lr=params.lr_init, weight_decay=params.weight_decay)
    sched = ScheduleState(params.lr_patience, params.stop_patience, params.decay_factor,
                          params.min_delta, params.lr_floor)
    hist = TrainHistory()
    best_snap, best_acc = None, -math.inf
    dtype = model.layers[-2].params["W"].dtype
    n = len(data.train)
    t0 = time.perf_counter()
    for epoch in range(params.max_epochs):
        perm = root.derive(0, epoch).permutation(n)
        loss_sum, correct = 0.0, 0
        for b, start in enumerate(range(0, n, params.batch_size)):
            idx = perm[start:start + params.batch_size]
            x = data.train.images[idx].astype(dtype, copy=False)
            y = data.train.labels[idx]
            if params.augment is not None:
                x = augment_batch(x, params.augment, [root.derive(1, epoch, int(i)) for i in idx])
            try:
                probs = model.forward(x, training=True)
                loss, d_logits = cross_entropy(probs, y)
                model_step(opt, model, model.backward(d_logits))
            except NumericOverflowError as e:
                e.args = (f"epoch {epoch}, batch {b}: {e.args[0]}",) + e.args[1:]
                e.epoch, e.batch = epoch, b
                raise
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y).sum())
        val = evaluate(model, data.val, max(params.batch_size, 256))
        rec = EpochRecord(epoch, loss_sum / n, correct / n, val.loss, val.accuracy, opt.lr)
        hist.records.append(rec)
        if val.accuracy > best_acc:
            best_acc, best_snap, hist.best_epoch = val.accuracy, model.snapshot(), epoch
        log.info("epoch %d loss %.4f acc %.4f val_loss %.4f val_acc %.4f lr %.3g",
                 epoch, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc, rec.lr)
        if on_epoch is not None:
            on_epoch(rec)
        opt.lr, stop = schedule_update(sched, opt.lr, val.accuracy)
        if stop:
            hist.stop_reason = "early_stop"
            break
    if best_snap is not None:
        model.restore(best_snap)
    hist.wall_time = time.perf_counter() - t0
    return hist
